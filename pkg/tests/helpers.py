"""Ledger builders and record mutators shared by the test modules."""

from __future__ import annotations

import json
import random
from pathlib import Path

from lcaas.core import LedgerConfig, LogMeta, Superblockchain, compute_hash, ingest

HEX = "0123456789abcdef"


class ManualClock:
    def __init__(self, t: int = 1_700_000_000):
        self.t = t

    def __call__(self) -> int:
        return self.t

    def advance(self, seconds: int) -> None:
        self.t += seconds


def digest_of(i: int) -> str:
    return compute_hash(f"log line {i}\n".encode())


def build_chain(n_data: int, cfg: LedgerConfig, start: int = 1_700_000_000, step: int = 7,
                with_meta: bool = True, namespace: str = "default") -> Superblockchain:
    """In-memory namespace with n_data ingests at increasing timestamps."""
    sbc = Superblockchain(namespace)
    for i in range(n_data):
        meta = LogMeta(f"app-{i}.log", 1000 * i, 1000 * i + 500) if with_meta and i % 3 else None
        ingest(sbc, digest_of(i), meta, cfg, start + step * i)
    return sbc


def leaf_paths(obj, prefix=()):
    if isinstance(obj, dict):
        for k, v in obj.items():
            yield from leaf_paths(v, prefix + (k,))
    else:
        yield prefix


def mutable_paths(block: dict) -> list[tuple]:
    """Field paths of a serialized block that a tamper test may change.

    Payload variant tags ("kind") are structure, not data.  Genesis blocks are
    not hashed, so their timestamp is bound by nothing and is excluded.
    """
    paths = []
    for p in leaf_paths(block):
        if p[-1] == "kind" or block["data"] is None and p == ("data",):
            continue
        if block["kind"] in ("absolute_genesis", "relative_genesis") and p == ("timestamp",):
            continue
        paths.append(p)
    return paths


def _get(obj, path):
    for k in path:
        obj = obj[k]
    return obj


def _set(obj, path, value):
    for k in path[:-1]:
        obj = obj[k]
    obj[path[-1]] = value


def mutate_value(value, rng: random.Random):
    if isinstance(value, int) and not isinstance(value, bool):
        return value + rng.randint(1, 1000)
    if isinstance(value, str) and len(value) == 64 and all(c in HEX for c in value):
        pos = rng.randrange(64)
        new = rng.choice([c for c in HEX if c != value[pos]])
        return value[:pos] + new + value[pos + 1:]
    if isinstance(value, str):
        return value + rng.choice("xyz")
    raise TypeError(f"cannot mutate {value!r}")


def mutate_line(line: str, rng: random.Random) -> tuple[str, tuple]:
    record = json.loads(line)
    path = rng.choice(mutable_paths(record["block"]))
    _set(record["block"], path, mutate_value(_get(record["block"], path), rng))
    return json.dumps(record, sort_keys=True, separators=(",", ":")), path


def read_lines(path: Path) -> list[str]:
    return path.read_text(encoding="utf-8").splitlines()


def write_lines(path: Path, lines: list[str]) -> None:
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
