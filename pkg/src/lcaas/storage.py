"""Append-only JSON Lines ledger files and the content-addressed raw log store.

Layout under the ledger directory::

    <namespace>.ledger.jsonl   one canonical JSON record per line, LF-terminated
    blobs/<sha256-hex>         raw log content, named by its digest
"""

from __future__ import annotations

import json
import logging
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

from . import core
from .core import (
    GENESIS_KINDS,
    SUPER,
    TERMINAL,
    Block,
    CircledBlockchain,
    HexDigest,
    LedgerConfig,
    LedgerError,
    Superblockchain,
    canonical_json,
    compute_hash,
    is_hex_digest,
)
from .verify import VerificationReport, verify_full

log = logging.getLogger(__name__)

LEDGER_SUFFIX = ".ledger.jsonl"
LEVELS = ("lower", "super")
_NAMESPACE = re.compile(r"[A-Za-z0-9_-]{1,64}")


class CorruptRecord(LedgerError):
    def __init__(self, path: Path, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = path
        self.line_no = line_no
        self.reason = reason


class InvalidLedger(LedgerError):
    def __init__(self, reports: dict[str, VerificationReport]):
        bad = {ns: r for ns, r in reports.items() if not r.valid}
        detail = "; ".join(
            f"{ns}: " + ", ".join(f"{f.level}#{f.block_index} {f.reason}" for f in r.failures[:5])
            for ns, r in bad.items())
        super().__init__(f"ledger failed verification ({detail})")
        self.reports = reports


def is_namespace(name: str) -> bool:
    return isinstance(name, str) and _NAMESPACE.fullmatch(name) is not None


def encode_record(namespace: str, level: str, block: Block) -> bytes:
    return (canonical_json({"block": block.to_json(), "level": level, "namespace": namespace})
            + "\n").encode("utf-8")


def decode_record(line: bytes) -> tuple[str, str, Block]:
    obj = json.loads(line.decode("utf-8"))
    if not isinstance(obj, dict) or set(obj) != {"block", "level", "namespace"}:
        raise ValueError("record must have block, level and namespace")
    level = obj["level"]
    if level not in LEVELS:
        raise ValueError(f"unknown level {level!r}")
    block = Block.from_json(obj["block"])
    if (level == "super") != (block.kind == SUPER):
        raise ValueError(f"{block.kind} block recorded at level {level}")
    return obj["namespace"], level, block


class LedgerStore:
    """Writes ledger records; each append is flushed and fsynced before returning."""

    def __init__(self, ledger_dir: Path, fsync: bool = True):
        self.dir = Path(ledger_dir)
        self.fsync = fsync

    def path_for(self, namespace: str) -> Path:
        if not is_namespace(namespace):
            raise ValueError(f"malformed namespace {namespace!r}")
        return self.dir / f"{namespace}{LEDGER_SUFFIX}"

    def append(self, namespace: str, level: str, block: Block) -> None:
        line = encode_record(namespace, level, block)
        self.dir.mkdir(parents=True, exist_ok=True)
        with open(self.path_for(namespace), "ab") as fh:
            fh.write(line)
            fh.flush()
            if self.fsync:
                os.fsync(fh.fileno())

    def committer(self, namespace: str) -> core.Commit:
        return lambda level, block: self.append(namespace, level, block)

    def namespaces(self) -> list[str]:
        if not self.dir.is_dir():
            return []
        return sorted(p.name[: -len(LEDGER_SUFFIX)] for p in self.dir.glob("*" + LEDGER_SUFFIX))


class BlobStore:
    def __init__(self, root: Path):
        self.root = Path(root)

    def path_for(self, digest: HexDigest) -> Path:
        if not is_hex_digest(digest):
            raise ValueError("blob names are 64-char lowercase hex digests")
        return self.root / digest

    def put(self, content: bytes) -> HexDigest:
        digest = compute_hash(content)
        target = self.path_for(digest)
        if target.exists():
            return digest
        self.root.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(content)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        return digest

    def get(self, digest: HexDigest) -> bytes:
        return self.path_for(digest).read_bytes()

    def __iter__(self) -> Iterator[HexDigest]:
        if self.root.is_dir():
            for p in sorted(self.root.iterdir()):
                if is_hex_digest(p.name):
                    yield p.name

    def check(self) -> list[HexDigest]:
        """Names of blobs whose content no longer hashes to their filename."""
        return [d for d in self if compute_hash(self.get(d)) != d]


def store_raw(blobs: BlobStore, cfg: LedgerConfig, content: bytes) -> HexDigest:
    if not cfg.store_raw:
        raise LedgerError("raw storage is disabled (store_raw = false)")
    return blobs.put(content)


@dataclass
class LoadedLedger:
    namespaces: dict[str, Superblockchain] = field(default_factory=dict)
    reports: dict[str, VerificationReport] = field(default_factory=dict)
    dropped_tails: list[str] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return all(r.valid for r in self.reports.values())


def _read_lines(path: Path, recover_tail: bool, truncate: bool) -> tuple[list[tuple[int, bytes]], bool]:
    raw = path.read_bytes()
    parts = raw.split(b"\n")
    tail = parts.pop()  # b"" when the file ends with LF
    lines = [(i + 1, p) for i, p in enumerate(parts)]
    dropped = False
    if tail:
        line_no = len(parts) + 1
        try:
            decode_record(tail)
        except ValueError as exc:
            if not recover_tail:
                raise CorruptRecord(path, line_no, f"truncated final record: {exc}") from None
            log.warning("%s:%d: dropping partial final record", path, line_no)
            dropped = True
            if truncate:
                with open(path, "r+b") as fh:
                    fh.truncate(len(raw) - len(tail))
        else:
            # Complete record that only lost its LF.
            lines.append((line_no, tail))
            if truncate:
                with open(path, "ab") as fh:
                    fh.write(b"\n")
    return lines, dropped


def _replay(path: Path, namespace: str, lines: list[tuple[int, bytes]]) -> Superblockchain:
    sbc = Superblockchain(namespace)
    for line_no, line in lines:
        try:
            ns, level, block = decode_record(line)
        except ValueError as exc:
            raise CorruptRecord(path, line_no, f"unparseable record: {exc}") from None
        if ns != namespace:
            raise CorruptRecord(path, line_no, f"record for namespace {ns!r} in {namespace!r} file")
        chain = sbc.chains[-1] if sbc.chains else None
        if block.kind in GENESIS_KINDS:
            sbc.chains.append(CircledBlockchain(block, opened_at=block.timestamp))
        elif block.kind == SUPER:
            sbc.superblocks.append(block)
        elif chain is None or chain.sealed:
            raise CorruptRecord(path, line_no, f"{block.kind} block outside an open circled blockchain")
        elif block.kind == TERMINAL:
            chain.terminal = block
        else:
            chain.blocks.append(block)
    return sbc


def load_ledger(ledger_dir: Path, cfg: LedgerConfig, *, forensic: bool = False,
                recover_tail: bool = True, repair: bool = True,
                now: Optional[int] = None) -> LoadedLedger:
    """Rebuild every namespace from disk and verify it.

    ``repair`` lets the loader write: it truncates a partial final record and
    completes a closure that crashed between the terminal and superblock lines.
    Without ``forensic`` an invalid ledger raises InvalidLedger.
    """
    ledger_dir = Path(ledger_dir)
    store = LedgerStore(ledger_dir)
    loaded = LoadedLedger()
    for ns in store.namespaces():
        path = store.path_for(ns)
        lines, dropped = _read_lines(path, recover_tail, truncate=repair)
        if dropped:
            loaded.dropped_tails.append(ns)
        sbc = _replay(path, ns, lines)
        loaded.namespaces[ns] = sbc
        loaded.reports[ns] = verify_full(sbc, cfg.difficulty)
    if not loaded.valid and not forensic:
        raise InvalidLedger(loaded.reports)
    if repair and loaded.valid:
        for ns, sbc in loaded.namespaces.items():
            if sbc.chains and (sbc.pending_promotion is not None or sbc.open_cb is None):
                if now is None:
                    raise ValueError("repair needs the current time")
                log.info("completing interrupted closure in namespace %s", ns)
                core.settle(sbc, now, cfg.difficulty, store.committer(ns))
    return loaded
