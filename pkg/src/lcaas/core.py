"""Block types, canonical encoding, proof-of-work mining and the circled-chain lifecycle.

A namespace owns a lower-level chain of *circled blockchains* (CBs) and an
upper-level superblockchain.  Every CB starts with a genesis block (absolute
for the very first CB, relative afterwards), holds hash-linked data blocks and
is closed by a terminal block whose fields are copied into a new superblock.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Union

ZERO_HASH = "0" * 64
MAX_NONCE = 2**32
MAX_DIFFICULTY = 8
MAX_WINDOW_SECONDS = 86400

ABSOLUTE_GENESIS = "absolute_genesis"
RELATIVE_GENESIS = "relative_genesis"
DATA = "data"
TERMINAL = "terminal"
SUPER = "super"

BLOCK_KINDS = (ABSOLUTE_GENESIS, RELATIVE_GENESIS, DATA, TERMINAL, SUPER)
GENESIS_KINDS = (ABSOLUTE_GENESIS, RELATIVE_GENESIS)

_HEX_DIGEST = re.compile(r"[0-9a-f]{64}")

# HexDigest values are plain str; validate with is_hex_digest().
HexDigest = str


class LedgerError(Exception):
    """Base class for ledger failures."""


class ChainSealed(LedgerError):
    pass


class ChainFull(LedgerError):
    pass


class EmptyChain(LedgerError):
    pass


class MiningExhausted(LedgerError):
    pass


class NotTerminal(LedgerError):
    pass


def is_hex_digest(value: Any) -> bool:
    return isinstance(value, str) and _HEX_DIGEST.fullmatch(value) is not None


def _require_digest(value: Any, what: str = "digest") -> None:
    if not is_hex_digest(value):
        raise ValueError(f"{what} must be 64 lowercase hex characters, got {value!r}")


@dataclass(frozen=True)
class LogMeta:
    """Optional client metadata preserved in a data block."""

    file_name: Optional[str] = None
    ts_from: Optional[int] = None
    ts_to: Optional[int] = None

    def to_json(self) -> dict:
        return {k: v for k, v in (("file_name", self.file_name),
                                  ("ts_from", self.ts_from),
                                  ("ts_to", self.ts_to)) if v is not None}

    @classmethod
    def from_json(cls, obj: dict) -> "LogMeta":
        unknown = set(obj) - {"file_name", "ts_from", "ts_to"}
        if unknown:
            raise ValueError(f"unknown meta keys: {sorted(unknown)}")
        return cls(obj.get("file_name"), obj.get("ts_from"), obj.get("ts_to"))

    def is_empty(self) -> bool:
        return not self.to_json()

    def record_interval(self) -> Optional[tuple[int, int]]:
        """Closed record-time interval; a single bound is treated as a point."""
        lo = self.ts_from if self.ts_from is not None else self.ts_to
        hi = self.ts_to if self.ts_to is not None else self.ts_from
        if lo is None:
            return None
        return lo, hi


@dataclass(frozen=True)
class DataPayload:
    digest: HexDigest
    meta: Optional[LogMeta] = None

    kind = DATA

    def fields_json(self) -> dict:
        out: dict = {"digest": self.digest}
        if self.meta is not None and not self.meta.is_empty():
            out["meta"] = self.meta.to_json()
        return out


@dataclass(frozen=True)
class TerminalPayload:
    aggr_hash: HexDigest
    timestamp_from: int
    timestamp_to: int
    block_index_from: int
    block_index_to: int

    kind = TERMINAL

    def fields_json(self) -> dict:
        return {
            "aggr_hash": self.aggr_hash,
            "block_index_from": self.block_index_from,
            "block_index_to": self.block_index_to,
            "timestamp_from": self.timestamp_from,
            "timestamp_to": self.timestamp_to,
        }


@dataclass(frozen=True)
class SuperPayload:
    """Verbatim copy of the six fields of one terminal block."""

    terminal: "Block"

    kind = SUPER

    def fields_json(self) -> dict:
        tb = self.terminal
        return {
            "current_hash": tb.current_hash,
            "data": payload_to_json(tb.data),
            "index": tb.index,
            "nonce": tb.nonce,
            "previous_hash": tb.previous_hash,
            "timestamp": tb.timestamp,
        }

    # Convenience accessors so callers can write sb.data.current_hash.
    @property
    def current_hash(self) -> HexDigest:
        return self.terminal.current_hash

    @property
    def index(self) -> int:
        return self.terminal.index


# None is the genesis payload.
Payload = Union[None, DataPayload, TerminalPayload, SuperPayload]


@dataclass(frozen=True)
class Block:
    nonce: int
    index: int
    timestamp: int
    kind: str
    data: Payload
    previous_hash: HexDigest
    current_hash: HexDigest

    def to_json(self) -> dict:
        return {
            "current_hash": self.current_hash,
            "data": payload_to_json(self.data),
            "index": self.index,
            "kind": self.kind,
            "nonce": self.nonce,
            "previous_hash": self.previous_hash,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Block":
        expected = {"current_hash", "data", "index", "kind", "nonce", "previous_hash", "timestamp"}
        if not isinstance(obj, dict) or set(obj) != expected:
            raise ValueError("block must carry exactly the fields " + ", ".join(sorted(expected)))
        kind = obj["kind"]
        if kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block kind {kind!r}")
        for name in ("nonce", "index", "timestamp"):
            if not _is_int(obj[name]) or obj[name] < 0:
                raise ValueError(f"{name} must be a non-negative integer")
        for name in ("previous_hash", "current_hash"):
            _require_digest(obj[name], name)
        data = payload_from_json(obj["data"])
        expected_payload = None if kind in GENESIS_KINDS else kind
        if (data.kind if data is not None else None) != expected_payload:
            raise ValueError(f"payload does not match block kind {kind!r}")
        return cls(obj["nonce"], obj["index"], obj["timestamp"], kind, data,
                   obj["previous_hash"], obj["current_hash"])

    def encoding(self) -> bytes:
        return canonical_encoding(self.nonce, self.index, self.timestamp, self.data, self.previous_hash)


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def payload_to_json(payload: Payload) -> Optional[dict]:
    if payload is None:
        return None
    return {"kind": payload.kind, "fields": payload.fields_json()}


def payload_from_json(obj: Any) -> Payload:
    if obj is None:
        return None
    if not isinstance(obj, dict) or set(obj) != {"kind", "fields"} or not isinstance(obj["fields"], dict):
        raise ValueError("payload must be null or {kind, fields}")
    kind, f = obj["kind"], obj["fields"]
    if kind == DATA:
        if not set(f) <= {"digest", "meta"} or "digest" not in f:
            raise ValueError("data payload needs digest and optional meta")
        _require_digest(f["digest"])
        meta = f.get("meta")
        if meta is not None:
            if not isinstance(meta, dict):
                raise ValueError("meta must be an object")
            meta = LogMeta.from_json(meta)
            _check_meta_types(meta)
        return DataPayload(f["digest"], meta)
    if kind == TERMINAL:
        names = ("aggr_hash", "timestamp_from", "timestamp_to", "block_index_from", "block_index_to")
        if set(f) != set(names):
            raise ValueError("terminal payload fields: " + ", ".join(names))
        _require_digest(f["aggr_hash"], "aggr_hash")
        for name in names[1:]:
            if not _is_int(f[name]):
                raise ValueError(f"{name} must be an integer")
        return TerminalPayload(*(f[n] for n in names))
    if kind == SUPER:
        tb = Block.from_json({**f, "kind": TERMINAL})
        return SuperPayload(tb)
    raise ValueError(f"unknown payload kind {kind!r}")


def _check_meta_types(meta: LogMeta) -> None:
    if meta.file_name is not None and not isinstance(meta.file_name, str):
        raise ValueError("file_name must be a string")
    for name in ("ts_from", "ts_to"):
        value = getattr(meta, name)
        if value is not None and not _is_int(value):
            raise ValueError(f"{name} must be an integer")


def canonical_payload(payload: Payload) -> str:
    if payload is None:
        return "null"
    return canonical_json(payload_to_json(payload))


def canonical_encoding(nonce: int, index: int, timestamp: int, payload: Payload,
                       previous_hash: HexDigest) -> bytes:
    return f"{nonce}|{index}|{timestamp}|{canonical_payload(payload)}|{previous_hash}".encode("utf-8")


def compute_hash(data: bytes) -> HexDigest:
    return hashlib.sha256(data).hexdigest()


def meets_difficulty(h: HexDigest, difficulty: int) -> bool:
    return h[:difficulty] == "0" * difficulty


def mine_block(index: int, timestamp: int, payload: Payload, previous_hash: HexDigest,
               difficulty: int, max_nonce: int = MAX_NONCE) -> tuple[int, HexDigest]:
    """Return the smallest nonce (and its hash) whose block hash meets ``difficulty``."""
    if not 0 <= difficulty <= MAX_DIFFICULTY:
        raise ValueError(f"difficulty must be in [0, {MAX_DIFFICULTY}]")
    # Nonce leads the encoding, so only the tail can be precomputed.
    tail = f"|{index}|{timestamp}|{canonical_payload(payload)}|{previous_hash}".encode("utf-8")
    prefix = "0" * difficulty
    sha256 = hashlib.sha256
    for nonce in range(max_nonce + 1):
        h = sha256(str(nonce).encode("ascii") + tail).hexdigest()
        if h.startswith(prefix):
            return nonce, h
    raise MiningExhausted(f"no nonce <= {max_nonce} meets difficulty {difficulty}")


def make_block(kind: str, index: int, timestamp: int, payload: Payload,
               previous_hash: HexDigest, difficulty: int) -> Block:
    nonce, h = mine_block(index, timestamp, payload, previous_hash, difficulty)
    return Block(nonce, index, timestamp, kind, payload, previous_hash, h)


@dataclass(frozen=True)
class LedgerConfig:
    difficulty: int = 2
    max_blocks_per_cb: int = 10
    max_open_window_seconds: int = 3600
    ledger_dir: Optional[Path] = None
    store_raw: bool = False

    def __post_init__(self):
        if not _is_int(self.difficulty) or not 0 <= self.difficulty <= MAX_DIFFICULTY:
            raise ValueError(f"difficulty must be an integer in [0, {MAX_DIFFICULTY}]")
        if not _is_int(self.max_blocks_per_cb) or self.max_blocks_per_cb < 1:
            raise ValueError("max_blocks_per_cb must be a positive integer")
        if not _is_int(self.max_open_window_seconds) or not 0 < self.max_open_window_seconds <= MAX_WINDOW_SECONDS:
            raise ValueError(f"max_open_window_seconds must be in [1, {MAX_WINDOW_SECONDS}]")
        if self.ledger_dir is not None:
            object.__setattr__(self, "ledger_dir", Path(self.ledger_dir))


@dataclass
class CircledBlockchain:
    genesis: Block
    blocks: list[Block] = field(default_factory=list)
    terminal: Optional[Block] = None
    opened_at: int = 0

    @property
    def sealed(self) -> bool:
        return self.terminal is not None

    def last_block(self) -> Block:
        if self.terminal is not None:
            return self.terminal
        return self.blocks[-1] if self.blocks else self.genesis

    def lower_blocks(self) -> list[Block]:
        """Genesis, data and (if sealed) terminal blocks in index order."""
        out = [self.genesis, *self.blocks]
        if self.terminal is not None:
            out.append(self.terminal)
        return out


@dataclass
class Superblockchain:
    """Upper chain of one namespace plus every CB it has produced, oldest first."""

    namespace: str
    superblocks: list[Block] = field(default_factory=list)
    chains: list[CircledBlockchain] = field(default_factory=list)

    @property
    def open_cb(self) -> Optional[CircledBlockchain]:
        if self.chains and not self.chains[-1].sealed:
            return self.chains[-1]
        return None

    @property
    def pending_promotion(self) -> Optional[Block]:
        """Terminal block of a sealed CB that has no superblock yet."""
        if self.chains and self.chains[-1].sealed and len(self.superblocks) < len(self.chains):
            return self.chains[-1].terminal
        return None

    def data_block_count(self) -> int:
        return sum(len(cb.blocks) for cb in self.chains)


# Persist-before-apply hook: called with (level, block) before memory changes.
Commit = Callable[[str, Block], None]


def _noop_commit(level: str, block: Block) -> None:
    pass


def new_absolute_genesis(now: int) -> Block:
    return Block(0, 0, now, ABSOLUTE_GENESIS, None, ZERO_HASH, ZERO_HASH)


def new_relative_genesis(prev_super: Block, now: int) -> Block:
    if prev_super.kind != SUPER or not isinstance(prev_super.data, SuperPayload):
        raise NotTerminal("relative genesis must follow a superblock")
    tb = prev_super.data.terminal
    return Block(0, tb.index + 1, now, RELATIVE_GENESIS, None, tb.current_hash, tb.current_hash)


def append_data_block(chain: CircledBlockchain, digest: HexDigest, meta: Optional[LogMeta],
                      now: int, cfg: LedgerConfig, commit: Commit = _noop_commit) -> Block:
    if chain.sealed:
        raise ChainSealed("circled blockchain is sealed")
    if len(chain.blocks) >= cfg.max_blocks_per_cb:
        raise ChainFull(f"circled blockchain already holds {cfg.max_blocks_per_cb} blocks")
    _require_digest(digest)
    if meta is not None and meta.is_empty():
        meta = None
    prev = chain.last_block()
    block = make_block(DATA, prev.index + 1, now, DataPayload(digest, meta),
                       prev.current_hash, cfg.difficulty)
    commit("lower", block)
    chain.blocks.append(block)
    return block


def compute_aggr_hash(chain: CircledBlockchain) -> HexDigest:
    if not chain.blocks:
        raise EmptyChain("aggr_hash needs at least one data block")
    joined = chain.genesis.current_hash + "".join(b.current_hash for b in chain.blocks)
    return compute_hash(joined.encode("utf-8"))


def terminal_payload(chain: CircledBlockchain) -> TerminalPayload:
    stamps = [b.timestamp for b in chain.blocks]
    return TerminalPayload(
        aggr_hash=compute_aggr_hash(chain),
        timestamp_from=min(stamps),
        timestamp_to=max(stamps),
        block_index_from=chain.blocks[0].index,
        block_index_to=chain.blocks[-1].index,
    )


def seal_chain(chain: CircledBlockchain, now: int, difficulty: int,
               commit: Commit = _noop_commit) -> Block:
    if chain.sealed:
        raise ChainSealed("circled blockchain is already sealed")
    if not chain.blocks:
        raise EmptyChain("cannot seal a circled blockchain without data blocks")
    last = chain.blocks[-1]
    tb = make_block(TERMINAL, last.index + 1, now, terminal_payload(chain),
                    last.current_hash, difficulty)
    commit("lower", tb)
    chain.terminal = tb
    return tb


def promote_to_superblock(sbc: Superblockchain, tb: Block, now: int, difficulty: int,
                          commit: Commit = _noop_commit) -> Block:
    if tb.kind != TERMINAL or not isinstance(tb.data, TerminalPayload):
        raise NotTerminal("only terminal blocks can be promoted")
    if sbc.superblocks:
        prev = sbc.superblocks[-1]
        index, prev_hash = prev.index + 1, prev.current_hash
    else:
        index, prev_hash = 0, ZERO_HASH
    sb = make_block(SUPER, index, now, SuperPayload(tb), prev_hash, difficulty)
    commit("super", sb)
    sbc.superblocks.append(sb)
    return sb


def should_close(chain: CircledBlockchain, cfg: LedgerConfig, now: int) -> bool:
    n = len(chain.blocks)
    if n >= cfg.max_blocks_per_cb:
        return True
    return n >= 1 and now - chain.opened_at >= cfg.max_open_window_seconds


def open_chain(sbc: Superblockchain, now: int, commit: Commit = _noop_commit) -> CircledBlockchain:
    """Start the next CB: AGB-rooted for a fresh namespace, RGB-rooted after a superblock."""
    if sbc.open_cb is not None or sbc.pending_promotion is not None:
        raise LedgerError("previous circled blockchain is not closed and promoted")
    if sbc.superblocks:
        genesis = new_relative_genesis(sbc.superblocks[-1], now)
    else:
        genesis = new_absolute_genesis(now)
    commit("lower", genesis)
    chain = CircledBlockchain(genesis, opened_at=now)
    sbc.chains.append(chain)
    return chain


def settle(sbc: Superblockchain, now: int, difficulty: int, commit: Commit = _noop_commit) -> None:
    """Finish an interrupted closure: promote a dangling TB and open the next CB."""
    tb = sbc.pending_promotion
    if tb is not None:
        promote_to_superblock(sbc, tb, now, difficulty, commit)
    if sbc.open_cb is None:
        open_chain(sbc, now, commit)


def close_chain(sbc: Superblockchain, cfg: LedgerConfig, now: int,
                commit: Commit = _noop_commit) -> Block:
    """Seal the open CB, promote its TB and open the next CB. Returns the superblock."""
    chain = sbc.open_cb
    if chain is None:
        raise LedgerError("no open circled blockchain")
    tb = seal_chain(chain, now, cfg.difficulty, commit)
    sb = promote_to_superblock(sbc, tb, now, cfg.difficulty, commit)
    open_chain(sbc, now, commit)
    return sb


def ingest(sbc: Superblockchain, digest: HexDigest, meta: Optional[LogMeta], cfg: LedgerConfig,
           now: int, commit: Commit = _noop_commit) -> tuple[int, int]:
    """Append one data block and close the CB if the closure policy says so."""
    _require_digest(digest)
    settle(sbc, now, cfg.difficulty, commit)
    block = append_data_block(sbc.open_cb, digest, meta, now, cfg, commit)
    if should_close(sbc.open_cb, cfg, now):
        close_chain(sbc, cfg, now, commit)
    return block.index, block.timestamp


def flush(sbc: Superblockchain, cfg: LedgerConfig, now: int, commit: Commit = _noop_commit) -> bool:
    """Force closure of a non-empty open CB. Returns False when there was nothing to seal."""
    if not sbc.chains:
        return False
    settle(sbc, now, cfg.difficulty, commit)
    chain = sbc.open_cb
    if not chain.blocks:
        return False
    close_chain(sbc, cfg, now, commit)
    return True
