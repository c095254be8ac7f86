"""Verification and search over a loaded namespace."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional

from .core import (
    ABSOLUTE_GENESIS,
    GENESIS_KINDS,
    RELATIVE_GENESIS,
    TERMINAL,
    ZERO_HASH,
    Block,
    CircledBlockchain,
    DataPayload,
    HexDigest,
    NotTerminal,
    SuperPayload,
    Superblockchain,
    TerminalPayload,
    compute_hash,
    is_hex_digest,
    meets_difficulty,
)

HASH_MISMATCH = "hash_mismatch"
DIFFICULTY_UNMET = "difficulty_unmet"
LINK_BROKEN = "link_broken"
AGGR_MISMATCH = "aggr_mismatch"
GENESIS_MALFORMED = "genesis_malformed"
SUPER_PAYLOAD_MISMATCH = "super_payload_mismatch"


class MalformedQuery(ValueError):
    pass


@dataclass(frozen=True)
class Failure:
    block_index: int
    level: str
    reason: str

    def to_json(self) -> dict:
        return {"block_index": self.block_index, "level": self.level, "reason": self.reason}


@dataclass
class VerificationReport:
    checked_blocks: int = 0
    hash_computations: int = 0
    failures: list[Failure] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.failures

    def fail(self, block_index: int, level: str, reason: str) -> None:
        self.failures.append(Failure(block_index, level, reason))

    def hash(self, data: bytes) -> HexDigest:
        self.hash_computations += 1
        return compute_hash(data)

    def merge(self, other: "VerificationReport") -> None:
        self.checked_blocks += other.checked_blocks
        self.hash_computations += other.hash_computations
        self.failures.extend(other.failures)

    def to_json(self) -> dict:
        return {
            "valid": self.valid,
            "checked_blocks": self.checked_blocks,
            "hash_computations": self.hash_computations,
            "failures": [f.to_json() for f in self.failures],
        }


def _genesis_ok(b: Block) -> bool:
    if b.nonce != 0 or b.data is not None or b.previous_hash != b.current_hash:
        return False
    if b.kind == ABSOLUTE_GENESIS:
        return b.index == 0 and b.current_hash == ZERO_HASH
    return b.kind == RELATIVE_GENESIS


def _check_block(b: Block, difficulty: int, report: VerificationReport, level: str) -> bool:
    report.checked_blocks += 1
    if b.kind in GENESIS_KINDS:
        if not _genesis_ok(b):
            report.fail(b.index, level, GENESIS_MALFORMED)
            return False
        return True
    if report.hash(b.encoding()) != b.current_hash:
        report.fail(b.index, level, HASH_MISMATCH)
        return False
    if not meets_difficulty(b.current_hash, difficulty):
        report.fail(b.index, level, DIFFICULTY_UNMET)
        return False
    return True


def verify_block(b: Block, difficulty: int) -> bool:
    return _check_block(b, difficulty, VerificationReport(), "lower")


def _verify_lower(sbc: Superblockchain, difficulty: int, report: VerificationReport) -> None:
    expected_index = 0
    prev: Optional[Block] = None
    for k, cb in enumerate(sbc.chains):
        g = cb.genesis
        if k == 0 and g.kind != ABSOLUTE_GENESIS or k > 0 and g.kind != RELATIVE_GENESIS:
            report.fail(g.index, "lower", GENESIS_MALFORMED)
        if k > 0 and not sbc.chains[k - 1].sealed:
            # A new genesis without the previous TB breaks the chain.
            report.fail(g.index, "lower", LINK_BROKEN)
        for b in cb.lower_blocks():
            _check_block(b, difficulty, report, "lower")
            if b.index != expected_index:
                report.fail(b.index, "lower", GENESIS_MALFORMED if b.kind in GENESIS_KINDS else LINK_BROKEN)
            expected_index = b.index + 1
            if b.kind in GENESIS_KINDS:
                if prev is not None and b.current_hash != prev.current_hash:
                    report.fail(b.index, "lower", LINK_BROKEN)
            elif prev is None or b.previous_hash != prev.current_hash:
                report.fail(b.index, "lower", LINK_BROKEN)
            prev = b


def _verify_seals(sbc: Superblockchain, report: VerificationReport) -> None:
    for cb in sbc.chains:
        tb = cb.terminal
        if tb is None:
            continue
        if not cb.blocks or not isinstance(tb.data, TerminalPayload):
            report.fail(tb.index, "lower", AGGR_MISMATCH)
            continue
        joined = cb.genesis.current_hash + "".join(b.current_hash for b in cb.blocks)
        p = tb.data
        stamps = [b.timestamp for b in cb.blocks]
        if (report.hash(joined.encode("utf-8")) != p.aggr_hash
                or (p.timestamp_from, p.timestamp_to) != (min(stamps), max(stamps))
                or (p.block_index_from, p.block_index_to) != (cb.blocks[0].index, cb.blocks[-1].index)):
            report.fail(tb.index, "lower", AGGR_MISMATCH)


def _verify_upper(sbc: Superblockchain, difficulty: int, report: VerificationReport) -> None:
    prev_hash = ZERO_HASH
    for i, sb in enumerate(sbc.superblocks):
        _check_block(sb, difficulty, report, "super")
        if sb.index != i:
            report.fail(sb.index, "super", LINK_BROKEN)
        if sb.previous_hash != prev_hash:
            report.fail(sb.index, "super", LINK_BROKEN)
        prev_hash = sb.current_hash
        embedded = sb.data.terminal if isinstance(sb.data, SuperPayload) else None
        if embedded is None or report.hash(embedded.encoding()) != embedded.current_hash:
            report.fail(sb.index, "super", SUPER_PAYLOAD_MISMATCH)


def verify_upper(sbc: Superblockchain, difficulty: int) -> VerificationReport:
    """Superblock hashes, links and embedded-TB hashes only; cost depends on superblock count alone."""
    report = VerificationReport()
    _verify_upper(sbc, difficulty, report)
    return report


def verify_full(sbc: Superblockchain, difficulty: int) -> VerificationReport:
    """Check every block, link, CB seal and superblock of one namespace.

    Order is fixed (lower blocks by index, then seals, then superblocks) so the
    first reported failure is deterministic.
    """
    report = VerificationReport()
    _verify_lower(sbc, difficulty, report)
    _verify_seals(sbc, report)
    _verify_upper(sbc, difficulty, report)
    sealed = [cb for cb in sbc.chains if cb.sealed]
    # Only the newest sealed CB may still be waiting for its superblock.
    if len(sbc.superblocks) > len(sealed) or len(sealed) - len(sbc.superblocks) > 1 \
            or (len(sealed) > len(sbc.superblocks) and sbc.chains[-1] is not sealed[-1]):
        idx = sbc.superblocks[-1].index if sbc.superblocks else 0
        report.fail(idx, "super", SUPER_PAYLOAD_MISMATCH)
    for cb, sb in zip(sealed, sbc.superblocks):
        if not isinstance(sb.data, SuperPayload) or sb.data.terminal != cb.terminal:
            report.fail(sb.index, "super", SUPER_PAYLOAD_MISMATCH)
    for k in range(1, len(sbc.chains)):
        if k - 1 < len(sbc.superblocks):
            sb = sbc.superblocks[k - 1]
            g = sbc.chains[k].genesis
            if isinstance(sb.data, SuperPayload) and g.current_hash != sb.data.current_hash:
                report.fail(g.index, "lower", LINK_BROKEN)
    return report


@dataclass(frozen=True)
class TBReport:
    found: bool
    hash_valid: bool
    aggr_valid: bool
    superblock_index: Optional[int]

    def to_json(self) -> dict:
        return {
            "found": self.found,
            "hash_valid": self.hash_valid,
            "aggr_valid": self.aggr_valid,
            "superblock_index": self.superblock_index,
        }


def verify_tb(sbc: Superblockchain, tb: Block, difficulty: int) -> TBReport:
    if tb.kind != TERMINAL or not isinstance(tb.data, TerminalPayload):
        raise NotTerminal("verify_tb expects a terminal block")
    hash_valid = (compute_hash(tb.encoding()) == tb.current_hash
                  and meets_difficulty(tb.current_hash, difficulty))
    sealed = [cb for cb in sbc.chains if cb.sealed]
    for pos, sb in enumerate(sbc.superblocks):
        if isinstance(sb.data, SuperPayload) and sb.data.current_hash == tb.current_hash:
            cb = sealed[pos] if pos < len(sealed) else None
            return TBReport(True, hash_valid, _stored_aggr(cb) == tb.data.aggr_hash, sb.index)
    return TBReport(False, hash_valid, False, None)


def _stored_aggr(cb: Optional[CircledBlockchain]) -> Optional[HexDigest]:
    # Data-block hashes are recomputed from their stored fields, so a tampered
    # record changes the aggregate even if its current_hash was left alone.
    if cb is None or not cb.blocks:
        return None
    parts = [cb.genesis.current_hash]
    parts.extend(compute_hash(b.encoding()) for b in cb.blocks)
    return compute_hash("".join(parts).encode("utf-8"))


@dataclass(frozen=True)
class Location:
    block_index: int
    cb_ordinal: int
    sealed: bool

    def to_json(self) -> dict:
        return {"block_index": self.block_index, "cb_ordinal": self.cb_ordinal, "sealed": self.sealed}


class DigestIndex:
    """digest -> [(cb_ordinal, block_index)] for one namespace."""

    def __init__(self):
        self._locations: dict[str, list[tuple[int, int]]] = defaultdict(list)

    @classmethod
    def build(cls, sbc: Superblockchain) -> "DigestIndex":
        index = cls()
        for k, cb in enumerate(sbc.chains):
            for b in cb.blocks:
                index.add(k, b)
        return index

    def add(self, cb_ordinal: int, block: Block) -> None:
        if isinstance(block.data, DataPayload):
            self._locations[block.data.digest].append((cb_ordinal, block.index))

    def find(self, sbc: Superblockchain, digest: HexDigest) -> list[Location]:
        if not is_hex_digest(digest):
            raise ValueError("digest must be 64 lowercase hex characters")
        return [Location(idx, k, sbc.chains[k].sealed)
                for k, idx in self._locations.get(digest, ())]


def find_by_digest(sbc: Superblockchain, index: DigestIndex, digest: HexDigest) -> tuple[int, list[Location]]:
    locations = index.find(sbc, digest)
    return len(locations), locations


@dataclass(frozen=True)
class SearchQuery:
    block_index: Optional[int] = None
    block_time: Optional[tuple[int, int]] = None
    record_time: Optional[tuple[int, int]] = None

    def __post_init__(self):
        chosen = [v for v in (self.block_index, self.block_time, self.record_time) if v is not None]
        if len(chosen) != 1:
            raise MalformedQuery("exactly one of block_index, block_time, record_time is required")
        if self.block_index is not None and (isinstance(self.block_index, bool)
                                             or not isinstance(self.block_index, int)):
            raise MalformedQuery("block_index must be an integer")
        for interval in (self.block_time, self.record_time):
            if interval is None:
                continue
            lo, hi = interval
            if not all(isinstance(v, int) and not isinstance(v, bool) for v in (lo, hi)):
                raise MalformedQuery("interval bounds must be integers")
            if lo > hi:
                raise MalformedQuery("interval needs from <= to")

    @classmethod
    def from_json(cls, obj: dict) -> "SearchQuery":
        if not isinstance(obj, dict):
            raise MalformedQuery("query must be an object")
        keys = {"block_index", "block_time", "record_time"} & set(obj)
        kwargs: dict = {}
        for key in keys:
            value = obj[key]
            if key == "block_index":
                kwargs[key] = value
                continue
            if not isinstance(value, dict) or set(value) != {"from", "to"}:
                raise MalformedQuery(f"{key} must be {{from, to}}")
            kwargs[key] = (value["from"], value["to"])
        return cls(**kwargs)


@dataclass(frozen=True)
class SearchHit:
    block: Block
    terminal: Optional[Block]
    cb_ordinal: int

    @property
    def sealed(self) -> bool:
        return self.terminal is not None

    def to_json(self) -> dict:
        return {
            "block": self.block.to_json(),
            "terminal": self.terminal.to_json() if self.terminal else None,
            "sealed": self.sealed,
            "cb_ordinal": self.cb_ordinal,
        }


def _overlaps(lo: int, hi: int, q: tuple[int, int]) -> bool:
    return lo <= q[1] and q[0] <= hi


def _cb_may_match(cb: CircledBlockchain, q: SearchQuery) -> bool:
    # TB range fields bound block index/time of sealed CBs; record times are client-supplied
    # and not bounded by the TB, so record_time never prunes.
    tb = cb.terminal
    if tb is None or not isinstance(tb.data, TerminalPayload):
        return True
    p = tb.data
    if q.block_index is not None:
        return p.block_index_from <= q.block_index <= p.block_index_to
    if q.block_time is not None:
        return _overlaps(p.timestamp_from, p.timestamp_to, q.block_time)
    return True


def _block_matches(b: Block, q: SearchQuery) -> bool:
    if q.block_index is not None:
        return b.index == q.block_index
    if q.block_time is not None:
        return q.block_time[0] <= b.timestamp <= q.block_time[1]
    meta = b.data.meta if isinstance(b.data, DataPayload) else None
    interval = meta.record_interval() if meta is not None else None
    return interval is not None and _overlaps(*interval, q.record_time)


def search(sbc: Superblockchain, q: SearchQuery) -> list[SearchHit]:
    hits = []
    for k, cb in enumerate(sbc.chains):
        if not _cb_may_match(cb, q):
            continue
        for b in cb.blocks:
            if _block_matches(b, q):
                hits.append(SearchHit(b, cb.terminal, k))
    return hits
