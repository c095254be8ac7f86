"""Stateful multi-namespace ledger shared by the HTTP service and embedded CLI mode."""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional

from . import core
from .core import Block, HexDigest, LedgerConfig, LogMeta, Superblockchain, compute_hash
from .storage import BlobStore, LedgerStore, is_namespace, load_ledger
from .verify import (
    DigestIndex,
    Location,
    SearchHit,
    SearchQuery,
    TBReport,
    VerificationReport,
    search,
    verify_full,
    verify_tb,
    verify_upper,
)

log = logging.getLogger(__name__)

DEFAULT_NAMESPACE = "default"

Clock = Callable[[], int]


def system_clock() -> int:
    return int(time.time())


def fixed_clock(epoch: int) -> Clock:
    return lambda: epoch


@dataclass(frozen=True)
class Receipt:
    block_index: int
    timestamp: int
    digest: HexDigest


class _Namespace:
    def __init__(self, sbc: Superblockchain):
        self.sbc = sbc
        self.index = DigestIndex.build(sbc)
        # Serializes writers and gives readers a committed view.
        self.lock = threading.RLock()


class Ledger:
    """All namespaces of one ledger directory (or a purely in-memory ledger)."""

    def __init__(self, cfg: LedgerConfig, clock: Clock = system_clock, *,
                 forensic: bool = False, repair: bool = True):
        self.cfg = cfg
        self.clock = clock
        self.forensic = forensic
        self.read_only = not repair
        self._namespaces: dict[str, _Namespace] = {}
        self._registry_lock = threading.Lock()
        self.store: Optional[LedgerStore] = None
        self.blobs: Optional[BlobStore] = None
        self.load_reports: dict[str, VerificationReport] = {}
        self.dropped_tails: list[str] = []
        if cfg.ledger_dir is not None:
            self.store = LedgerStore(cfg.ledger_dir)
            self.blobs = BlobStore(cfg.ledger_dir / "blobs")
            loaded = load_ledger(cfg.ledger_dir, cfg, forensic=forensic, repair=repair, now=clock())
            self.load_reports = loaded.reports
            self.dropped_tails = loaded.dropped_tails
            for ns, sbc in loaded.namespaces.items():
                self._namespaces[ns] = _Namespace(sbc)

    @property
    def load_valid(self) -> bool:
        return all(r.valid for r in self.load_reports.values())

    def namespaces(self) -> list[str]:
        return sorted(self._namespaces)

    def _get(self, namespace: str, create: bool = False) -> Optional[_Namespace]:
        if not is_namespace(namespace):
            raise ValueError(f"malformed namespace {namespace!r}")
        with self._registry_lock:
            ns = self._namespaces.get(namespace)
            if ns is None and create:
                ns = self._namespaces[namespace] = _Namespace(Superblockchain(namespace))
            return ns

    def chain(self, namespace: str = DEFAULT_NAMESPACE) -> Superblockchain:
        ns = self._get(namespace)
        return ns.sbc if ns is not None else Superblockchain(namespace)

    def _committer(self, ns: _Namespace) -> core.Commit:
        persist = self.store.committer(ns.sbc.namespace) if self.store is not None else None

        def commit(level: str, block: Block) -> None:
            if self.read_only:
                raise core.LedgerError("ledger was opened read-only")
            if persist is not None:
                persist(level, block)
            if block.kind == core.DATA:
                ns.index.add(len(ns.sbc.chains) - 1, block)

        return commit

    def submit_digest(self, digest: HexDigest, meta: Optional[LogMeta] = None,
                      namespace: str = DEFAULT_NAMESPACE) -> Receipt:
        if not core.is_hex_digest(digest):
            raise ValueError("digest must be 64 lowercase hex characters")
        ns = self._get(namespace, create=True)
        with ns.lock:
            index, ts = core.ingest(ns.sbc, digest, meta, self.cfg, self.clock(), self._committer(ns))
        return Receipt(index, ts, digest)

    def submit_raw(self, content: bytes, meta: Optional[LogMeta] = None,
                   namespace: str = DEFAULT_NAMESPACE) -> Receipt:
        digest = compute_hash(content)
        if self.cfg.store_raw and self.blobs is not None:
            self.blobs.put(content)
        return self.submit_digest(digest, meta, namespace)

    def flush(self, namespace: str = DEFAULT_NAMESPACE) -> bool:
        ns = self._get(namespace)
        if ns is None:
            return False
        with ns.lock:
            return core.flush(ns.sbc, self.cfg, self.clock(), self._committer(ns))

    def verify_digest(self, digest: HexDigest, namespace: str = DEFAULT_NAMESPACE) -> list[Location]:
        if not core.is_hex_digest(digest):
            raise ValueError("digest must be 64 lowercase hex characters")
        ns = self._get(namespace)
        if ns is None:
            return []
        with ns.lock:
            return ns.index.find(ns.sbc, digest)

    def verify_raw(self, content: bytes, namespace: str = DEFAULT_NAMESPACE) -> list[Location]:
        return self.verify_digest(compute_hash(content), namespace)

    def verify_tb(self, tb: Block, namespace: str = DEFAULT_NAMESPACE) -> TBReport:
        ns = self._get(namespace)
        if ns is None:
            return verify_tb(Superblockchain(namespace), tb, self.cfg.difficulty)
        with ns.lock:
            return verify_tb(ns.sbc, tb, self.cfg.difficulty)

    def search(self, query: SearchQuery, namespace: str = DEFAULT_NAMESPACE) -> list[SearchHit]:
        ns = self._get(namespace)
        if ns is None:
            return []
        with ns.lock:
            return search(ns.sbc, query)

    def verify(self, namespace: Optional[str] = None, upper_only: bool = False) -> dict[str, VerificationReport]:
        names = [namespace] if namespace is not None else self.namespaces()
        check = verify_upper if upper_only else verify_full
        out = {}
        for name in names:
            ns = self._get(name)
            if ns is None:
                continue
            with ns.lock:
                out[name] = check(ns.sbc, self.cfg.difficulty)
        return out

    def stats(self) -> dict:
        out = {}
        for name in self.namespaces():
            ns = self._get(name)
            with ns.lock:
                sbc = ns.sbc
                open_cb = sbc.open_cb
                out[name] = {
                    "data_blocks": sbc.data_block_count(),
                    "sealed_cbs": sum(1 for cb in sbc.chains if cb.sealed),
                    "superblocks": len(sbc.superblocks),
                    "open_cb_size": len(open_cb.blocks) if open_cb is not None else 0,
                    "difficulty": self.cfg.difficulty,
                }
        return out
