"""Logchain-as-a-Service: a hierarchical, proof-of-work-sealed ledger for log storage."""

from .core import (
    ZERO_HASH,
    Block,
    CircledBlockchain,
    DataPayload,
    LedgerConfig,
    LogMeta,
    SuperPayload,
    Superblockchain,
    TerminalPayload,
    canonical_encoding,
    compute_hash,
    ingest,
    meets_difficulty,
    mine_block,
)
from .ledger import Ledger

__all__ = [
    "ZERO_HASH",
    "Block",
    "CircledBlockchain",
    "DataPayload",
    "Ledger",
    "LedgerConfig",
    "LogMeta",
    "SuperPayload",
    "Superblockchain",
    "TerminalPayload",
    "canonical_encoding",
    "compute_hash",
    "ingest",
    "meets_difficulty",
    "mine_block",
]
