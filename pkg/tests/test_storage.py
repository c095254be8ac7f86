import json
import random

import pytest

from lcaas import core
from lcaas.core import LedgerConfig, LogMeta, compute_hash
from lcaas.ledger import Ledger
from lcaas.storage import (
    BlobStore,
    CorruptRecord,
    InvalidLedger,
    LedgerStore,
    decode_record,
    encode_record,
    load_ledger,
    store_raw,
)
from lcaas.verify import verify_full

from helpers import ManualClock, digest_of, mutate_line, read_lines, write_lines


@pytest.fixture
def clock():
    return ManualClock()


def make_ledger(tmp_path, clock, n=7, **kw):
    cfg = LedgerConfig(**{"difficulty": 1, "max_blocks_per_cb": 3, "ledger_dir": tmp_path, **kw})
    ledger = Ledger(cfg, clock)
    for i in range(n):
        ledger.submit_digest(digest_of(i), LogMeta(f"f{i}", i, i + 1) if i % 2 else None)
        clock.advance(3)
    return ledger


def test_record_codec_is_canonical(tmp_path, clock):
    ledger = make_ledger(tmp_path, clock)
    raw = (tmp_path / "default.ledger.jsonl").read_bytes()
    for line in raw.splitlines(keepends=True):
        ns, level, block = decode_record(line.rstrip(b"\n"))
        assert encode_record(ns, level, block) == line
    assert ledger.namespaces() == ["default"]


def test_one_line_per_ingest_plus_genesis(tmp_path, clock):
    cfg = LedgerConfig(difficulty=1, max_blocks_per_cb=3, ledger_dir=tmp_path)
    ledger = Ledger(cfg, clock)
    path = tmp_path / "default.ledger.jsonl"
    ledger.submit_digest(digest_of(0))
    assert len(read_lines(path)) == 2
    ledger.submit_digest(digest_of(1))
    assert len(read_lines(path)) == 3
    ledger.submit_digest(digest_of(2))  # closes the CB
    kinds = [json.loads(line)["block"]["kind"] for line in read_lines(path)]
    assert kinds == ["absolute_genesis", "data", "data", "data", "terminal", "super", "relative_genesis"]
    levels = [json.loads(line)["level"] for line in read_lines(path)]
    assert levels[-2] == "super" and levels.count("super") == 1


def test_round_trip(tmp_path, clock):
    make_ledger(tmp_path, clock, n=11)
    path = tmp_path / "default.ledger.jsonl"
    before = path.read_bytes()
    reloaded = Ledger(LedgerConfig(difficulty=1, max_blocks_per_cb=3, ledger_dir=tmp_path), clock)
    assert reloaded.load_valid
    assert path.read_bytes() == before
    sbc = reloaded.chain()
    out = b"".join(encode_record("default", "super" if b.kind == core.SUPER else "lower", b)
                   for b in _commit_order(sbc))
    assert out == before


def _commit_order(sbc):
    # Each CB's lines, with its superblock right after the terminal line.
    for k, cb in enumerate(sbc.chains):
        yield from cb.lower_blocks()
        if k < len(sbc.superblocks):
            yield sbc.superblocks[k]


def test_reload_continues_the_chain(tmp_path, clock):
    make_ledger(tmp_path, clock, n=5)
    cfg = LedgerConfig(difficulty=1, max_blocks_per_cb=3, ledger_dir=tmp_path)
    again = Ledger(cfg, clock)
    again.submit_digest(digest_of(100))
    again.submit_digest(digest_of(101))
    third = Ledger(cfg, clock)
    assert third.load_valid
    assert len(third.verify_digest(digest_of(100))) == 1
    assert third.chain().data_block_count() == 7


def test_truncation_at_every_byte_of_final_line(tmp_path, clock):
    make_ledger(tmp_path, clock, n=4)
    path = tmp_path / "default.ledger.jsonl"
    full = path.read_bytes()
    last_start = full.rstrip(b"\n").rfind(b"\n") + 1
    cfg = LedgerConfig(difficulty=1, max_blocks_per_cb=3, ledger_dir=tmp_path)
    prefix_lines = full[:last_start].count(b"\n")
    for cut in range(last_start, len(full) + 1):
        path.write_bytes(full[:cut])
        loaded = load_ledger(tmp_path, cfg, repair=False)
        assert loaded.valid
        kept = sum(len(cb.lower_blocks()) for cb in loaded.namespaces["default"].chains) \
            + len(loaded.namespaces["default"].superblocks)
        complete = cut >= len(full) - 1  # the record survives if only its LF is lost
        assert kept == prefix_lines + (1 if complete else 0)


def test_truncated_tail_strict_mode_names_last_line(tmp_path, clock):
    make_ledger(tmp_path, clock, n=2)
    path = tmp_path / "default.ledger.jsonl"
    data = path.read_bytes()
    path.write_bytes(data[:-20])
    n_lines = data.count(b"\n")
    cfg = LedgerConfig(difficulty=1, max_blocks_per_cb=3)
    with pytest.raises(CorruptRecord) as exc:
        load_ledger(tmp_path, cfg, recover_tail=False)
    assert exc.value.line_no == n_lines


def test_tail_recovery_truncates_file_then_appends_cleanly(tmp_path, clock):
    make_ledger(tmp_path, clock, n=2)
    path = tmp_path / "default.ledger.jsonl"
    data = path.read_bytes()
    path.write_bytes(data[:-20])
    cfg = LedgerConfig(difficulty=1, max_blocks_per_cb=3, ledger_dir=tmp_path)
    ledger = Ledger(cfg, clock)
    assert ledger.dropped_tails == ["default"]
    ledger.submit_digest(digest_of(50))
    assert Ledger(cfg, clock).load_valid
    assert all(line.endswith(b"\n") for line in path.read_bytes().splitlines(keepends=True))


def test_corrupt_middle_line(tmp_path, clock):
    make_ledger(tmp_path, clock, n=4)
    path = tmp_path / "default.ledger.jsonl"
    lines = read_lines(path)
    lines[2] = lines[2][:30]
    write_lines(path, lines)
    with pytest.raises(CorruptRecord) as exc:
        load_ledger(tmp_path, LedgerConfig(difficulty=1))
    assert exc.value.line_no == 3


def test_edited_digest_in_middle_is_invalid(tmp_path, clock):
    make_ledger(tmp_path, clock, n=6)
    path = tmp_path / "default.ledger.jsonl"
    lines = read_lines(path)
    rec = json.loads(lines[2])
    rec["block"]["data"]["fields"]["digest"] = digest_of(999)
    lines[2] = json.dumps(rec, sort_keys=True, separators=(",", ":"))
    write_lines(path, lines)
    cfg = LedgerConfig(difficulty=1, max_blocks_per_cb=3, ledger_dir=tmp_path)
    with pytest.raises(InvalidLedger):
        Ledger(cfg, clock)
    forensic = Ledger(cfg, clock, forensic=True)
    assert not forensic.load_valid
    assert forensic.load_reports["default"].failures[0].reason == "hash_mismatch"


def test_random_mutations_are_rejected(tmp_path, clock):
    make_ledger(tmp_path, clock, n=8)
    path = tmp_path / "default.ledger.jsonl"
    original = read_lines(path)
    rng = random.Random(7)
    cfg = LedgerConfig(difficulty=1, max_blocks_per_cb=3)
    for _ in range(60):
        lines = list(original)
        i = rng.randrange(len(lines))
        lines[i], _ = mutate_line(lines[i], rng)
        write_lines(path, lines)
        assert not load_ledger(tmp_path, cfg, forensic=True, repair=False).valid


def test_crash_between_terminal_and_super_completes_promotion(tmp_path, clock):
    make_ledger(tmp_path, clock, n=3)  # exactly one closure: ... TB, SB, RGB
    path = tmp_path / "default.ledger.jsonl"
    lines = read_lines(path)
    assert json.loads(lines[-2])["level"] == "super"
    write_lines(path, lines[:-2])  # lost the super and RGB lines
    cfg = LedgerConfig(difficulty=1, max_blocks_per_cb=3, ledger_dir=tmp_path)
    ro = load_ledger(tmp_path, cfg, repair=False)
    assert ro.valid and ro.namespaces["default"].pending_promotion is not None
    ledger = Ledger(cfg, clock)
    sbc = ledger.chain()
    assert len(sbc.superblocks) == 1 and sbc.open_cb is not None
    assert sbc.open_cb.genesis.current_hash == sbc.superblocks[0].data.current_hash
    assert Ledger(cfg, clock).load_valid
    kinds = [json.loads(line)["block"]["kind"] for line in read_lines(path)]
    assert kinds[-3:] == ["terminal", "super", "relative_genesis"]


def test_crash_before_rgb_reopens(tmp_path, clock):
    make_ledger(tmp_path, clock, n=3)
    path = tmp_path / "default.ledger.jsonl"
    write_lines(path, read_lines(path)[:-1])
    cfg = LedgerConfig(difficulty=1, max_blocks_per_cb=3, ledger_dir=tmp_path)
    ledger = Ledger(cfg, clock)
    assert ledger.chain().open_cb.genesis.kind == core.RELATIVE_GENESIS
    ledger.submit_digest(digest_of(9))
    assert Ledger(cfg, clock).load_valid


def test_failed_append_leaves_memory_unchanged(tmp_path, clock, monkeypatch):
    ledger = make_ledger(tmp_path, clock, n=2)
    path = tmp_path / "default.ledger.jsonl"
    before_file = path.read_bytes()
    before_blocks = ledger.chain().data_block_count()

    def broken(self, namespace, level, block):
        raise OSError("No space left on device")

    monkeypatch.setattr(LedgerStore, "append", broken)
    with pytest.raises(OSError):
        ledger.submit_digest(digest_of(77))
    assert ledger.chain().data_block_count() == before_blocks
    assert ledger.verify_digest(digest_of(77)) == []
    assert path.read_bytes() == before_file


def test_unwritable_ledger_path(tmp_path, clock):
    cfg = LedgerConfig(difficulty=1, ledger_dir=tmp_path)
    ledger = Ledger(cfg, clock)
    (tmp_path / "default.ledger.jsonl").mkdir()  # appends to a directory fail
    with pytest.raises(OSError):
        ledger.submit_digest(digest_of(1))
    assert ledger.chain().chains == []


def test_namespaces_get_separate_files(tmp_path, clock):
    cfg = LedgerConfig(difficulty=1, ledger_dir=tmp_path)
    ledger = Ledger(cfg, clock)
    ledger.submit_digest(digest_of(1), namespace="alpha")
    ledger.submit_digest(digest_of(2), namespace="beta")
    assert sorted(p.name for p in tmp_path.glob("*.jsonl")) == ["alpha.ledger.jsonl", "beta.ledger.jsonl"]
    with pytest.raises(ValueError):
        ledger.submit_digest(digest_of(3), namespace="../evil")


def test_mismatched_namespace_record(tmp_path, clock):
    cfg = LedgerConfig(difficulty=1, ledger_dir=tmp_path)
    Ledger(cfg, clock).submit_digest(digest_of(1), namespace="alpha")
    (tmp_path / "alpha.ledger.jsonl").rename(tmp_path / "beta.ledger.jsonl")
    with pytest.raises(CorruptRecord):
        load_ledger(tmp_path, cfg)


# -- blob store -------------------------------------------------------------------

def test_blob_store_content_addressing(tmp_path):
    blobs = BlobStore(tmp_path / "blobs")
    d = blobs.put(b"hello\n")
    assert d == compute_hash(b"hello\n")
    assert blobs.put(b"hello\n") == d
    assert list(blobs) == [d]
    assert compute_hash((tmp_path / "blobs" / d).read_bytes()) == d
    assert blobs.check() == []
    (tmp_path / "blobs" / d).write_bytes(b"tampered")
    assert blobs.check() == [d]


def test_store_raw_config_matrix(tmp_path, clock):
    blobs = BlobStore(tmp_path / "b")
    with pytest.raises(core.LedgerError):
        store_raw(blobs, LedgerConfig(store_raw=False), b"x")
    assert store_raw(blobs, LedgerConfig(store_raw=True), b"x") == compute_hash(b"x")

    off = Ledger(LedgerConfig(difficulty=1, ledger_dir=tmp_path / "off"), clock)
    r = off.submit_raw(b"log\n")
    assert r.digest == compute_hash(b"log\n")
    assert not (tmp_path / "off" / "blobs").exists()

    on = Ledger(LedgerConfig(difficulty=1, ledger_dir=tmp_path / "on", store_raw=True), clock)
    r = on.submit_raw(b"log\n")
    assert (tmp_path / "on" / "blobs" / r.digest).read_bytes() == b"log\n"
    assert len(on.verify_raw(b"log\n")) == 1


def test_full_verification_after_load_matches_memory(tmp_path, clock):
    ledger = make_ledger(tmp_path, clock, n=9)
    mem = verify_full(ledger.chain(), 1)
    disk = load_ledger(tmp_path, LedgerConfig(difficulty=1), repair=False).reports["default"]
    assert (mem.valid, mem.checked_blocks, mem.hash_computations) == \
        (disk.valid, disk.checked_blocks, disk.hash_computations)


def test_concurrent_writers_and_readers(tmp_path, clock):
    from concurrent.futures import ThreadPoolExecutor

    cfg = LedgerConfig(difficulty=1, max_blocks_per_cb=4, ledger_dir=tmp_path)
    ledger = Ledger(cfg, clock)

    def write(i):
        return ledger.submit_digest(digest_of(i), namespace="ab"[i % 2]).block_index

    def read(i):
        return len(ledger.verify_digest(digest_of(i), namespace="ab"[i % 2]))

    with ThreadPoolExecutor(8) as pool:
        writes = [pool.submit(write, i) for i in range(60)]
        reads = [pool.submit(read, i) for i in range(60)]
        assert all(f.result() >= 1 for f in writes)
        assert all(f.result() in (0, 1) for f in reads)
    reloaded = Ledger(cfg, clock)
    assert reloaded.load_valid
    assert {ns: s["data_blocks"] for ns, s in reloaded.stats().items()} == {"a": 30, "b": 30}
    for ns in "ab":
        idx = [b.index for cb in reloaded.chain(ns).chains for b in cb.lower_blocks()]
        assert idx == list(range(len(idx)))
