"""``lcaas`` command line tool.

Exit codes: 0 success / verified, 1 verification negative, 2 operational error.
Commands that take ``--url`` talk to a running service; with ``--dir`` they
open the ledger directory directly (embedded mode).
"""

from __future__ import annotations

import contextlib
import json
import logging
import socket
import sys
from pathlib import Path
from typing import Iterator, Optional

import click
import httpx
from filelock import FileLock, Timeout

from .core import Block, LedgerConfig, LedgerError, LogMeta, compute_hash, is_hex_digest
from .ledger import DEFAULT_NAMESPACE, Ledger, fixed_clock, system_clock
from .storage import CorruptRecord, InvalidLedger, load_ledger
from .verify import MalformedQuery, SearchQuery

EXIT_OK, EXIT_NEGATIVE, EXIT_ERROR = 0, 1, 2
LOCK_NAME = ".lcaas.lock"


class TargetError(Exception):
    pass


def chunk_lines(content: bytes, lines_per_chunk: Optional[int]) -> list[bytes]:
    """Split into consecutive N-line chunks, each line keeping its trailing LF."""
    if lines_per_chunk is None:
        return [content]
    if lines_per_chunk < 1:
        raise ValueError("lines per chunk must be >= 1")
    lines = content.split(b"\n")
    tail = lines.pop()
    lines = [line + b"\n" for line in lines]
    if tail:
        lines.append(tail)
    return [b"".join(lines[i:i + lines_per_chunk]) for i in range(0, len(lines), lines_per_chunk)]


class RemoteTarget:
    def __init__(self, url: str, namespace: str, timeout: float = 30.0):
        self.client = httpx.Client(base_url=url.rstrip("/"), timeout=timeout)
        self.namespace = namespace

    def close(self) -> None:
        self.client.close()

    def _call(self, path: str, **kwargs) -> dict:
        try:
            resp = self.client.post(path, **kwargs)
            body = resp.json()
        except (httpx.HTTPError, ValueError) as exc:
            raise TargetError(f"{path}: {exc}") from None
        if body.get("status") != "success":
            err = body.get("error", {})
            raise TargetError(f"{path}: {err.get('code')}: {err.get('message')}")
        return body

    def _json(self, path: str, payload: dict) -> dict:
        return self._call(path, json={**payload, "namespace": self.namespace})

    def submit_raw(self, content: bytes, meta: Optional[LogMeta]) -> dict:
        params = {"namespace": self.namespace, **(meta.to_json() if meta else {})}
        return self._call("/submit_raw", content=content, params=params)

    def submit_digest(self, digest: str, meta: Optional[LogMeta]) -> dict:
        return self._json("/submit_digest", {"digest": digest, **(meta.to_json() if meta else {})})

    def verify_digest(self, digest: str) -> dict:
        return self._json("/verify_digest", {"digest": digest})

    def search(self, query: dict) -> dict:
        return self._json("/search", query)

    def verify_tb(self, tb: dict) -> dict:
        return self._json("/verify_tb", tb)

    def flush(self) -> dict:
        return self._json("/flush", {})


class LocalTarget:
    """Same surface as RemoteTarget, backed by a Ledger opened on a directory."""

    def __init__(self, ledger: Ledger, namespace: str):
        self.ledger = ledger
        self.namespace = namespace

    def close(self) -> None:
        pass

    def _guard(self, fn, *args):
        try:
            return fn(*args)
        except (LedgerError, ValueError, OSError) as exc:
            raise TargetError(str(exc)) from None

    def submit_raw(self, content: bytes, meta: Optional[LogMeta]) -> dict:
        r = self._guard(self.ledger.submit_raw, content, meta, self.namespace)
        return {"status": "success", "block_index": r.block_index, "timestamp": r.timestamp, "digest": r.digest}

    def submit_digest(self, digest: str, meta: Optional[LogMeta]) -> dict:
        r = self._guard(self.ledger.submit_digest, digest, meta, self.namespace)
        return {"status": "success", "block_index": r.block_index, "timestamp": r.timestamp, "digest": r.digest}

    def verify_digest(self, digest: str) -> dict:
        locs = self._guard(self.ledger.verify_digest, digest, self.namespace)
        return {"status": "success", "count": len(locs), "locations": [loc.to_json() for loc in locs]}

    def search(self, query: dict) -> dict:
        try:
            q = SearchQuery.from_json(query)
        except MalformedQuery as exc:
            raise TargetError(str(exc)) from None
        hits = self.ledger.search(q, self.namespace)
        return {"status": "success", "count": len(hits), "results": [h.to_json() for h in hits]}

    def verify_tb(self, tb: dict) -> dict:
        block = self._guard(Block.from_json, tb)
        report = self._guard(self.ledger.verify_tb, block, self.namespace)
        return {"status": "success", "count": int(report.found), **report.to_json()}

    def flush(self) -> dict:
        return {"status": "success", "sealed": self._guard(self.ledger.flush, self.namespace)}


def _config(ledger_dir: Optional[str], difficulty: int, max_blocks: int, window: int,
            store_raw: bool) -> LedgerConfig:
    try:
        return LedgerConfig(difficulty=difficulty, max_blocks_per_cb=max_blocks,
                            max_open_window_seconds=window,
                            ledger_dir=Path(ledger_dir) if ledger_dir else None, store_raw=store_raw)
    except ValueError as exc:
        raise click.BadParameter(str(exc)) from None


def _clock(fixed: Optional[int]):
    return fixed_clock(fixed) if fixed is not None else system_clock


def _fail(message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(EXIT_ERROR)


def _emit(as_json: bool, obj, text: str) -> None:
    click.echo(json.dumps(obj, sort_keys=True) if as_json else text)


def config_options(fn):
    opts = [
        click.option("--difficulty", envvar="LCAAS_DIFFICULTY", type=int, default=2, show_default=True,
                     help="Leading zero hex digits required in mined hashes."),
        click.option("--max-blocks", envvar="LCAAS_MAX_BLOCKS", type=int, default=10, show_default=True,
                     help="Data blocks per circled blockchain before it is sealed."),
        click.option("--window-seconds", envvar="LCAAS_WINDOW_SECONDS", type=int, default=3600,
                     show_default=True, help="Longest time a circled blockchain stays open."),
        click.option("--store-raw/--no-store-raw", envvar="LCAAS_STORE_RAW", default=False,
                     help="Keep raw log content in the blob store."),
        click.option("--fixed-clock", envvar="LCAAS_FIXED_CLOCK", type=int, default=None,
                     help="Use this epoch second as the time for every block (testing)."),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def target_options(fn):
    opts = [
        click.option("--url", envvar="LCAAS_URL", default=None, help="Base URL of a running service."),
        click.option("--dir", "ledger_dir", envvar="LCAAS_DIR", default=None,
                     type=click.Path(file_okay=False), help="Ledger directory (embedded mode)."),
        click.option("--namespace", "-n", default=DEFAULT_NAMESPACE, show_default=True),
        click.option("--json", "as_json", is_flag=True, help="Machine-readable output."),
    ]
    fn = config_options(fn)
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


@contextlib.contextmanager
def open_target(url, ledger_dir, namespace, difficulty, max_blocks, window_seconds, store_raw,
                fixed_clock, write: bool) -> Iterator:
    if bool(url) == bool(ledger_dir):
        _fail("give exactly one of --url or --dir")
    if url:
        target = RemoteTarget(url, namespace)
        try:
            yield target
        finally:
            target.close()
        return
    cfg = _config(ledger_dir, difficulty, max_blocks, window_seconds, store_raw)
    lock = contextlib.nullcontext()
    if write:
        cfg.ledger_dir.mkdir(parents=True, exist_ok=True)
        lock = FileLock(str(cfg.ledger_dir / LOCK_NAME), timeout=0)
    try:
        with lock:
            ledger = Ledger(cfg, _clock(fixed_clock), repair=write)
            yield LocalTarget(ledger, namespace)
    except Timeout:
        _fail(f"ledger directory {ledger_dir} is locked by another writer")
    except (InvalidLedger, CorruptRecord, OSError) as exc:
        _fail(str(exc))


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose: bool) -> None:
    """Logchain-as-a-Service: hierarchical proof-of-work ledger for logs."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--addr", envvar="LCAAS_ADDR", default="127.0.0.1:8080", show_default=True)
@click.option("--dir", "ledger_dir", envvar="LCAAS_DIR", required=True, type=click.Path(file_okay=False))
@click.option("--forensic", is_flag=True, help="Serve even if the ledger fails verification.")
@config_options
def serve(addr, ledger_dir, forensic, difficulty, max_blocks, window_seconds, store_raw, fixed_clock):
    """Run the HTTP service."""
    import uvicorn

    from .service import create_app

    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        _fail(f"--addr must be host:port, got {addr!r}")
    cfg = _config(ledger_dir, difficulty, max_blocks, window_seconds, store_raw)
    cfg.ledger_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(cfg.ledger_dir / LOCK_NAME), timeout=0)
    try:
        lock.acquire()
    except Timeout:
        _fail(f"ledger directory {ledger_dir} is locked by another writer")
    try:
        try:
            ledger = Ledger(cfg, _clock(fixed_clock), forensic=forensic)
        except (InvalidLedger, CorruptRecord) as exc:
            _fail(f"refusing to serve: {exc}")
        if not ledger.load_valid:
            click.echo("warning: ledger failed verification; serving in forensic mode", err=True)
        sock = socket.socket(socket.AF_INET6 if ":" in host else socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind((host, int(port)))
        except OSError as exc:
            sock.close()
            _fail(f"cannot bind {addr}: {exc}")
        server = uvicorn.Server(uvicorn.Config(create_app(ledger), log_level="info"))
        server.run(sockets=[sock])
    finally:
        lock.release()


def _meta(file_name, ts_from, ts_to) -> Optional[LogMeta]:
    if ts_from is not None and ts_to is not None and ts_from > ts_to:
        raise click.BadParameter("--ts-from must not exceed --ts-to")
    meta = LogMeta(file_name, ts_from, ts_to)
    return None if meta.is_empty() else meta


@main.command()
@click.argument("path", type=click.Path(dir_okay=False))
@click.option("--lines", "lines_per_chunk", type=click.IntRange(min=1), default=None,
              help="Submit consecutive chunks of N lines instead of the whole file.")
@click.option("--file-name", default=None)
@click.option("--ts-from", type=int, default=None)
@click.option("--ts-to", type=int, default=None)
@click.option("--digest-only", is_flag=True, help="Send only SHA-256 digests, never content.")
@target_options
def submit(path, lines_per_chunk, file_name, ts_from, ts_to, digest_only, url, ledger_dir, namespace,
           as_json, **cfg):
    """Submit a log file, whole or in line chunks."""
    meta = _meta(file_name, ts_from, ts_to)
    try:
        content = Path(path).read_bytes()
    except OSError as exc:
        _fail(f"cannot read {path}: {exc}")
    chunks = chunk_lines(content, lines_per_chunk)
    with open_target(url, ledger_dir, namespace, write=True, **cfg) as target:
        for n, chunk in enumerate(chunks, 1):
            try:
                if digest_only:
                    r = target.submit_digest(compute_hash(chunk), meta)
                else:
                    r = target.submit_raw(chunk, meta)
            except TargetError as exc:
                _fail(f"chunk {n} of {len(chunks)} failed: {exc}")
            _emit(as_json, {"chunk": n, "block_index": r["block_index"], "timestamp": r["timestamp"],
                            "digest": r.get("digest")},
                  f"chunk {n}: block_index={r['block_index']} timestamp={r['timestamp']}")


@main.command()
@click.argument("subject")
@click.option("--digest", "is_digest", is_flag=True, help="Treat SUBJECT as a hex digest.")
@target_options
def verify(subject, is_digest, url, ledger_dir, namespace, as_json, **cfg):
    """Count ledger blocks holding a file's (or a digest's) SHA-256. Exit 0 iff found."""
    if is_digest or (is_hex_digest(subject) and not Path(subject).exists()):
        if not is_hex_digest(subject):
            _fail("digest must be 64 lowercase hex characters")
        digest = subject
    else:
        try:
            digest = compute_hash(Path(subject).read_bytes())
        except OSError as exc:
            _fail(f"cannot read {subject}: {exc}")
    with open_target(url, ledger_dir, namespace, write=False, **cfg) as target:
        try:
            r = target.verify_digest(digest)
        except TargetError as exc:
            _fail(str(exc))
    _emit(as_json, {"digest": digest, "count": r["count"], "locations": r.get("locations", [])},
          f"{digest} count={r['count']}")
    sys.exit(EXIT_OK if r["count"] >= 1 else EXIT_NEGATIVE)


@main.command()
@click.argument("tb_file", type=click.File("r"))
@target_options
def verify_tb(tb_file, url, ledger_dir, namespace, as_json, **cfg):
    """Check a terminal block (JSON file, '-' for stdin). Exit 0 iff all checks pass."""
    try:
        tb = json.load(tb_file)
    except ValueError as exc:
        _fail(f"terminal block is not JSON: {exc}")
    with open_target(url, ledger_dir, namespace, write=False, **cfg) as target:
        try:
            r = target.verify_tb(tb)
        except TargetError as exc:
            _fail(str(exc))
    report = {k: r[k] for k in ("found", "hash_valid", "aggr_valid", "superblock_index")}
    _emit(as_json, report, " ".join(f"{k}={v}" for k, v in report.items()))
    sys.exit(EXIT_OK if r["found"] and r["hash_valid"] and r["aggr_valid"] else EXIT_NEGATIVE)


@main.command()
@target_options
def flush(url, ledger_dir, namespace, as_json, **cfg):
    """Seal the open circled blockchain now (no-op when it is empty)."""
    with open_target(url, ledger_dir, namespace, write=True, **cfg) as target:
        try:
            r = target.flush()
        except TargetError as exc:
            _fail(str(exc))
    msg = "sealed open circled blockchain" if r["sealed"] else "nothing to seal: open circled blockchain is empty"
    _emit(as_json, {"sealed": r["sealed"]}, msg)


@main.command()
@click.argument("ledger_dir", type=click.Path())
@click.option("--difficulty", envvar="LCAAS_DIFFICULTY", type=int, default=2, show_default=True)
@click.option("--json", "as_json", is_flag=True)
def validate(ledger_dir, difficulty, as_json):
    """Verify every block of a ledger directory offline. Exit 0 iff valid."""
    path = Path(ledger_dir)
    if not path.is_dir():
        _fail(f"{ledger_dir}: no such ledger directory")
    cfg = _config(ledger_dir, difficulty, 10, 3600, False)
    try:
        loaded = load_ledger(path, cfg, forensic=True, repair=False)
    except (CorruptRecord, OSError) as exc:
        _fail(str(exc))
    if as_json:
        click.echo(json.dumps({"valid": loaded.valid,
                               "namespaces": {ns: r.to_json() for ns, r in loaded.reports.items()}},
                              sort_keys=True))
    else:
        for ns, r in loaded.reports.items():
            click.echo(f"{ns}: {'valid' if r.valid else 'INVALID'} checked_blocks={r.checked_blocks} "
                       f"hash_computations={r.hash_computations}")
            for f in r.failures:
                click.echo(f"  {f.level} block_index={f.block_index} reason={f.reason}")
        if not loaded.reports:
            click.echo("empty ledger: valid")
    sys.exit(EXIT_OK if loaded.valid else EXIT_NEGATIVE)


@main.command()
@click.option("--index", "block_index", type=int, default=None)
@click.option("--block-time", nargs=2, type=int, default=None, metavar="FROM TO")
@click.option("--record-time", nargs=2, type=int, default=None, metavar="FROM TO")
@target_options
def inspect(block_index, block_time, record_time, url, ledger_dir, namespace, as_json, **cfg):
    """Print data blocks (and their terminal blocks) matching one search criterion."""
    query = {}
    if block_index is not None:
        query["block_index"] = block_index
    if block_time:
        query["block_time"] = {"from": block_time[0], "to": block_time[1]}
    if record_time:
        query["record_time"] = {"from": record_time[0], "to": record_time[1]}
    with open_target(url, ledger_dir, namespace, write=False, **cfg) as target:
        try:
            r = target.search(query)
        except TargetError as exc:
            _fail(str(exc))
    if as_json:
        click.echo(json.dumps(r["results"], sort_keys=True))
        return
    for hit in r["results"]:
        b, tb = hit["block"], hit["terminal"]
        data = b["data"]["fields"]
        line = f"block {b['index']} ts={b['timestamp']} digest={data['digest']} hash={b['current_hash']}"
        if "meta" in data:
            line += " meta=" + json.dumps(data["meta"], sort_keys=True)
        click.echo(line)
        if tb is not None:
            p = tb["data"]["fields"]
            click.echo(f"  terminal {tb['index']} aggr_hash={p['aggr_hash']} "
                       f"blocks={p['block_index_from']}..{p['block_index_to']} hash={tb['current_hash']}")
        else:
            click.echo("  (circled blockchain still open)")
    click.echo(f"{r['count']} block(s)")


if __name__ == "__main__":
    main()
