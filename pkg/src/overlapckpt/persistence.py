"""Crash-consistent checkpoint store.

Layout of ``<root>/ckpt-<step>/``::

    data.bin   header | working | crc | master | crc | m | crc | v | crc
    meta       key = value text; its presence marks the checkpoint complete

Header (little-endian): magic ``GOCK``, u32 format version, u64 param count,
u64 step, five f64 hyperparameters (lr, beta1, beta2, eps, weight_decay),
u32 part count. Each section is followed by the CRC32 of its bytes.

The data file is written by several threads into disjoint regions, flushed,
and only then is the metadata written under a temporary name, flushed, and
renamed into place. A reader that sees ``meta`` therefore sees a fully
written data file.
"""

from __future__ import annotations

import datetime
import logging
import os
import re
import shutil
import struct
import threading
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Callable

import numpy as np

from overlapckpt.clock import Clock, VirtualClock, WallClock, as_fraction
from overlapckpt.engine import Hyperparams
from overlapckpt.errors import CheckpointNotFound, CheckpointWriteError, CorruptCheckpoint
from overlapckpt.reconstruct import HostCheckpoint, Provenance

logger = logging.getLogger(__name__)

MAGIC = b"GOCK"
FORMAT_VERSION = 1
SCHEMA_VERSION = 1
HEADER = struct.Struct("<4sIQQ5dI")
CRC = struct.Struct("<I")
DATA_NAME = "data.bin"
META_NAME = "meta"
META_TMP = "meta.tmp"
RETAIN = 2

_SECTIONS = (("working", np.float16), ("master", np.float32), ("m", np.float32), ("v", np.float32))
_DIR_RE = re.compile(r"^ckpt-(\d+)$")

FaultHook = Callable[[str], None]


def _no_fault(label: str) -> None:
    pass


def ckpt_dir(root: str | os.PathLike, step: int) -> Path:
    return Path(root) / f"ckpt-{step}"


def data_size(param_count: int) -> int:
    return HEADER.size + sum(param_count * np.dtype(dt).itemsize for _, dt in _SECTIONS) + len(_SECTIONS) * CRC.size


def _pieces(ckpt: HostCheckpoint) -> list[bytes | memoryview]:
    hp = ckpt.hp
    out: list[bytes | memoryview] = [
        HEADER.pack(MAGIC, FORMAT_VERSION, ckpt.param_count, ckpt.step, *hp.as_tuple(), ckpt.part_count)
    ]
    for name, dt in _SECTIONS:
        arr = np.ascontiguousarray(ckpt.sections()[name], dtype=dt)
        raw = memoryview(arr).cast("B")
        out.append(raw)
        out.append(CRC.pack(zlib.crc32(raw)))
    return out


def _write_regions(fd: int, pieces, writers: int, fault: FaultHook) -> int:
    """pwrite ``pieces`` (laid end to end) using ``writers`` threads over disjoint byte regions."""
    spans = []
    pos = 0
    for p in pieces:
        spans.append((pos, p))
        pos += len(p)
    total = pos
    writers = max(1, min(writers, total))
    bounds = [total * i // writers for i in range(writers + 1)]

    def write_region(i: int) -> None:
        lo, hi = bounds[i], bounds[i + 1]
        fault(f"write:data[{i}]")
        for start, p in spans:
            end = start + len(p)
            a, b = max(lo, start), min(hi, end)
            if a < b:
                chunk = p[a - start:b - start]
                written = 0
                while written < len(chunk):
                    written += os.pwrite(fd, chunk[written:], a + written)

    if writers == 1:
        write_region(0)
    else:
        with ThreadPoolExecutor(max_workers=writers, thread_name_prefix="persist") as pool:
            list(pool.map(write_region, range(writers)))
    return total


def _fsync_dir(path: Path) -> None:
    try:
        fd = os.open(path, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    except OSError:
        pass
    finally:
        os.close(fd)


@dataclass
class WrittenData:
    path: Path
    step: int
    param_count: int
    part_count: int
    nbytes: int
    crc32: int
    provenance: str


def write_data(ckpt: HostCheckpoint, root: str | os.PathLike, writers: int = 4, fault: FaultHook = _no_fault) -> WrittenData:
    """First half of :func:`persist`: the data file, flushed, without metadata."""
    d = ckpt_dir(root, ckpt.step)
    fault("mkdir")
    d.mkdir(parents=True, exist_ok=True)
    stale = d / META_NAME
    if stale.exists():
        # overwriting a complete checkpoint: retract it first so it is never torn
        stale.unlink()
        _fsync_dir(d)
    pieces = _pieces(ckpt)
    crc = 0
    for p in pieces:
        crc = zlib.crc32(p, crc)
    path = d / DATA_NAME
    fd = os.open(path, os.O_RDWR | os.O_CREAT | os.O_TRUNC, 0o644)
    try:
        total = data_size(ckpt.param_count)
        os.ftruncate(fd, total)
        _write_regions(fd, pieces, writers, fault)
        fault("flush:data")
        os.fsync(fd)
    finally:
        os.close(fd)
    return WrittenData(d, ckpt.step, ckpt.param_count, ckpt.part_count, total, crc, ckpt.provenance.value)


def commit(written: WrittenData, meta: dict | None = None, fault: FaultHook = _no_fault) -> None:
    """Second half of :func:`persist`: write the metadata and atomically publish it."""
    doc = {
        "schema_version": SCHEMA_VERSION,
        "step": written.step,
        "param_count": written.param_count,
        "part_count": written.part_count,
        "data_bytes": written.nbytes,
        "data_crc32": written.crc32,
        "provenance": written.provenance,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "throughput_steps_per_s": 0.0,
        "training_seconds": 0.0,
    }
    doc.update(meta or {})
    text = "".join(f"{k} = {v}\n" for k, v in doc.items())
    tmp = written.path / META_TMP
    fault("write:meta")
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
        fault("flush:meta")
        f.flush()
        os.fsync(f.fileno())
    fault("rename:meta")
    os.replace(tmp, written.path / META_NAME)
    fault("fsync:dir")
    _fsync_dir(written.path)


def persist(
    ckpt: HostCheckpoint,
    root: str | os.PathLike,
    writers: int = 4,
    meta: dict | None = None,
    fault: FaultHook = _no_fault,
    retain: int = RETAIN,
) -> Path:
    """Write ``ckpt`` under ``root`` and publish it atomically.

    On an I/O error the partial checkpoint directory is removed and
    :class:`CheckpointWriteError` is raised; earlier checkpoints are left
    alone. Any other exception escaping ``fault`` is treated as a process
    kill and leaves the partial files behind, as a real crash would.
    """
    try:
        written = write_data(ckpt, root, writers, fault)
        commit(written, meta, fault)
    except OSError as exc:
        shutil.rmtree(ckpt_dir(root, ckpt.step), ignore_errors=True)
        raise CheckpointWriteError(f"persisting step {ckpt.step} failed: {exc}") from exc
    if retain:
        prune(root, retain)
    return written.path


def read_metadata(d: Path) -> dict[str, str]:
    meta = {}
    with open(d / META_NAME, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise CorruptCheckpoint(f"malformed metadata line {line!r} in {d}")
            meta[key.strip()] = value.strip()
    return meta


def _steps_on_disk(root: Path) -> list[int]:
    if not root.is_dir():
        return []
    steps = []
    for p in root.iterdir():
        m = _DIR_RE.match(p.name)
        if m and p.is_dir():
            steps.append(int(m.group(1)))
    return sorted(steps)


def _decode(d: Path, step: int) -> HostCheckpoint:
    """Parse and fully validate one checkpoint directory."""
    if not (d / META_NAME).is_file():
        raise CheckpointNotFound(f"no complete checkpoint at step {step} in {d.parent}")
    try:
        meta = read_metadata(d)
        raw = (d / DATA_NAME).read_bytes()
    except FileNotFoundError as exc:
        raise CorruptCheckpoint(f"{d}: {exc}") from exc
    if len(raw) < HEADER.size:
        raise CorruptCheckpoint(f"{d}: data file truncated to {len(raw)} bytes")
    magic, fmt, P, hstep, lr, b1, b2, eps, wd, parts = HEADER.unpack_from(raw, 0)
    if magic != MAGIC or fmt != FORMAT_VERSION:
        raise CorruptCheckpoint(f"{d}: bad magic or format version")
    if hstep != step:
        raise CorruptCheckpoint(f"{d}: header step {hstep} does not match directory step {step}")
    if len(raw) != data_size(P):
        raise CorruptCheckpoint(f"{d}: data file has {len(raw)} bytes, expected {data_size(P)}")
    try:
        if int(meta["step"]) != step or int(meta["data_bytes"]) != len(raw):
            raise CorruptCheckpoint(f"{d}: metadata disagrees with data file")
        if int(meta["data_crc32"]) != zlib.crc32(raw):
            raise CorruptCheckpoint(f"{d}: data file checksum mismatch")
    except (KeyError, ValueError) as exc:
        raise CorruptCheckpoint(f"{d}: unreadable metadata ({exc})") from exc
    arrays = {}
    pos = HEADER.size
    for name, dt in _SECTIONS:
        n = P * np.dtype(dt).itemsize
        section = raw[pos:pos + n]
        (crc,) = CRC.unpack_from(raw, pos + n)
        if zlib.crc32(section) != crc:
            raise CorruptCheckpoint(f"{d}: CRC mismatch in section {name}")
        arrays[name] = np.frombuffer(section, dtype=dt).copy()
        pos += n + CRC.size
    return HostCheckpoint(
        step=step,
        working=arrays["working"],
        master=arrays["master"],
        m=arrays["m"],
        v=arrays["v"],
        hp=Hyperparams(lr, b1, b2, eps, wd),
        provenance=Provenance(meta.get("provenance", "reconstructed")),
        part_count=parts,
    )


def load(root: str | os.PathLike, step: int) -> HostCheckpoint:
    d = ckpt_dir(root, step)
    if not d.is_dir():
        raise CheckpointNotFound(f"no checkpoint directory for step {step} in {root}")
    return _decode(d, step)


def latest_complete(root: str | os.PathLike) -> int | None:
    """Greatest step whose metadata exists and whose data validates."""
    root = Path(root)
    for step in reversed(_steps_on_disk(root)):
        try:
            _decode(ckpt_dir(root, step), step)
        except (CheckpointNotFound, CorruptCheckpoint, OSError, struct.error) as exc:
            logger.debug("skipping step %d: %s", step, exc)
            continue
        return step
    return None


def prune(root: str | os.PathLike, retain: int = RETAIN) -> list[int]:
    """Keep the ``retain`` newest complete checkpoints; drop older ones and stale partials."""
    root = Path(root)
    steps = _steps_on_disk(root)
    complete = [s for s in steps if (ckpt_dir(root, s) / META_NAME).is_file()]
    keep = set(complete[-retain:])
    newest = complete[-1] if complete else None
    removed = []
    for s in steps:
        if s in keep:
            continue
        is_complete = s in complete
        if is_complete or (newest is not None and s < newest):
            shutil.rmtree(ckpt_dir(root, s), ignore_errors=True)
            removed.append(s)
    return removed


class PersistKilled(BaseException):
    """Raised inside a persist to emulate the process dying at that point."""


class BackgroundPersister:
    """Runs reconstruction plus persistence off the training flow, one at a time."""

    def __init__(self, root: str | os.PathLike, writers: int = 4, clock: Clock | None = None, retain: int = RETAIN) -> None:
        self.root = Path(root)
        self.writers = writers
        self.clock = clock or WallClock()
        self.retain = retain
        self.committed: list[int] = []
        self.errors: list[BaseException] = []
        self._thread: threading.Thread | None = None
        self._kill = threading.Event()

    def _fault(self, label: str) -> None:
        if self._kill.is_set():
            raise PersistKilled(label)

    def submit(self, make_ckpt: Callable[[], HostCheckpoint], meta: Callable[[], dict] | dict | None = None) -> None:
        if self._thread is not None and self._thread.is_alive():
            raise RuntimeError("a persist is already in flight; call gate_next() first")

        def run() -> None:
            try:
                ckpt = make_ckpt()
                persist(ckpt, self.root, self.writers, meta() if callable(meta) else meta, self._fault, self.retain)
                self.committed.append(ckpt.step)
            except PersistKilled:
                pass
            except Exception as exc:  # noqa: BLE001 - surfaced through .errors
                logger.error("background checkpoint failed: %s", exc)
                self.errors.append(exc)

        self._kill.clear()
        self._thread = threading.Thread(target=run, name="persist", daemon=True)
        self._thread.start()

    def busy(self) -> bool:
        return self._thread is not None and self._thread.is_alive()

    def gate_next(self) -> float:
        """Block until the previous persist has committed; returns the wait."""
        if self._thread is None:
            return 0.0
        start = self.clock.now()
        self._thread.join()
        self._thread = None
        return self.clock.now() - start

    def crash(self) -> None:
        """Emulate losing the process: an unfinished persist never commits."""
        if self._thread is not None:
            self._kill.set()
            self._thread.join()
            self._thread = None


class SimulatedPersister:
    """Persister on a virtual clock.

    The data file is written immediately (real bytes, zero virtual time) but the
    metadata commit is deferred until the virtual clock reaches the time the
    write would have finished at ``bandwidth`` bytes/s. A crash before then
    leaves a data file without metadata, exactly like an interrupted persist.
    """

    def __init__(self, root: str | os.PathLike, clock: VirtualClock, bandwidth: float | Fraction = 0, writers: int = 4, retain: int = RETAIN) -> None:
        self.root = Path(root)
        self.clock = clock
        self.bandwidth = bandwidth
        self.writers = writers
        self.retain = retain
        self.committed: list[int] = []
        self.errors: list[BaseException] = []
        self._pending: list[tuple[Fraction, WrittenData | None, dict | None]] = []
        clock.subscribe(self._on_clock)

    def detach(self) -> None:
        self.clock.unsubscribe(self._on_clock)

    def duration(self, nbytes: int) -> Fraction:
        return Fraction(0) if not self.bandwidth else Fraction(nbytes) / as_fraction(self.bandwidth)

    def _on_clock(self, now: Fraction) -> None:
        while self._pending and self._pending[0][0] <= now:
            _, written, meta = self._pending.pop(0)
            if written is None:  # timing-only checkpoint, nothing on disk
                continue
            try:
                commit(written, meta)
                self.committed.append(written.step)
                if self.retain:
                    prune(self.root, self.retain)
            except OSError as exc:
                shutil.rmtree(written.path, ignore_errors=True)
                self.errors.append(CheckpointWriteError(str(exc)))

    def submit(self, make_ckpt: Callable[[], HostCheckpoint], meta: Callable[[], dict] | dict | None = None) -> Fraction:
        if self._pending:
            raise RuntimeError("a persist is already in flight; call gate_next() first")
        ckpt = make_ckpt()
        try:
            written = write_data(ckpt, self.root, self.writers)
        except OSError as exc:
            shutil.rmtree(ckpt_dir(self.root, ckpt.step), ignore_errors=True)
            self.errors.append(CheckpointWriteError(str(exc)))
            return Fraction(0)
        done_at = self.clock.now() + self.duration(written.nbytes)
        self._pending.append((done_at, written, meta() if callable(meta) else meta))
        self._on_clock(self.clock.now())
        return done_at

    def submit_timing(self, nbytes: int) -> Fraction:
        """Occupy the disk for ``nbytes`` without writing anything."""
        if self._pending:
            raise RuntimeError("a persist is already in flight; call gate_next() first")
        done_at = self.clock.now() + self.duration(nbytes)
        self._pending.append((done_at, None, None))
        self._on_clock(self.clock.now())
        return done_at

    def busy(self) -> bool:
        return bool(self._pending)

    def gate_next(self) -> Fraction:
        start = self.clock.now()
        if self._pending:
            self.clock.advance_to(self._pending[-1][0])
        return self.clock.now() - start

    def crash(self) -> None:
        self._pending.clear()
