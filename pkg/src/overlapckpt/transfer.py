"""Device-to-host transfer link with a priority queue.

Two interchangeable channels move chunk bytes from the live training state
into a pre-allocated :class:`StagingArena`:

* :class:`ThreadedChannel` - worker threads copy bytes; an optional bandwidth
  limit serializes chunks on a single emulated link.
* :class:`SimulatedChannel` - a single-link event model on a
  :class:`~overlapckpt.clock.VirtualClock`. Durations are exact rationals.
  It copies nothing unless ``copy_bytes`` is set, in which case each chunk is
  copied when the clock passes its completion time.

Dispatch order in both is (priority desc, submission order asc), and a chunk
is never preempted once it has started.
"""

from __future__ import annotations

import collections
import enum
import heapq
import itertools
import logging
import threading
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from overlapckpt.clock import Clock, VirtualClock, WallClock, as_fraction
from overlapckpt.errors import CheckpointAborted, ProtocolViolation

logger = logging.getLogger(__name__)

STATE_SECTIONS = ("working", "master", "m", "v")
ELEM_BYTES = {"working": 2, "master": 4, "m": 4, "v": 4, "grad": 2}
SECTION_DTYPES = {"working": np.float16, "master": np.float32, "m": np.float32, "v": np.float32, "grad": np.float16}
BYTES_PER_PARAM = sum(ELEM_BYTES[s] for s in STATE_SECTIONS)  # 14

STATE_PRIORITY = 0
GRADIENT_PRIORITY = 1


class Kind(str, enum.Enum):
    State = "State"
    Gradient = "Gradient"


@dataclass
class TransferTask:
    kind: Kind
    part_index: int
    section: str
    offset: int  # bytes, within the section (or within the gradient slice)
    length: int
    version_tag: int
    priority: int
    block: int = -1  # block id inside the session, State tasks only

    @property
    def end(self) -> int:
        return self.offset + self.length


class StagingArena:
    """Host buffers for one checkpoint session, allocated once up front.

    ``grad_prefixes`` maps a step number to the number of leading parameters
    whose gradient is staged for that step.
    """

    def __init__(self, param_count: int, grad_prefixes: dict[int, int] | None = None, holds_bytes: bool = True) -> None:
        self.param_count = param_count
        self.holds_bytes = holds_bytes
        n = param_count if holds_bytes else 0
        self.sections = {s: np.zeros(n * ELEM_BYTES[s], dtype=np.uint8) for s in STATE_SECTIONS}
        self.grad_prefixes = dict(grad_prefixes or {})
        self.grads = {
            step: np.zeros((hi if holds_bytes else 0) * ELEM_BYTES["grad"], dtype=np.uint8)
            for step, hi in self.grad_prefixes.items()
        }

    def section_size(self, task: TransferTask) -> int:
        if task.kind is Kind.State:
            if task.section not in STATE_SECTIONS:
                raise ValueError(f"unknown state section {task.section!r}")
            return self.param_count * ELEM_BYTES[task.section]
        if task.version_tag not in self.grad_prefixes:
            raise ValueError(f"no gradient slice allocated for step {task.version_tag}")
        return self.grad_prefixes[task.version_tag] * ELEM_BYTES["grad"]

    def check(self, task: TransferTask) -> None:
        size = self.section_size(task)
        if task.offset < 0 or task.length < 0 or task.end > size:
            raise ValueError(
                f"{task.kind.value} task [{task.offset}, {task.end}) of {task.section} lies outside the arena (size {size})"
            )

    def dest(self, task: TransferTask) -> np.ndarray:
        buf = self.sections[task.section] if task.kind is Kind.State else self.grads[task.version_tag]
        return buf[task.offset:task.end]

    def array(self, section: str) -> np.ndarray:
        return self.sections[section].view(SECTION_DTYPES[section])

    def grad_array(self, step: int) -> np.ndarray:
        return self.grads[step].view(np.float16)


@dataclass(frozen=True)
class ChannelConfig:
    mode: str = "real"  # "real" or "simulated"
    bandwidth: float | Fraction = 0  # bytes/s; 0 = unthrottled (instant in simulation)
    workers: int = 1
    copy_bytes: bool = False  # simulated mode only

    def __post_init__(self) -> None:
        if self.mode not in ("real", "simulated"):
            raise ValueError(f"channel mode must be 'real' or 'simulated', got {self.mode!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.bandwidth < 0:
            raise ValueError("bandwidth must be >= 0")


_QUEUED, _RUNNING, _DONE, _CANCELLED, _FAILED = range(5)


@dataclass(eq=False)
class _Record:
    id: int
    task: TransferTask
    source: np.ndarray | None
    dest: np.ndarray | None
    status: int = _QUEUED
    end_time: object = None

    @property
    def settled(self) -> bool:
        return self.status in (_DONE, _CANCELLED, _FAILED)


@dataclass(eq=False)
class CompletionTicket:
    records: list[_Record] = field(default_factory=list)

    @property
    def ids(self) -> set[int]:
        return {r.id for r in self.records}

    def done(self) -> bool:
        return all(r.settled for r in self.records)

    def failed(self) -> bool:
        return any(r.status == _FAILED for r in self.records)

    def tasks(self, status: int | None = None) -> list[TransferTask]:
        return [r.task for r in self.records if status is None or r.status == status]

    def completed_tasks(self) -> list[TransferTask]:
        return self.tasks(_DONE)

    def __add__(self, other: CompletionTicket) -> CompletionTicket:
        return CompletionTicket(self.records + other.records)


class _ChannelBase:
    def __init__(self, config: ChannelConfig, clock: Clock) -> None:
        self.config = config
        self.clock = clock
        self.arena: StagingArena | None = None
        self.completion_log: list[int] = []
        self.bytes_moved = 0
        self._ids = itertools.count()
        self._seq = itertools.count()
        self._heap: list[tuple[int, int, _Record]] = []
        self._open = False
        self._shutdown = False
        self._fault_pending = False

    # session lifecycle

    def open(self, arena: StagingArena) -> None:
        if self._shutdown:
            raise CheckpointAborted("channel has been shut down")
        self.arena = arena
        self._open = True

    def close(self) -> None:
        self._open = False

    @property
    def is_open(self) -> bool:
        return self._open

    def inject_fault(self) -> None:
        """Make the next dispatched chunk fail (test support)."""
        self._fault_pending = True

    def _make_record(self, task: TransferTask, source: np.ndarray | None) -> _Record:
        if not self._open or self.arena is None:
            raise ProtocolViolation("submit outside an open session")
        self.arena.check(task)
        if source is not None:
            src = source[task.offset:task.end]
            if src.nbytes != task.length:
                raise ValueError(f"source holds {src.nbytes} bytes for a {task.length}-byte task")
        else:
            src = None
        dest = self.arena.dest(task) if self.arena.holds_bytes else None
        return _Record(next(self._ids), task, src, dest)

    def submit(self, task: TransferTask, source: np.ndarray | None = None) -> CompletionTicket:
        return self.submit_all([(task, source)])

    def duration(self, nbytes: int) -> Fraction:
        bw = self.config.bandwidth
        return Fraction(0) if not bw else Fraction(nbytes) / as_fraction(bw)


class SimulatedChannel(_ChannelBase):
    """Single-link discrete-event model driven by a virtual clock."""

    def __init__(self, config: ChannelConfig, clock: VirtualClock) -> None:
        if not isinstance(clock, VirtualClock):
            raise TypeError("SimulatedChannel needs a VirtualClock")
        super().__init__(config, clock)
        self._inflight: _Record | None = None
        self.link_busy_time = Fraction(0)
        clock.subscribe(self._on_clock)

    def detach(self) -> None:
        self.clock.unsubscribe(self._on_clock)

    def _on_clock(self, now: Fraction) -> None:
        self._run_until(now)

    def _dispatch(self, at: Fraction) -> None:
        while self._heap:
            _, _, rec = heapq.heappop(self._heap)
            if rec.status != _QUEUED:
                continue
            rec.status = _RUNNING
            dur = self.duration(rec.task.length)
            rec.end_time = at + dur
            self.link_busy_time += dur
            self._inflight = rec
            return
        self._inflight = None

    def _complete(self, rec: _Record) -> None:
        if self._fault_pending:
            self._fault_pending = False
            rec.status = _FAILED
            logger.warning("simulated transfer fault on task %d", rec.id)
            return
        if self.config.copy_bytes and rec.dest is not None and rec.source is not None:
            rec.dest[...] = rec.source
        rec.status = _DONE
        self.completion_log.append(rec.id)
        self.bytes_moved += rec.task.length

    def _run_until(self, now: Fraction) -> None:
        while self._inflight is not None and self._inflight.end_time <= now:
            rec = self._inflight
            self._complete(rec)
            self._dispatch(rec.end_time)

    def submit_all(self, items) -> CompletionTicket:
        ticket = CompletionTicket([self._make_record(t, s) for t, s in items])
        if self._shutdown:
            raise CheckpointAborted("channel has been shut down")
        now = self.clock.now()
        self._run_until(now)
        for rec in ticket.records:
            heapq.heappush(self._heap, (-rec.task.priority, next(self._seq), rec))
        if self._inflight is None:
            self._dispatch(now)
            self._run_until(now)
        return ticket

    def cancel_pending(self, ticket: CompletionTicket) -> list[TransferTask]:
        self._run_until(self.clock.now())
        out = []
        for rec in ticket.records:
            if rec.status == _QUEUED:
                rec.status = _CANCELLED
                out.append(rec.task)
        return out

    def poll(self) -> None:
        self._run_until(self.clock.now())

    def wait(self, ticket: CompletionTicket) -> Fraction:
        """Block the training flow (advance virtual time) until the ticket settles."""
        start = self.clock.now()
        self._run_until(start)
        if self._shutdown and not all(r.status == _DONE for r in ticket.records):
            raise CheckpointAborted("channel shut down while waiting")
        while not ticket.done():
            if self._shutdown:
                raise CheckpointAborted("channel shut down while waiting")
            if self._inflight is None:
                raise ProtocolViolation("ticket cannot complete: nothing in flight")
            self.clock.advance_to(self._inflight.end_time)
        if ticket.failed():
            raise CheckpointAborted("a transfer in this ticket failed")
        return self.clock.now() - start

    def shutdown(self) -> None:
        self._shutdown = True
        for _, _, rec in self._heap:
            if rec.status == _QUEUED:
                rec.status = _CANCELLED
        self._heap.clear()
        self._inflight = None
        self.detach()

    def reset(self) -> None:
        """Drop all queued and in-flight work (used when training crashes)."""
        for _, _, rec in self._heap:
            if rec.status == _QUEUED:
                rec.status = _CANCELLED
        self._heap.clear()
        if self._inflight is not None:
            self._inflight.status = _CANCELLED
        self._inflight = None
        self._open = False


class ThreadedChannel(_ChannelBase):
    """Worker-thread channel copying real bytes, optionally bandwidth-limited."""

    def __init__(self, config: ChannelConfig, clock: Clock | None = None) -> None:
        super().__init__(config, clock or WallClock())
        self._cv = threading.Condition()
        self._link_lock = threading.Lock()
        self._link_free = 0.0
        self._threads: list[threading.Thread] = []
        self._running: set[_Record] = set()
        # records claimed for an idle worker at submit time, so a chunk is on
        # the link as soon as it is submitted, as in the simulated channel
        self._ready: collections.deque[_Record] = collections.deque()
        self._idle = 0

    def _ensure_workers(self) -> None:
        if self._threads:
            return
        for i in range(self.config.workers):
            t = threading.Thread(target=self._worker, name=f"transfer-{i}", daemon=True)
            t.start()
            self._threads.append(t)
        self._idle = self.config.workers

    def _claim(self) -> None:
        # caller holds self._cv
        while self._idle > len(self._ready) and self._heap:
            _, _, rec = heapq.heappop(self._heap)
            if rec.status != _QUEUED:
                continue
            rec.status = _RUNNING
            self._running.add(rec)
            self._ready.append(rec)

    def _reserve_link(self, nbytes: int) -> float:
        now = self.clock.now()
        if not self.config.bandwidth:
            return now
        with self._link_lock:
            start = max(now, self._link_free)
            self._link_free = start + nbytes / float(self.config.bandwidth)
            return self._link_free

    def _worker(self) -> None:
        while True:
            with self._cv:
                while not self._ready and not self._heap and not self._shutdown:
                    self._cv.wait()
                if self._shutdown:
                    return
                if self._ready:
                    rec = self._ready.popleft()
                else:
                    _, _, rec = heapq.heappop(self._heap)
                    if rec.status != _QUEUED:
                        continue
                    rec.status = _RUNNING
                    self._running.add(rec)
                self._idle -= 1
                fail = self._fault_pending
                self._fault_pending = False
            if not fail:
                end = self._reserve_link(rec.task.length)
                rec.dest[...] = rec.source
                self.clock.sleep_until(end)
            with self._cv:
                if fail:
                    rec.status = _FAILED
                    logger.warning("transfer fault on task %d", rec.id)
                elif rec.status == _RUNNING:
                    rec.status = _DONE
                    self.completion_log.append(rec.id)
                    self.bytes_moved += rec.task.length
                self._running.discard(rec)
                self._idle += 1
                self._cv.notify_all()

    def submit_all(self, items) -> CompletionTicket:
        ticket = CompletionTicket([self._make_record(t, s) for t, s in items])
        for rec in ticket.records:
            if rec.source is None or rec.dest is None:
                raise ValueError("the threaded channel needs source bytes for every task")
        with self._cv:
            if self._shutdown:
                raise CheckpointAborted("channel has been shut down")
            self._ensure_workers()
            for rec in ticket.records:
                heapq.heappush(self._heap, (-rec.task.priority, next(self._seq), rec))
            self._claim()
            self._cv.notify_all()
        return ticket

    def cancel_pending(self, ticket: CompletionTicket) -> list[TransferTask]:
        out = []
        with self._cv:
            for rec in ticket.records:
                if rec.status == _QUEUED:
                    rec.status = _CANCELLED
                    out.append(rec.task)
        return out

    def poll(self) -> None:
        pass

    def wait(self, ticket: CompletionTicket) -> float:
        start = self.clock.now()
        with self._cv:
            self._cv.wait_for(lambda: ticket.done() or self._shutdown)
            if self._shutdown and not all(r.status == _DONE for r in ticket.records):
                raise CheckpointAborted("channel shut down while waiting")
        if ticket.failed():
            raise CheckpointAborted("a transfer in this ticket failed")
        return self.clock.now() - start

    def reset(self) -> None:
        with self._cv:
            for _, _, rec in self._heap:
                if rec.status == _QUEUED:
                    rec.status = _CANCELLED
            self._heap.clear()
            self._cv.wait_for(lambda: not self._running)
        self._open = False

    def shutdown(self) -> None:
        with self._cv:
            self._shutdown = True
            for _, _, rec in self._heap:
                if rec.status == _QUEUED:
                    rec.status = _CANCELLED
            self._heap.clear()
            for rec in self._ready:
                rec.status = _CANCELLED
                self._running.discard(rec)
            self._ready.clear()
            self._cv.notify_all()
        for t in self._threads:
            t.join(timeout=5)
        self._threads.clear()


def make_channel(config: ChannelConfig, clock: Clock):
    if config.mode == "simulated":
        return SimulatedChannel(config, clock)
    return ThreadedChannel(config, clock)


def verify_arena(arena: StagingArena, ledger, states: dict[int, dict[str, np.ndarray]], grads: dict[int, np.ndarray]) -> bool | None:
    """Check every staged byte against the version the ledger claims for it.

    ``states`` maps a step number to the four arrays of that version and
    ``grads`` maps a step number to its float16 gradient. Returns ``None``
    when the arena holds no bytes (simulated transfers), since there is
    nothing to compare.
    """
    if not arena.holds_bytes:
        return None
    for seg in ledger.segments:
        ref = states.get(seg.version)
        if ref is None:
            return False
        for s in STATE_SECTIONS:
            if not np.array_equal(arena.array(s)[seg.lo:seg.hi].view(np.uint8), ref[s][seg.lo:seg.hi].view(np.uint8)):
                return False
    for step, hi in arena.grad_prefixes.items():
        if step not in ledger.grad_slices:
            continue
        ref = grads.get(step)
        if ref is None or not np.array_equal(arena.grad_array(step).view(np.uint8), ref[:hi].view(np.uint8)):
            return False
    return True
