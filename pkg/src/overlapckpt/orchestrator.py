"""Checkpoint scheme policies driven from the training loop's phase hooks.

Overlapped schemes (``GoCkpt``, ``GoCkptO``, and ``AsyncO`` as the one-part
case) split the checkpoint into ``K`` contiguous parts. For a checkpoint
triggered after update ``t0``:

* at ``forward_begin`` of step ``t0+i`` the state chunks of part ``i`` are
  queued; they read version ``t0+i-1``, which is stable until that step's
  update begins;
* at ``backward_end`` of step ``t0+i`` (``i < K``) the gradient of that step,
  restricted to parts ``1..i``, is queued at higher priority. ``GoCkpt``
  blocks on it before the update; ``GoCkptO`` lets it run through the update
  and the next forward, blocking only if it is still pending when the next
  backward is about to overwrite the gradient buffer;
* at ``update_begin`` of step ``t0+i`` (``i < K``) unstarted state chunks of
  part ``i`` are withdrawn and in-flight ones are drained, because the update
  mutates what they read. Blocks (aligned runs of the four sections) that did
  not fully arrive are re-sent at ``forward_begin`` of step ``t0+K``;
* at ``update_begin`` of step ``t0+K`` training blocks until every remaining
  state chunk has arrived. All staged parts can then be replayed to version
  ``t0+K-1`` on the host.

``Async`` blocks on a bulk copy of version ``t0`` right after the trigger;
``Sync`` additionally waits for the persist to commit; ``Ideal`` takes an
instantaneous direct copy and never stalls.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from overlapckpt.clock import Clock
from overlapckpt.engine import GradientBuffer, PhaseHooks, TrainingState
from overlapckpt.errors import CheckpointAborted
from overlapckpt.reconstruct import ConsistencyLedger, HostCheckpoint, Segment, StagedCheckpoint
from overlapckpt.transfer import (
    ELEM_BYTES,
    GRADIENT_PRIORITY,
    STATE_PRIORITY,
    STATE_SECTIONS,
    CompletionTicket,
    Kind,
    StagingArena,
    TransferTask,
)

logger = logging.getLogger(__name__)

MiB = 1 << 20
DEFAULT_CHUNK = 4 * MiB
DEFAULT_K = 7


class Scheme(str, enum.Enum):
    Sync = "Sync"
    Async = "Async"
    AsyncO = "AsyncO"
    GoCkpt = "GoCkpt"
    GoCkptO = "GoCkptO"
    Ideal = "Ideal"

    @property
    def overlapped(self) -> bool:
        return self in (Scheme.AsyncO, Scheme.GoCkpt, Scheme.GoCkptO)


@dataclass(frozen=True)
class SchemeConfig:
    scheme: Scheme = Scheme.GoCkpt
    K: int = DEFAULT_K
    chunk_size: int = DEFAULT_CHUNK
    checkpoint_interval: int = 100

    def __post_init__(self) -> None:
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1")

    @property
    def parts(self) -> int:
        """Parts actually used: Async-O is the single-part overlapped case."""
        return 1 if self.scheme is Scheme.AsyncO else self.K


@dataclass(frozen=True)
class Part:
    index: int  # 1-based
    lo: int
    hi: int

    @property
    def size(self) -> int:
        return self.hi - self.lo


def make_parts(P: int, K: int) -> list[Part]:
    """``K`` contiguous parts tiling ``[0, P)``; the remainder goes to the earliest parts."""
    if K < 1 or K > P:
        raise ValueError(f"need 1 <= K <= P, got K={K}, P={P}")
    base, extra = divmod(P, K)
    parts, lo = [], 0
    for i in range(K):
        hi = lo + base + (1 if i < extra else 0)
        parts.append(Part(i + 1, lo, hi))
        lo = hi
    return parts


def split_bytes(total: int, chunk_size: int) -> list[tuple[int, int]]:
    """(offset, length) pieces of at most ``chunk_size`` covering ``total`` bytes."""
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    return [(off, min(chunk_size, total - off)) for off in range(0, total, chunk_size)]


def params_per_block(chunk_size: int) -> int:
    # widest element is 4 bytes, so FP32 chunks are exactly chunk_size long
    return max(1, chunk_size // 4)


def block_ranges(part: Part, chunk_size: int) -> list[tuple[int, int]]:
    n = params_per_block(chunk_size)
    return [(lo, min(lo + n, part.hi)) for lo in range(part.lo, part.hi, n)]


def block_tasks(part_index: int, lo: int, hi: int, version: int, block: int = -1) -> list[TransferTask]:
    """One chunk per section for the parameter range ``[lo, hi)``, model section first."""
    return [
        TransferTask(
            kind=Kind.State,
            part_index=part_index,
            section=s,
            offset=lo * ELEM_BYTES[s],
            length=(hi - lo) * ELEM_BYTES[s],
            version_tag=version,
            priority=STATE_PRIORITY,
            block=block,
        )
        for s in STATE_SECTIONS
    ]


def make_chunks(part: Part, chunk_size: int, version: int) -> list[TransferTask]:
    """State tasks for one part with block-level alignment.

    Each working-weight chunk is immediately followed by the master, m and v
    chunks of the same parameter range.
    """
    tasks = []
    for b, (lo, hi) in enumerate(block_ranges(part, chunk_size)):
        tasks.extend(block_tasks(part.index, lo, hi, version, b))
    return tasks


def gradient_tasks(step: int, prefix: int, chunk_size: int, part_index: int = 0) -> list[TransferTask]:
    return [
        TransferTask(Kind.Gradient, part_index, "grad", off, n, step, GRADIENT_PRIORITY)
        for off, n in split_bytes(prefix * ELEM_BYTES["grad"], chunk_size)
    ]


@dataclass
class StallEvent:
    step: int
    kind: str
    seconds: object  # float (wall) or Fraction (virtual)


@dataclass
class StallRecord:
    scheme: str
    trigger_step: int
    target_step: int
    events: list[StallEvent] = field(default_factory=list)
    completed: bool = False
    aborted: bool = False

    def add(self, step: int, kind: str, seconds) -> None:
        if seconds < 0:
            raise ValueError("stall cannot be negative")
        self.events.append(StallEvent(step, kind, seconds))

    def total(self, kinds: tuple[str, ...] | None = None):
        return sum((e.seconds for e in self.events if kinds is None or e.kind in kinds), 0)

    def by_step(self) -> list[tuple[int, object]]:
        out: dict[int, object] = {}
        for e in self.events:
            out[e.step] = out.get(e.step, 0) + e.seconds
        return sorted(out.items())


PERSIST_KINDS = ("persist_gate", "persist")


@dataclass
class _Block:
    id: int
    part: int
    lo: int
    hi: int


class CheckpointSession:
    def __init__(self, trigger_step: int, parts: list[Part], chunk_size: int, arena: StagingArena, record: StallRecord) -> None:
        self.trigger_step = trigger_step
        self.parts = parts
        self.K = len(parts)
        self.target = trigger_step + self.K - 1
        self.arena = arena
        self.record = record
        self.ledger = ConsistencyLedger(self.target)
        self.blocks: list[_Block] = []
        self.part_blocks: dict[int, list[_Block]] = {}
        for p in parts:
            bl = []
            for lo, hi in block_ranges(p, chunk_size):
                b = _Block(len(self.blocks), p.index, lo, hi)
                self.blocks.append(b)
                bl.append(b)
            self.part_blocks[p.index] = bl
        self.deferred: list[_Block] = []
        self.state_ticket: CompletionTicket | None = None
        self.ticket_blocks: list[_Block] = []
        self.pending_grad: tuple[int, int, CompletionTicket] | None = None
        self.emitted: list[TransferTask] = []
        self.hp = None

    def part_step(self, step: int) -> int:
        return step - self.trigger_step


def _state_sources(state: TrainingState) -> dict[str, np.ndarray]:
    return {k: a.view(np.uint8) for k, a in state.sections().items()}


class SnapshotOrchestrator(PhaseHooks):
    """Phase hooks that run one checkpoint scheme.

    ``on_staged`` receives each finished :class:`StagedCheckpoint` (or, for
    ``Ideal``, a direct :class:`HostCheckpoint`). ``gate`` blocks until the
    previous persist committed and returns the wait.
    """

    def __init__(
        self,
        config: SchemeConfig,
        channel,
        clock: Clock,
        on_staged: Callable[[StagedCheckpoint | HostCheckpoint], None] | None = None,
        gate: Callable[[], object] | None = None,
    ) -> None:
        self.config = config
        self.channel = channel
        self.clock = clock
        self.on_staged = on_staged or (lambda staged: None)
        self.gate = gate or (lambda: 0)
        self.session: CheckpointSession | None = None
        self.records: list[StallRecord] = []
        self.staged: list[StagedCheckpoint | HostCheckpoint] = []
        self.skipped_triggers = 0
        # test hook: withhold one gradient slice so replay must fail
        self.drop_gradient_step: int | None = None

    # bookkeeping

    @property
    def scheme(self) -> Scheme:
        return self.config.scheme

    def total_stall(self, include_persist: bool = True):
        kinds = None if include_persist else ("gradient", "gradient_deadline", "capture_guard", "blocking", "blocking_remainder")
        return sum((r.total(kinds) for r in self.records), 0)

    def due(self, step: int) -> bool:
        return step > 0 and step % self.config.checkpoint_interval == 0

    def discard(self) -> None:
        """Drop the active session (training crashed or the channel failed)."""
        if self.session is not None:
            self.session.record.aborted = True
            self.session = None
        self.channel.reset()

    # phase hooks

    def forward_begin(self, state: TrainingState) -> None:
        if self.session is not None:
            self.on_phase("forward_begin", state)

    def backward_begin(self, state: TrainingState) -> None:
        if self.session is not None:
            self.on_phase("backward_begin", state)

    def backward_end(self, state: TrainingState, grad: GradientBuffer) -> None:
        if self.session is not None:
            self.on_phase("backward_end", state, grad)

    def update_begin(self, state: TrainingState) -> None:
        if self.session is not None:
            self.on_phase("update_begin", state)

    def update_end(self, state: TrainingState) -> None:
        if self.due(state.step):
            if self.session is not None:
                self.skipped_triggers += 1
                logger.info("checkpoint trigger at step %d skipped: session still active", state.step)
                return
            self.begin_checkpoint(state)

    # scheme logic

    def begin_checkpoint(self, state: TrainingState) -> CheckpointSession | None:
        t0 = state.step
        scheme = self.scheme
        K = min(self.config.parts, state.param_count)
        target = t0 + K - 1 if scheme.overlapped else t0
        record = StallRecord(scheme.value, t0, target)
        self.records.append(record)

        waited = self.gate()
        if waited and scheme is not Scheme.Ideal:
            record.add(t0, "persist_gate", waited)

        if scheme is Scheme.Ideal:
            ckpt = HostCheckpoint.from_state(state)
            record.completed = True
            self._deliver(ckpt)
            return None

        parts = make_parts(state.param_count, K)
        if not scheme.overlapped:
            return self._blocking_snapshot(state, parts, record)

        prefixes = {t0 + i: parts[i - 1].hi for i in range(1, K)} if scheme is not Scheme.AsyncO else {}
        arena = StagingArena(state.param_count, prefixes, holds_bytes=self._holds_bytes())
        self.session = CheckpointSession(t0, parts, self.config.chunk_size, arena, record)
        self.session.hp = state.hp
        self.channel.open(arena)
        return self.session

    def _holds_bytes(self) -> bool:
        return getattr(self.channel.config, "mode", "real") == "real" or self.channel.config.copy_bytes

    def _blocking_snapshot(self, state: TrainingState, parts: list[Part], record: StallRecord):
        t0 = state.step
        arena = StagingArena(state.param_count, {}, holds_bytes=self._holds_bytes())
        self.channel.open(arena)
        src = _state_sources(state)
        tasks = [t for p in parts for t in make_chunks(p, self.config.chunk_size, t0)]
        try:
            ticket = self.channel.submit_all([(t, src[t.section]) for t in tasks])
            stall = self.channel.wait(ticket)
        except CheckpointAborted as exc:
            logger.warning("checkpoint at step %d aborted: %s", t0, exc)
            record.aborted = True
            self.channel.reset()
            return None
        finally:
            self.channel.close()
        if stall:
            record.add(t0, "blocking", stall)
        ledger = ConsistencyLedger(t0, [Segment(p.index, p.lo, p.hi, t0) for p in parts], {})
        staged = StagedCheckpoint(arena, ledger, state.hp, len(parts), t0)
        record.completed = True
        self._deliver(staged)
        if self.scheme is Scheme.Sync:
            waited = self.gate()
            if waited:
                record.add(t0, "persist", waited)
        return None

    def _deliver(self, staged) -> None:
        self.staged.append(staged)
        self.on_staged(staged)

    def on_phase(self, event: str, state: TrainingState, grad: GradientBuffer | None = None) -> list[TransferTask]:
        """Apply the overlapped schedule at one phase boundary; returns the tasks queued."""
        s = self.session
        if s is None:
            return []
        step = state.step + 1
        i = s.part_step(step)
        if not 1 <= i <= s.K:
            return []
        try:
            if event == "forward_begin":
                return self._queue_part(s, state, step, i)
            if event == "backward_begin":
                self._drain_gradient(s, step, "gradient_deadline")
                return []
            if event == "backward_end":
                return self._queue_gradient(s, state, grad, step, i)
            if event == "update_begin":
                self._close_capture(s, step, i)
                return []
        except CheckpointAborted as exc:
            logger.warning("checkpoint session from step %d aborted: %s", s.trigger_step, exc)
            self.discard()
            return []
        raise ValueError(f"unknown phase event {event!r}")

    def _queue_part(self, s: CheckpointSession, state: TrainingState, step: int, i: int) -> list[TransferTask]:
        version = step - 1
        blocks = list(s.part_blocks[i])
        if i == s.K:
            blocks = s.deferred + blocks
            s.deferred = []
        src = _state_sources(state)
        tasks = [t for b in blocks for t in block_tasks(b.part, b.lo, b.hi, version, b.id)]
        s.state_ticket = self.channel.submit_all([(t, src[t.section]) for t in tasks])
        s.ticket_blocks = blocks
        s.emitted.extend(tasks)
        return tasks

    def _queue_gradient(self, s: CheckpointSession, state: TrainingState, grad: GradientBuffer, step: int, i: int) -> list[TransferTask]:
        if i >= s.K or self.scheme is Scheme.AsyncO:
            return []
        if grad is None or grad.produced_at_step != step:
            raise CheckpointAborted(f"gradient buffer does not hold the gradient of step {step}")
        prefix = s.parts[i - 1].hi
        tasks = gradient_tasks(step, prefix, self.config.chunk_size, part_index=i)
        s.emitted.extend(tasks)
        if self.drop_gradient_step == step:
            logger.info("test hook: gradient slice of step %d withheld", step)
            return tasks
        src = grad.values.view(np.uint8)
        ticket = self.channel.submit_all([(t, src) for t in tasks])
        s.pending_grad = (step, prefix, ticket)
        if self.scheme is Scheme.GoCkpt:
            self._drain_gradient(s, step, "gradient")
        return tasks

    def _drain_gradient(self, s: CheckpointSession, step: int, kind: str) -> None:
        if s.pending_grad is None:
            return
        grad_step, prefix, ticket = s.pending_grad
        stall = self.channel.wait(ticket)
        if stall:
            s.record.add(step, kind, stall)
        s.ledger.grad_slices[grad_step] = prefix
        s.pending_grad = None

    def _close_capture(self, s: CheckpointSession, step: int, i: int) -> None:
        version = step - 1
        ticket = s.state_ticket
        final = i == s.K
        if not final:
            self.channel.cancel_pending(ticket)
        stall = self.channel.wait(ticket)
        if stall:
            s.record.add(step, "blocking_remainder" if final else "capture_guard", stall)
        done: dict[int, int] = {}
        for t in ticket.completed_tasks():
            done[t.block] = done.get(t.block, 0) + 1
        for b in s.ticket_blocks:
            if done.get(b.id, 0) == len(STATE_SECTIONS):
                s.ledger.segments.append(Segment(b.part, b.lo, b.hi, version))
            elif final:
                raise CheckpointAborted(f"block {b.id} did not arrive in the blocking phase")
            else:
                s.deferred.append(b)
        s.state_ticket = None
        s.ticket_blocks = []
        if final:
            self.finalize(s)

    def finalize(self, s: CheckpointSession) -> StagedCheckpoint:
        if s.pending_grad is not None:
            self._drain_gradient(s, s.target + 1, "blocking_remainder")
        s.ledger.segments.sort(key=lambda seg: seg.lo)
        staged = StagedCheckpoint(s.arena, s.ledger, s.hp, s.K, s.trigger_step)
        self.channel.close()
        s.record.completed = True
        self.session = None
        self._deliver(staged)
        return staged
