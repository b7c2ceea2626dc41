"""Host-side replay that brings staged parts to one consistent version.

A staged part captured at version ``v`` is advanced to the session target
``T`` by applying updates ``v+1 .. T`` with the staged gradient slices, using
the engine's own update kernel restricted to the part's index range.
"""

from __future__ import annotations

import enum
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from overlapckpt.engine import Hyperparams, TrainingState, adamw_kernel
from overlapckpt.errors import IncompleteLedger
from overlapckpt.transfer import STATE_SECTIONS, StagingArena

logger = logging.getLogger(__name__)

DEFAULT_WORKERS = 16


class Provenance(str, enum.Enum):
    reconstructed = "reconstructed"
    direct = "direct"


@dataclass(frozen=True)
class Segment:
    """A contiguous parameter range staged at a single version."""

    part: int
    lo: int
    hi: int
    version: int


@dataclass
class ConsistencyLedger:
    target_version: int
    segments: list[Segment] = field(default_factory=list)
    # step -> number of leading parameters whose gradient for that step is staged
    grad_slices: dict[int, int] = field(default_factory=dict)

    def pending_steps(self, seg: Segment) -> range:
        return range(seg.version + 1, self.target_version + 1)

    def captured_versions(self) -> dict[int, list[int]]:
        """Versions present in each part (a part has several after a blocking remainder)."""
        out: dict[int, set[int]] = defaultdict(set)
        for seg in self.segments:
            out[seg.part].add(seg.version)
        return {p: sorted(vs) for p, vs in sorted(out.items())}

    def validate(self, param_count: int | None = None) -> None:
        covered = 0
        for seg in sorted(self.segments, key=lambda s: s.lo):
            if seg.lo != covered:
                raise IncompleteLedger(f"staged parameters have a gap or overlap at index {covered}")
            if seg.version > self.target_version:
                raise IncompleteLedger(f"segment [{seg.lo}, {seg.hi}) is newer than the target")
            covered = seg.hi
            for step in self.pending_steps(seg):
                if self.grad_slices.get(step, 0) < seg.hi:
                    raise IncompleteLedger(
                        f"part {seg.part} [{seg.lo}, {seg.hi}) at version {seg.version} "
                        f"needs the gradient of step {step}, which is not staged"
                    )
        if param_count is not None and covered != param_count:
            raise IncompleteLedger(f"staged parameters cover [0, {covered}) of {param_count}")


@dataclass
class StagedCheckpoint:
    arena: StagingArena
    ledger: ConsistencyLedger
    hp: Hyperparams
    part_count: int
    trigger_step: int


@dataclass
class HostCheckpoint:
    step: int
    working: np.ndarray
    master: np.ndarray
    m: np.ndarray
    v: np.ndarray
    hp: Hyperparams
    provenance: Provenance = Provenance.reconstructed
    part_count: int = 1

    @property
    def param_count(self) -> int:
        return int(self.master.shape[0])

    def sections(self) -> dict[str, np.ndarray]:
        return {"working": self.working, "master": self.master, "m": self.m, "v": self.v}

    @classmethod
    def from_state(cls, state: TrainingState, part_count: int = 1) -> HostCheckpoint:
        a = state.copy_arrays()
        return cls(state.step, a["working"], a["master"], a["m"], a["v"], state.hp, Provenance.direct, part_count)

    def equals(self, other: HostCheckpoint) -> bool:
        return self.step == other.step and all(
            np.array_equal(a.view(np.uint8), b.view(np.uint8))
            for a, b in zip(self.sections().values(), other.sections().values())
        )


def _replay_part(segs: list[Segment], ledger: ConsistencyLedger, arrays: dict[str, np.ndarray], arena: StagingArena, hp: Hyperparams) -> int:
    applied = 0
    for seg in segs:
        lo, hi = seg.lo, seg.hi
        steps = ledger.pending_steps(seg)
        if not steps:
            continue
        master, m, v = arrays["master"][lo:hi], arrays["m"][lo:hi], arrays["v"][lo:hi]
        for step in steps:
            adamw_kernel(master, m, v, arena.grad_array(step)[lo:hi], step, hp)
            applied += 1
        arrays["working"][lo:hi] = master.astype(np.float16)
    return applied


def reconstruct(staged: StagedCheckpoint, hp: Hyperparams | None = None, workers: int = DEFAULT_WORKERS) -> HostCheckpoint:
    """Advance every staged part to ``ledger.target_version``.

    Raises :class:`IncompleteLedger` if a needed gradient slice is missing;
    nothing is written in that case.
    """
    arena, ledger = staged.arena, staged.ledger
    hp = hp or staged.hp
    if not arena.holds_bytes:
        raise ValueError("the arena holds no bytes (simulated transfer without copies)")
    ledger.validate(arena.param_count)

    arrays = {s: arena.array(s).copy() for s in STATE_SECTIONS}
    by_part: dict[int, list[Segment]] = defaultdict(list)
    for seg in ledger.segments:
        by_part[seg.part].append(seg)

    jobs = list(by_part.values())
    if workers <= 1 or len(jobs) <= 1:
        applied = sum(_replay_part(segs, ledger, arrays, arena, hp) for segs in jobs)
    else:
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="replay") as pool:
            applied = sum(pool.map(lambda segs: _replay_part(segs, ledger, arrays, arena, hp), jobs))
    logger.debug("replayed %d segment-updates to reach step %d", applied, ledger.target_version)

    return HostCheckpoint(
        step=ledger.target_version,
        working=arrays["working"],
        master=arrays["master"],
        m=arrays["m"],
        v=arrays["v"],
        hp=hp,
        provenance=Provenance.reconstructed,
        part_count=staged.part_count,
    )


def verify_against_engine(ckpt: HostCheckpoint, reference: TrainingState) -> bool:
    if reference.step != ckpt.step:
        raise ValueError(f"reference is at step {reference.step}, checkpoint at {ckpt.step}")
    return all(
        np.array_equal(ckpt.sections()[k].view(np.uint8), a.view(np.uint8))
        for k, a in reference.sections().items()
    )
