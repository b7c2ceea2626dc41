"""Measure per-checkpoint stall by running the real orchestrator on virtual time.

The training loop, the scheme policy and the transfer queue are the same
objects used for real runs; only the clock and the link are simulated, so
the measured stall is exact (rational) and reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from overlapckpt.clock import VirtualClock, as_fraction
from overlapckpt.engine import PhaseTiming, init_state, train_step
from overlapckpt.orchestrator import Scheme, SchemeConfig, SnapshotOrchestrator, StallRecord
from overlapckpt.transfer import BYTES_PER_PARAM, ChannelConfig, SimulatedChannel


@dataclass
class SessionMeasurement:
    scheme: Scheme
    n_overlap: int
    stall: Fraction
    record: StallRecord


def measure_session(
    scheme: Scheme | str,
    K: int,
    P: int,
    timing: PhaseTiming,
    bandwidth,
    chunk_size: int = 4 << 20,
    warmup: int = 2,
) -> StallRecord:
    """Run until one checkpoint (triggered after step ``warmup``) has finished; return its record."""
    clock = VirtualClock()
    channel = SimulatedChannel(ChannelConfig("simulated", bandwidth=bandwidth), clock)
    cfg = SchemeConfig(Scheme(scheme), K=K, chunk_size=chunk_size, checkpoint_interval=warmup)
    orch = SnapshotOrchestrator(cfg, channel, clock)
    state = init_state(0, P)
    try:
        for _ in range(warmup + max(cfg.parts, 1)):
            train_step(state, timing, orch, clock)
    finally:
        channel.detach()
    record = orch.records[0]
    if not record.completed:
        raise RuntimeError(f"{scheme} session did not complete")
    return record


def saturating_stall(scheme: Scheme | str, n_overlap: int, T_step=Fraction(1), params_per_part: int = 10) -> SessionMeasurement:
    """Stall of one checkpoint when moving one part's state takes exactly one step.

    The forward and backward phases each take half a step and the update is
    instantaneous, so a part's state transfer fills the capture window of its
    step. The whole checkpoint is ``n_overlap`` parts; Async-O moves all of it
    in one overlapped step, GoCkpt spreads it over ``n_overlap`` steps.
    """
    scheme = Scheme(scheme)
    T = as_fraction(T_step)
    P = n_overlap * params_per_part
    bandwidth = Fraction(BYTES_PER_PARAM * params_per_part) / T
    timing = PhaseTiming(T / 2, T / 2, Fraction(0))
    record = measure_session(scheme, n_overlap, P, timing, bandwidth)
    return SessionMeasurement(scheme, n_overlap, Fraction(record.total()), record)
