from fractions import Fraction

import numpy as np
import pytest

from overlapckpt.clock import VirtualClock
from overlapckpt.errors import CheckpointAborted, ProtocolViolation
from overlapckpt.orchestrator import Scheme
from overlapckpt.stallsim import measure_session
from overlapckpt.engine import PhaseTiming
from overlapckpt.transfer import (
    GRADIENT_PRIORITY,
    STATE_PRIORITY,
    ChannelConfig,
    Kind,
    SimulatedChannel,
    StagingArena,
    ThreadedChannel,
    TransferTask,
    verify_arena,
)

MiB = 1 << 20


def state_task(i, n=4, section="master"):
    return TransferTask(Kind.State, 1, section, i * n, n, 0, STATE_PRIORITY)


def grad_task(i=0, n=2):
    return TransferTask(Kind.Gradient, 1, "grad", i * n, n, 1, GRADIENT_PRIORITY)


def sim(bandwidth=1, P=64, holds=False, copy=False):
    clock = VirtualClock()
    ch = SimulatedChannel(ChannelConfig("simulated", bandwidth=bandwidth, copy_bytes=copy), clock)
    ch.open(StagingArena(P, {1: P}, holds_bytes=holds))
    return clock, ch


def test_simulated_duration_is_bytes_over_bandwidth():
    clock, ch = sim(bandwidth=12 * 1024 * MiB, P=MiB)
    t = ch.submit(TransferTask(Kind.State, 1, "master", 0, 4 * MiB, 0, STATE_PRIORITY))
    assert ch.wait(t) == Fraction(4, 12288)
    assert float(clock.now()) == pytest.approx(325.5e-6, rel=1e-3)


def test_gradient_overtakes_queued_state():
    _, ch = sim()
    st = ch.submit_all([(state_task(i), None) for i in range(3)])
    g = ch.submit(grad_task())
    ch.wait(st + g)
    assert ch.completion_log.index(g.records[0].id) == 1


def test_fifo_within_class():
    _, ch = sim()
    a, b = ch.submit(state_task(0)), ch.submit(state_task(1))
    ch.wait(a + b)
    assert ch.completion_log == [a.records[0].id, b.records[0].id]


def test_wait_on_completed_ticket_is_free():
    _, ch = sim()
    t = ch.submit(state_task(0))
    ch.wait(t)
    assert ch.wait(t) == 0


def test_range_and_session_checks():
    _, ch = sim()
    with pytest.raises(ValueError):
        ch.submit(TransferTask(Kind.State, 1, "master", 250, 8, 0, STATE_PRIORITY))
    ch.close()
    with pytest.raises(ProtocolViolation):
        ch.submit(state_task(0))


def test_wait_after_shutdown_aborts():
    ch = ThreadedChannel(ChannelConfig("real", bandwidth=1000))
    ch.open(StagingArena(64, {}))
    src = np.zeros(256, np.uint8)
    t = ch.submit_all([(state_task(i, 64), src) for i in range(4)])
    ch.shutdown()
    with pytest.raises(CheckpointAborted):
        ch.wait(t)


def test_fault_injection_fails_ticket():
    _, ch = sim()
    ch.inject_fault()
    t = ch.submit(state_task(0))
    with pytest.raises(CheckpointAborted):
        ch.wait(t)


def test_threaded_copies_bytes_and_matches_simulated_order():
    src = np.arange(256, dtype=np.uint8)
    gsrc = np.arange(128, dtype=np.uint8)
    items = [(state_task(i, 64), src) for i in range(4)]
    real = ThreadedChannel(ChannelConfig("real", bandwidth=64 / 0.02, workers=1))
    arena = StagingArena(64, {1: 64})
    real.open(arena)
    st = real.submit_all(items)
    g = real.submit(grad_task(0, 32), gsrc)
    real.wait(st + g)
    real.shutdown()
    assert np.array_equal(arena.array("master").view(np.uint8), src)

    _, s = sim(bandwidth=64 / 0.02)
    st2 = s.submit_all(items)
    g2 = s.submit(grad_task(0, 32), gsrc)
    s.wait(st2 + g2)
    order = lambda ch, recs: [next(i for i, r in enumerate(recs) if r.id == x) for x in ch.completion_log]
    assert order(real, st.records + g.records) == order(s, st2.records + g2.records)


def test_simulated_copy_mode_stages_bytes():
    _, ch = sim(holds=True, copy=True)
    src = np.arange(256, dtype=np.uint8)
    ch.wait(ch.submit_all([(state_task(i, 64), src) for i in range(4)]))
    assert np.array_equal(ch.arena.array("master").view(np.uint8), src)


def test_link_is_work_conserving():
    clock, ch = sim(bandwidth=4)
    t = ch.submit_all([(state_task(i), None) for i in range(5)])
    ch.wait(t)
    assert clock.now() == 5 and ch.link_busy_time == 5


def test_verify_arena_detects_flipped_byte_and_sim_is_not_applicable():
    from overlapckpt.reconstruct import ConsistencyLedger, Segment

    arena = StagingArena(8, {})
    arrays = {"working": np.ones(8, np.float16), "master": np.ones(8, np.float32), "m": np.zeros(8, np.float32), "v": np.zeros(8, np.float32)}
    for k, a in arrays.items():
        arena.array(k)[...] = a
    ledger = ConsistencyLedger(3, [Segment(1, 0, 8, 3)])
    assert verify_arena(arena, ledger, {3: arrays}, {}) is True
    arena.sections["m"][5] ^= 1
    assert verify_arena(arena, ledger, {3: arrays}, {}) is False
    assert verify_arena(StagingArena(8, {}, holds_bytes=False), ledger, {3: arrays}, {}) is None


def test_doubling_bandwidth_halves_gradient_stall():
    timing = PhaseTiming(Fraction(1, 2), Fraction(1, 2), Fraction(0))
    bw = Fraction(14 * 10)
    slow = measure_session(Scheme.GoCkpt, 7, 70, timing, bw, chunk_size=40)
    fast = measure_session(Scheme.GoCkpt, 7, 70, timing, 2 * bw, chunk_size=40)
    assert slow.total() == 2 * fast.total() == 3
