import numpy as np
import pytest

from overlapckpt.engine import init_state, train_step
from overlapckpt.errors import IncompleteLedger
from overlapckpt.harness import oracle_case
from overlapckpt.reconstruct import (
    ConsistencyLedger,
    HostCheckpoint,
    Provenance,
    Segment,
    StagedCheckpoint,
    reconstruct,
    verify_against_engine,
)
from overlapckpt.transfer import StagingArena

from helpers import session
from overlapckpt.orchestrator import Scheme


def run_to(seed, P, step, mode="prng"):
    s = init_state(seed, P, mode=mode)
    for _ in range(step):
        train_step(s)
    return s


def test_k3_p12_seed7_matches_blocking_snapshot():
    assert oracle_case(3, 12, "prng", 7)


def test_all_parts_at_target_is_identity():
    s = run_to(2, 16, 5)
    arena = StagingArena(16, {})
    for k, a in s.sections().items():
        arena.array(k)[...] = a
    staged = StagedCheckpoint(arena, ConsistencyLedger(5, [Segment(1, 0, 16, 5)]), s.hp, 1, 5)
    out = reconstruct(staged)
    assert out.provenance is Provenance.reconstructed
    assert verify_against_engine(out, s)


def test_worker_count_and_repeat_do_not_change_result():
    orch, _, _ = session(Scheme.GoCkpt, 8, 1000, chunk=128)
    staged = orch.staged[0]
    one = reconstruct(staged, workers=1)
    eight = reconstruct(staged, workers=8)
    again = reconstruct(staged, workers=8)
    assert one.equals(eight) and eight.equals(again)
    assert np.array_equal(one.working, one.master.astype(np.float16))


def test_missing_gradient_slice_is_an_incomplete_ledger():
    with pytest.raises(IncompleteLedger):
        oracle_case(4, 64, "quadratic", 0, drop_gradient_step=5)


def test_ledger_detects_gaps():
    with pytest.raises(IncompleteLedger):
        ConsistencyLedger(3, [Segment(1, 0, 4, 3), Segment(2, 5, 8, 3)]).validate(8)
    with pytest.raises(IncompleteLedger):
        ConsistencyLedger(3, [Segment(1, 0, 4, 3)]).validate(8)


def test_verify_against_engine_contract():
    s = run_to(4, 32, 3)
    ck = HostCheckpoint.from_state(s)
    assert ck.provenance is Provenance.direct
    assert verify_against_engine(ck, s)
    train_step(s)
    with pytest.raises(ValueError):
        verify_against_engine(ck, s)
    moved = HostCheckpoint.from_state(s)
    moved.step = ck.step
    assert not verify_against_engine(moved, run_to(4, 32, 3))


@pytest.mark.parametrize("scheme", ["GoCkpt", "GoCkptO", "AsyncO"])
@pytest.mark.parametrize("mode", ["prng", "quadratic"])
def test_schemes_reconstruct_exactly(scheme, mode):
    for K in (2, 5, 8):
        assert oracle_case(K, 1000, mode, K, scheme=scheme)


def test_real_channel_reconstructs_exactly():
    for K in (1, 3, 7):
        assert oracle_case(K, 1000, "quadratic", 3, channel="real")
