import time

import numpy as np
import pytest

from overlapckpt.engine import (
    GradientBuffer,
    GradMode,
    Hyperparams,
    PhaseHooks,
    PhaseTiming,
    adamw_update,
    compute_gradient,
    init_state,
    state_digest,
    train_step,
)
from overlapckpt.errors import ProtocolViolation, StaleGradient


def same(a, b):
    return all(np.array_equal(x.view(np.uint8), y.view(np.uint8)) for x, y in zip(a.sections().values(), b.sections().values()))


def test_init_deterministic_and_zero_moments():
    a, b = init_state(42, 8), init_state(42, 8)
    assert same(a, b)
    assert not a.m.any() and not a.v.any()
    assert a.step == 0
    assert np.array_equal(a.working, a.master.astype(np.float16))
    assert np.all((a.master >= -1) & (a.master < 1))


def test_init_seed_changes_master():
    assert not np.array_equal(init_state(42, 8).master, init_state(43, 8).master)


def test_init_rejects_empty():
    with pytest.raises(ValueError):
        init_state(0, 0)


def test_prng_gradient_is_pure_and_bounded():
    s = init_state(5, 1000)
    g1 = compute_gradient(s).values.copy()
    g2 = compute_gradient(s).values
    assert np.array_equal(g1, g2)
    assert g1.dtype == np.float16
    assert np.all(np.abs(g1.astype(np.float32)) <= 1)


def test_quadratic_gradient_zero_at_target():
    s = init_state(5, 64, mode="quadratic")
    s.master[...] = s.target
    g = compute_gradient(s)
    assert not g.values.any()
    assert g.produced_at_step == 1


def _scalar_state(w, wd, grad):
    s = init_state(0, 1, Hyperparams(lr=1e-3, weight_decay=wd))
    s.master[...] = w
    s.working[...] = s.master.astype(np.float16)
    return s, GradientBuffer(np.array([grad], dtype=np.float16), 1)


def test_zero_gradient_no_decay_is_identity():
    s, g = _scalar_state(1.0, 0.0, 0.0)
    adamw_update(s, g)
    assert s.master[0] == np.float32(1.0)
    assert s.m[0] == 0 and s.v[0] == 0
    assert s.step == 1


def test_pure_decoupled_decay():
    s, g = _scalar_state(1.0, 0.01, 0.0)
    adamw_update(s, g)
    assert s.master[0] == pytest.approx(0.99999, abs=1e-7)


def test_unit_gradient_first_step_against_float64():
    s, g = _scalar_state(1.0, 0.0, 1.0)
    adamw_update(s, g)
    b1, b2, lr, eps = 0.9, 0.999, 1e-3, 1e-8
    m, v = (1 - b1) * 1.0, (1 - b2) * 1.0
    m_hat, v_hat = m / (1 - b1), v / (1 - b2)
    w = 1.0 - lr * (m_hat / (np.sqrt(v_hat) + eps))
    assert s.m[0] == pytest.approx(m, abs=1e-6)
    assert s.v[0] == pytest.approx(v, abs=1e-6)
    assert s.master[0] == pytest.approx(w, abs=1e-6)


def test_stale_gradient_rejected():
    s = init_state(0, 4)
    g = compute_gradient(s)
    adamw_update(s, g)
    with pytest.raises(StaleGradient):
        adamw_update(s, g)


@pytest.mark.parametrize("mode", ["prng", "quadratic"])
def test_trajectory_deterministic_and_coherent(mode):
    a, b = init_state(3, 257, mode=mode), init_state(3, 257, mode=mode)
    for _ in range(10):
        train_step(a)
        assert np.array_equal(a.working, a.master.astype(np.float16))
        assert np.all(a.v >= 0) and np.all(np.isfinite(a.master))
    for _ in range(10):
        train_step(b)
    assert a.step == b.step == 10
    assert state_digest(a) == state_digest(b)


def test_hooks_see_phases_in_order():
    seen = []

    class Rec(PhaseHooks):
        def forward_begin(self, s):
            seen.append("F")

        def backward_begin(self, s):
            seen.append("b")

        def backward_end(self, s, g):
            assert g.produced_at_step == s.step + 1
            seen.append("B")

        def update_begin(self, s):
            seen.append("U")

        def update_end(self, s):
            seen.append("E")

    s = init_state(0, 4)
    for _ in range(3):
        train_step(s, hooks=Rec())
    assert "".join(seen) == "FbBUE" * 3


def test_reentrant_step_is_a_protocol_violation():
    s = init_state(0, 4)

    class Reenter(PhaseHooks):
        def forward_begin(self, st):
            train_step(st)

    with pytest.raises(ProtocolViolation):
        train_step(s, hooks=Reenter())
    assert not s._in_step


@pytest.mark.slow
def test_padding_contract_wall_clock():
    s = init_state(0, 16)
    start = time.perf_counter()
    train_step(s, PhaseTiming(0.1, 0.2, 0.05))
    assert time.perf_counter() - start >= 0.35


def test_quadratic_mode_converges():
    s = init_state(11, 512, mode=GradMode.quadratic)
    dist = []
    for _ in range(250):
        train_step(s)
        dist.append(float(np.linalg.norm(s.master - s.target)))
    for i in range(50, 150):
        assert dist[i + 100] <= dist[i]
