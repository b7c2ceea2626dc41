import math
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from overlapckpt.analytic import (
    ReliabilityParams,
    derive_t_step,
    min_overhead,
    optimal_interval,
    simulate,
    stall_delta,
    stall_model,
    waste_ratio,
)
from overlapckpt.errors import UnboundedInterval

P600 = 1 / 600


def test_waste_ratio_direct_evaluation():
    rp = ReliabilityParams(p=0.01, T_step=1, T_ckpt=1, T_load=10, N=14)
    assert waste_ratio(rp) == pytest.approx(1 / 14 + 0.07 + 0.1)
    assert waste_ratio(ReliabilityParams(0, 2, 3, 0, 5)) == pytest.approx(3 / 10)
    with pytest.raises(ValueError):
        waste_ratio(ReliabilityParams(0.1, 1, 1, 0, 0))


def test_optimal_interval_examples():
    t_step = derive_t_step(472, 36.79, P600)
    assert t_step == pytest.approx(0.4452, abs=1e-4)
    assert abs(optimal_interval(36.79, 0.4452, P600)[1] - 472) <= 2
    assert abs(optimal_interval(12.226, 0.4452, P600)[1] - 272) <= 2
    assert optimal_interval(0, 1, P600) == (0.0, 1)
    with pytest.raises(UnboundedInterval):
        optimal_interval(1, 1, 0)


def test_doubling_p_shrinks_interval_by_sqrt2():
    a, _ = optimal_interval(10, 0.5, 1e-3)
    b, _ = optimal_interval(10, 0.5, 2e-3)
    assert a / b == pytest.approx(math.sqrt(2))


def test_min_overhead():
    assert min_overhead(0, 5, 3) == (0.0, 0.0)
    p_star, util = min_overhead(P600, 0.175)
    assert p_star == pytest.approx(math.sqrt(2 * 0.175 / 600))
    assert p_star == pytest.approx(0.02415, abs=1e-5)
    assert util == pytest.approx(p_star / (p_star + 1))


def test_min_overhead_equals_waste_at_exact_optimum():
    p, T, C, L = 1e-3, 0.7, 4.0, 30.0
    n, _ = optimal_interval(C, T, p)
    assert abs(min_overhead(p, C, L)[0] - (C / (n * T) + p * n * T / 2 + p * L)) < 1e-12


@settings(max_examples=60, deadline=None)
@given(
    t_ckpt=st.floats(0.01, 50),
    t_step=st.floats(0.05, 5),
    p=st.floats(1e-5, 1e-2),
)
def test_discrete_argmin_is_near_rounded_optimum(t_ckpt, t_step, p):
    n_real, n_int = optimal_interval(t_ckpt, t_step, p)
    if n_real > 1e4:
        return
    wr = [waste_ratio(ReliabilityParams(p, t_step, t_ckpt, 0, N)) for N in range(1, 10_001)]
    best = min(range(len(wr)), key=wr.__getitem__) + 1
    assert abs(best - n_int) <= 1
    # convex: successive differences never decrease
    diffs = [b - a for a, b in zip(wr[: n_int + 50], wr[1 : n_int + 51])]
    assert all(d2 >= d1 - 1e-12 for d1, d2 in zip(diffs, diffs[1:]))


def test_stall_models():
    assert stall_model("GoCkpt", 7, Fraction(1)) == 3
    assert stall_model("GoCkpt", 1, 1.0) == 0
    assert stall_model("AsyncO", 7, 1) == 6
    assert stall_delta(7, Fraction(1)) == -3
    for n in range(2, 14):
        assert stall_model("GoCkpt", n, Fraction(1)) < stall_model("AsyncO", n, Fraction(1))
    for n in (1, 14):
        assert stall_model("GoCkpt", n, Fraction(1)) == stall_model("AsyncO", n, Fraction(1))
        assert stall_delta(n, 1) == 0
    with pytest.raises(ValueError):
        stall_model("Sync", 3, 1)


def test_des_failure_free_limits():
    ideal = simulate("Ideal", ReliabilityParams(0, 0.5, 3, 0, 10), 10_000)
    assert ideal.waste_ratio == 0
    sync = simulate("Sync", ReliabilityParams(0, 0.5, 2, 0, 8), 8 * 0.5 * 1000 + 2 * 1000)
    assert sync.waste_ratio == pytest.approx(2 / (8 * 0.5), abs=1e-12)
    assert sync.checkpoints_completed == 1000


def test_des_is_deterministic_under_seed():
    rp = ReliabilityParams(1e-3, 0.5, 2, 5, 40)
    a = simulate("GoCkpt", rp, 1e5, seed=3)
    b = simulate("GoCkpt", rp, 1e5, seed=3)
    assert a == b


def test_des_fixed_failures_within_15_percent_of_model():
    t_step = derive_t_step(472, 36.79, P600)
    _, n = optimal_interval(0.175, t_step, P600)
    rp = ReliabilityParams(P600, t_step, 0.175, 0, n)
    rep = simulate("Sync", rp, horizon=600 * 10_050, failures="fixed")
    assert rep.failures >= 10_000
    assert rep.waste_ratio == pytest.approx(waste_ratio(rp), rel=0.15)


def test_des_exponential_failures_track_model():
    rp = ReliabilityParams(1e-3, 0.2, 0.5, 0, optimal_interval(0.5, 0.2, 1e-3)[1])
    rep = simulate("Sync", rp, horizon=1e7, failures="exponential", seed=1)
    assert rep.failures > 9_000
    assert rep.waste_ratio == pytest.approx(waste_ratio(rp), rel=0.05)
