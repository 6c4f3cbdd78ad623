import math

import numpy as np
import pytest

from linsys.kernel import Kernel, make_bcpp_kernel
from linsys.walk import (DegenerateWalkError, DivergentHError,
                         RecurrentDimensionError, WalkSpec,
                         bcpp_critical_lambda, green, green_box, h_of_x,
                         return_probability, simple_walk, simulate_walk,
                         survival_criterion, walk_from_kernel)

PI3 = 0.34053732955  # simple-walk return probability in d = 3


def test_bcpp_walk_rates():
    w = walk_from_kernel(make_bcpp_kernel(3, 1.0))
    assert len(w.rates) == 6
    assert all(abs(q - 1 / 7) < 1e-12 for q in w.rates.values())
    assert abs(w.total_rate - 6 / 7) < 1e-12


def test_symmetrization():
    # asymmetric drift: E[K_{e}] = 0.6, E[K_{-e}] = 0.2
    k = Kernel(1, [(0.2, {}), (0.6, {(0,): 1.0, (1,): 1.0}),
                   (0.2, {(0,): 1.0, (-1,): 1.0})])
    w = walk_from_kernel(k, symmetrized=True)
    assert abs(w.rates[(1,)] - 0.4) < 1e-12
    assert abs(w.rates[(-1,)] - 0.4) < 1e-12
    wx = walk_from_kernel(k, symmetrized=False)
    # one-point walk jumps by -z at rate E[K_z]
    assert abs(wx.rates[(-1,)] - 0.6) < 1e-12
    assert abs(wx.rates[(1,)] - 0.2) < 1e-12


def test_identity_kernel_degenerate():
    with pytest.raises(DegenerateWalkError):
        walk_from_kernel(Kernel(1, [(1.0, {(0,): 1.0})]))


def test_low_dimension_rejected():
    for d in (1, 2):
        with pytest.raises(RecurrentDimensionError):
            green(walk_from_kernel(make_bcpp_kernel(d, 1.0)))


def test_return_probability_d3():
    assert abs(return_probability(3) - PI3) < 1e-3


def test_return_probability_rate_invariant():
    # scaling all rates leaves the embedded chain (and pi_d) unchanged
    w = simple_walk(3)
    scaled = WalkSpec(d=3, rates={z: 7.3 * q for z, q in w.rates.items()},
                      total_rate=7.3 * w.total_rate)
    assert abs(green(w).pi_d - green(scaled).pi_d) < 1e-9


def test_green_zero_value_bcpp():
    tab = green(walk_from_kernel(make_bcpp_kernel(3, 1.0)))
    # sojourn decomposition: G(0) = 1/(total_rate (1 - pi_3))
    assert abs(tab.g0 - 7 / (6 * (1 - PI3))) < 2e-4
    assert abs(tab.criterion_value - 0.8846) < 5e-4


def test_green_nearest_neighbor_identity():
    w = walk_from_kernel(make_bcpp_kernel(3, 1.0))
    e = (1, 0, 0)
    tab = green(w, offsets=[e])
    assert abs(tab.values[e] - (tab.g0 - 1.0 / w.total_rate)) < 1e-9


def test_green_symmetry():
    w = walk_from_kernel(make_bcpp_kernel(3, 1.0))
    offs = [(1, 2, 0), (-1, -2, 0), (2, 0, 1), (-2, 0, -1)]
    tab = green(w, offsets=offs)
    assert abs(tab.values[(1, 2, 0)] - tab.values[(-1, -2, 0)]) < 1e-10
    assert abs(tab.values[(2, 0, 1)] - tab.values[(-2, 0, -1)]) < 1e-10


def test_green_scaling_covariance():
    w = simple_walk(3)
    doubled = WalkSpec(d=3, rates={z: 2 * q for z, q in w.rates.items()},
                       total_rate=2 * w.total_rate)
    g1 = green(w).g0
    g2 = green(doubled).g0
    assert abs(g2 - g1 / 2) < 1e-8


def test_green_max_at_zero():
    w = walk_from_kernel(make_bcpp_kernel(3, 1.0))
    tab = green(w, offsets=[(1, 0, 0), (2, 1, 0), (3, 3, 3)])
    assert all(v <= tab.g0 for v in tab.values.values())


@pytest.mark.parametrize("lam", [0.6, 1.0, 5.0])
def test_quadrature_vs_truncated_solve(lam):
    w = walk_from_kernel(make_bcpp_kernel(3, lam))
    quad = green(w)
    trunc = green(w, method="truncated_solve")
    assert abs(quad.g0 - trunc.g0) <= quad.error_estimate + trunc.error_estimate


def test_truncated_solve_monotone_from_below():
    w = walk_from_kernel(make_bcpp_kernel(3, 1.0))
    quad = green(w)
    g_prev = 0.0
    for radius in (6, 10, 16):
        g = green(w, method="truncated_solve", resolution=radius).g0
        assert g_prev < g < quad.g0 + quad.error_estimate
        g_prev = g


def test_green_box_matches_point_solve():
    w = walk_from_kernel(make_bcpp_kernel(3, 1.0))
    box = green_box(w, 10)
    tab = green(w, offsets=[(1, 0, 0)], method="truncated_solve", resolution=10)
    assert abs(box[11, 10, 10] - tab.values[(1, 0, 0)]) < 1e-10


def test_survival_criterion_bcpp():
    value, ok = survival_criterion(make_bcpp_kernel(3, 1.0))
    assert ok and abs(value - 0.8846) < 5e-4
    value, ok = survival_criterion(make_bcpp_kernel(3, 0.4))
    assert not ok and value > 1.0


def test_survival_criterion_identity_kernel():
    value, ok = survival_criterion(Kernel(3, [(1.0, {(0, 0, 0): 1.0})]))
    assert value == 0.0 and ok


def test_critical_lambda_d3():
    lc = bcpp_critical_lambda(3)
    assert abs(lc - 0.5226) < 1e-3
    # the criterion flips exactly at lambda_c
    assert survival_criterion(make_bcpp_kernel(3, lc * 1.01))[1]
    assert not survival_criterion(make_bcpp_kernel(3, lc * 0.99))[1]


def test_critical_lambda_limit_toward_1_over_2d():
    # pi_d decreases with d, so the excess over 1/(2d) shrinks
    lc3 = bcpp_critical_lambda(3)
    lc4 = bcpp_critical_lambda(4, resolution=24)
    assert lc4 > 1 / 8
    assert lc4 * 8 < lc3 * 6  # relative excess decreases


def test_h_values():
    k = make_bcpp_kernel(3, 1.0)
    h = h_of_x(k, [(0, 0, 0), (1, 0, 0), (4, 0, 0)])
    assert abs(h[(0, 0, 0)] - 8.663) < 2e-2
    assert h[(0, 0, 0)] > h[(1, 0, 0)] > h[(4, 0, 0)] > 1.0


def test_h_divergent_below_critical():
    with pytest.raises(DivergentHError):
        h_of_x(make_bcpp_kernel(3, 0.4), [(0, 0, 0)])


def test_monte_carlo_green_consistency():
    # mean local time at 0 up to T approaches G(0) from below; the
    # heat-kernel tail beyond T = 200 is under 2 * 0.42/sqrt(200) = 0.06
    w = walk_from_kernel(make_bcpp_kernel(3, 1.0))
    rng = np.random.Generator(np.random.Philox(12345))
    _, loc = simulate_walk(w, (0, 0, 0), 200.0, 100_000, rng)
    mean = loc.mean()
    se = loc.std(ddof=1) / math.sqrt(len(loc))
    g0 = green(w).g0
    assert mean <= g0 + 3 * se
    assert mean >= g0 - 0.06 - 3 * se
