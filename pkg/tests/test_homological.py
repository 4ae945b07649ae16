import time
import warnings

import numpy as np
import pytest

from kamflow.decay_norms import DivergentIntegralError, TailModel, TimeFamily, TimeGrid, horizon_for_tail
from kamflow.homological import (
    GridMismatchError,
    SlowTailWarning,
    characteristic_integral_adaptive,
    decay_estimate_check,
    decay_estimate_constant,
    residual,
    solve_he,
)
from kamflow.decay_norms import tail_bound_f, tail_bound_g
from kamflow.torus_fourier import TorusFun
from kamflow.verification import he_battery

COS = TorusFun.from_trig([(1, 1.0, 0.0)])
THETA = np.linspace(0.0, 1.0, 17)[:-1, None]


def slices(fam):
    return np.stack([fam.slice(j)(THETA)[:, 0] for j in range(fam.grid.size)])


def family(profile, tail, shape=COS, branch=1, rel=1e-10):
    grid = TimeGrid.geometric(horizon_for_tail(tail, rel), branch=branch)
    return TimeFamily.separable(grid, shape, profile, tail)


def arctan_family(branch=1):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SlowTailWarning)
        return family(lambda t: 1.0 / (1.0 + t**2), TailModel("poly", 2.0), branch=branch)


def solve_quiet(g, omega):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SlowTailWarning)
        return solve_he(g, omega)


def test_zero_rhs():
    grid = TimeGrid.geometric(100.0, 0.05, 1.1)
    g = TimeFamily(grid, np.zeros((grid.size, 5, 1)), TailModel("poly", 4.0))
    sol = solve_he(g, [0.4])
    assert np.all(sol.kappa.values == 0) and sol.residual_sup == 0.0


def test_arctan_closed_form():
    g = arctan_family()
    sol = solve_quiet(g, [0.0])
    t = g.grid.nodes
    exact = -np.cos(2 * np.pi * THETA[:, 0])[None] * (np.pi / 2 - np.arctan(t))[:, None]
    assert np.abs(slices(sol.kappa) - exact).max() <= 1e-8
    assert sol.residual_sup <= 1e-8


@pytest.mark.parametrize("omega", [0.0, 0.7, 3.1])
def test_exponential_single_mode(omega):
    g = family(lambda t: np.exp(-t), TailModel("exp", 1.0), rel=1e-12)
    sol = solve_he(g, [omega])
    w = 2 * np.pi * omega
    # kappa = e^-t (A cos + B sin): -A + w B = 1, -w A - B = 0
    A, B = np.linalg.solve([[-1.0, w], [-w, -1.0]], [1.0, 0.0])
    c, s = np.cos(2 * np.pi * THETA[:, 0]), np.sin(2 * np.pi * THETA[:, 0])
    exact = np.exp(-g.grid.nodes)[:, None] * (A * c + B * s)[None]
    assert np.abs(slices(sol.kappa) - exact).max() <= 1e-8
    assert sol.residual_sup <= 1e-8


def test_battery_residuals():
    for g, omega in he_battery(0):
        sol = solve_he(g, omega)
        assert sol.residual_sup <= 1e-8 * (1 + g.sup_norms().max())
        assert sol.residual_ok


def test_residual_sensitivity():
    g = family(lambda t: 1 / (1 + t**4), TailModel("poly", 4.0))
    sol = solve_he(g, [0.3])
    vals = np.array(sol.kappa.values)
    j = g.grid.size // 2
    vals[j] += (0.1 * COS).resized(sol.kappa.K).coeffs
    assert residual(sol.kappa.with_values(vals), g, [0.3]) >= 0.05


def test_residual_of_time_constant_kappa():
    grid = TimeGrid.geometric(50.0, 0.05, 1.1)
    kappa = TimeFamily(grid, np.broadcast_to(COS.coeffs, (grid.size,) + COS.coeffs.shape))
    zero = kappa.with_values(np.zeros_like(kappa.values))
    omega = 0.25
    assert residual(kappa, zero, [omega]) == pytest.approx(2 * np.pi * omega, rel=1e-2)


def test_grid_mismatch():
    a = family(lambda t: 1 / (1 + t**4), TailModel("poly", 4.0))
    b = TimeFamily(TimeGrid.geometric(10.0, 0.1, 1.1), np.zeros((TimeGrid.geometric(10.0, 0.1, 1.1).size, 3, 1)))
    with pytest.raises(GridMismatchError):
        residual(b, a, [0.1])
    with pytest.raises(GridMismatchError):
        solve_he(a, [0.1], branch=-1)


def test_divergent_and_slow_tails():
    grid = TimeGrid.geometric(100.0, 0.05, 1.1)
    vals = np.zeros((grid.size, 3, 1))
    with pytest.raises(DivergentIntegralError):
        solve_he(TimeFamily(grid, vals, TailModel("poly", 1.0)), [0.0])
    with pytest.warns(SlowTailWarning):
        solve_he(TimeFamily(grid, vals, TailModel("poly", 1.8)), [0.0])


def test_decay_estimate_passes_with_slope():
    l = 2.0
    g = family(lambda t: 1 / (1 + t ** (l + 1)), TailModel("poly", l + 1))
    sol = solve_he(g, [0.0])
    rep = decay_estimate_check(sol, 1.0, l)
    assert 0 < rep.ratio <= rep.constant and rep.passed
    assert rep.slope_ok and abs(rep.slope + l) <= 0.05 * l


def test_decay_estimate_zero_rhs():
    grid = TimeGrid.geometric(100.0, 0.05, 1.1)
    g = TimeFamily(grid, np.zeros((grid.size, 3, 1)), TailModel("poly", 3.0))
    rep = decay_estimate_check(solve_he(g, [0.2]), 1.0, 2.0)
    assert rep.ratio == 0.0 and rep.passed


def test_decay_constant_assembly():
    l, om = 2.5, 0.7
    expected = 4 * (tail_bound_f(l + 1, 0) + om * tail_bound_g(l, 0) + tail_bound_f(l, 0))
    assert decay_estimate_constant(l, [om]) == pytest.approx(expected, rel=1e-14)


def test_linearity_and_mode_decoupling():
    g1, om = he_battery(3)[1]
    g2, _ = he_battery(4)[1]
    k1 = solve_he(g1, om).kappa.values
    k2 = solve_he(g2, om).kappa.values
    k12 = solve_he(g1.with_values(2.0 * g1.values - 0.5 * g2.values), om).kappa.values
    assert np.abs(k12 - (2.0 * k1 - 0.5 * k2)).max() <= 1e-10
    # keep only mode +-2 of g1; only mode +-2 of kappa survives and equals the full solve there
    K = g1.K
    mask = np.zeros(2 * K + 1, bool)
    mask[[K - 2, K + 2]] = True
    only = solve_he(g1.with_values(g1.values * mask[None, :, None]), om).kappa.values
    assert np.all(only[:, ~mask] == 0)
    np.testing.assert_allclose(only[:, mask], k1[:, mask], atol=1e-15)


def test_branch_mirror_on_arctan():
    plus = solve_quiet(arctan_family(1), [0.0]).kappa
    minus = solve_quiet(arctan_family(-1), [0.0]).kappa
    np.testing.assert_allclose(minus.values, -plus.values, atol=1e-13)


@pytest.mark.parametrize("branch", [1, -1])
def test_adaptive_quadrature_agrees(branch):
    tail = TailModel("poly", 3.0)
    g = family(lambda t: 1 / (1 + np.abs(t) ** 3) * np.cos(0.5 * t), tail, branch=branch)
    omega = 0.37
    sol = solve_he(g, [omega])
    K = g.K
    w = 2 * np.pi * omega
    for j in (0, g.grid.size // 3, 2 * g.grid.size // 3):
        t = g.grid.nodes[j]
        ref = characteristic_integral_adaptive(lambda s: 0.5 / (1 + abs(s) ** 3) * np.cos(0.5 * s), w, t, branch)
        assert abs(sol.kappa.values[j, K + 1, 0] - ref) <= 1e-8


def test_runtime_200_nodes():
    rng = np.random.default_rng(5)
    tail = TailModel("poly", 4.0)
    grid = TimeGrid.with_count(200, horizon_for_tail(tail))
    c = rng.normal(size=(33, 1)) + 1j * rng.normal(size=(33, 1))
    c = 0.5 * (c + np.conj(c[::-1]))
    g = TimeFamily(grid, tail.envelope(grid.nodes)[:, None, None] * c[None], tail, 1)
    t0 = time.perf_counter()
    solve_he(g, [0.4142])
    assert time.perf_counter() - t0 < 10.0
