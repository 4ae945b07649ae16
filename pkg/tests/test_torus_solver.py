import numpy as np
import pytest

from kamflow.decay_norms import TailModel, TimeFamily, weighted_norm
from kamflow.hamiltonian import DecayProfile, HamiltonianModel, Polynomial, SeparableMode, expand_at, reference_model
from kamflow.homological import residual, transport
from kamflow.torus_fourier import CollocationGrid, TorusFun, synthesize_coeffs
from kamflow.torus_solver import (
    AsymptoticTorusFamily,
    DivergenceError,
    NonConvergenceError,
    SolverSettings,
    TorusCorrection,
    apply_linearized,
    c1_deviation,
    chord_iterate,
    data_tail,
    estimate_stability,
    eval_functional,
    functional_norm,
    invert_linearized,
    solve_family,
    solve_torus,
    solver_grid,
    theorem_estimates,
    vector_field_defect,
)

SETTINGS = SolverSettings()
HALF_P2 = Polynomial({(2,): 0.5})


def free_model():
    return HamiltonianModel(1, HALF_P2, eps=0.0)


def angle_only_model(eps=1e-3):
    mode = SeparableMode(TorusFun.from_trig([(1, eps, 0.0)]), Polynomial.constant(1.0), DecayProfile("poly", 4.0))
    return HamiltonianModel(1, HALF_P2, [mode], l=2.0, eps=eps)


def samples(fam, K=16):
    return synthesize_coeffs(fam.values, CollocationGrid.for_order(K).N, 1)


def random_correction(grid, rng, scale=1e-3, K=16):
    tail = TailModel("poly", 4.0)
    k = np.arange(-K, K + 1)
    t = np.abs(grid.nodes)

    def fam(power):
        c = (rng.normal(size=(2 * K + 1, 1)) + 1j * rng.normal(size=(2 * K + 1, 1))) * np.exp(-np.abs(k))[:, None]
        c = 0.5 * (c + np.conj(c[::-1]))
        return TimeFamily(grid, scale * c[None] / (1 + t[:, None, None] ** power), tail, 1)

    u, v = fam(2.0), fam(3.0)
    return u, v


def test_functional_vanishes_for_unperturbed_zero_correction():
    model = free_model()
    exp = expand_at(model, [0.3])
    grid = solver_grid(model, 1, SETTINGS)
    corr = TorusCorrection.zero(grid, 16, 1, data_tail(model))
    z, g = eval_functional(exp, corr)
    assert np.all(z.values == 0) and np.all(g.values == 0)


def test_functional_at_origin_is_b_and_grad_a():
    model = reference_model(drift=1.0)
    exp = expand_at(model, [0.3])
    grid = solver_grid(model, 1, SETTINGS)
    z, g = eval_functional(exp, TorusCorrection.zero(grid, 16, 1, data_tail(model)))
    pts = CollocationGrid.for_order(16).points()
    T = exp.terms(pts[None], np.zeros((1, 1)), grid.nodes[:, None])
    np.testing.assert_allclose(samples(z), T["b"], atol=1e-15)
    np.testing.assert_allclose(samples(g), T["da"], atol=1e-15)


def test_functional_matches_vector_field_oracle():
    model = reference_model()
    exp = expand_at(model, [0.3])
    grid = solver_grid(model, 1, SETTINGS)
    u, v = random_correction(grid, np.random.default_rng(0))
    corr = TorusCorrection(u, v, u.with_values(transport(u, exp.omega)), v.with_values(transport(v, exp.omega)))
    z, g = eval_functional(exp, corr)
    dz, dg = vector_field_defect(exp, corr)
    assert np.abs(samples(z) - samples(dz)).max() < 1e-6
    assert np.abs(samples(g) + samples(dg)).max() < 1e-6


def test_inverse_of_zero_data():
    model = reference_model()
    exp = expand_at(model, [0.3])
    grid = solver_grid(model, 1, SETTINGS)
    zero = TimeFamily(grid, np.zeros((grid.size, 33, 1)), TailModel("poly", 4.0))
    corr = invert_linearized(exp, zero, zero)
    assert np.all(corr.u.values == 0) and np.all(corr.v.values == 0)


def test_inverse_double_characteristic_integral():
    # h = p^2/2 at p0 = 0: mbar0 = 1, omega = 0; g = e^-t cos gives v = -e^-t cos, u = e^-t cos
    model = free_model()
    exp = expand_at(model, [0.0])
    tail = TailModel("exp", 1.0)
    from kamflow.decay_norms import TimeGrid, horizon_for_tail

    grid = TimeGrid.geometric(horizon_for_tail(tail, 1e-12))
    shape = TorusFun.from_trig([(1, 1.0, 0.0)], K=4)
    g = TimeFamily.separable(grid, shape, lambda t: np.exp(-np.abs(t)), tail)
    zero = g.with_values(np.zeros_like(g.values))
    corr = invert_linearized(exp, zero, g)
    theta = np.linspace(0, 1, 9)[:-1, None]
    c = np.cos(2 * np.pi * theta[:, 0])
    e = np.exp(-grid.nodes)
    for j in range(0, grid.size, 97):
        np.testing.assert_allclose(corr.v.slice(j)(theta)[:, 0], -e[j] * c, atol=1e-8)
        np.testing.assert_allclose(corr.u.slice(j)(theta)[:, 0], e[j] * c, atol=1e-8)
    assert residual(corr.v, g, [0.0]) < 1e-8
    assert residual(corr.u, corr.DuOmega, [0.0]) < 1e-8


def test_inverse_norm_control():
    from kamflow.homological import decay_estimate_constant

    model = reference_model()
    exp = expand_at(model, [0.3])
    grid = solver_grid(model, 1, SETTINGS)
    z, g = eval_functional(exp, TorusCorrection.zero(grid, 16, 1, data_tail(model)))
    corr = invert_linearized(exp, z, g)
    sigma, l = 1.0, model.l
    C = decay_estimate_constant(l, exp.omega)
    Cbar = C * (1 + C)
    mbar0 = 1.0  # Hessian of p^2/2, unchanged by the p-linear perturbation
    nu, _ = corr.norms(sigma, l)
    bound = Cbar * (mbar0 * weighted_norm(g, sigma, l + 2).total + weighted_norm(z, sigma, l + 1).total)
    assert nu <= bound


def test_linearized_round_trip():
    model = reference_model()
    exp = expand_at(model, [0.3])
    grid = solver_grid(model, 1, SETTINGS)
    rng = np.random.default_rng(1)
    for _ in range(3):
        u, v = random_correction(grid, rng)
        corr = TorusCorrection(u, v, u, v)
        z, g = apply_linearized(exp, corr)
        back = invert_linearized(exp, z, g)
        assert np.abs(samples(back.u) - samples(u)).max() < 1e-8
        assert np.abs(samples(back.v) - samples(v)).max() < 1e-8
        z2, g2 = apply_linearized(exp, back, stored=True)
        assert np.abs(z2.values - z.values).max() < 1e-12 and np.abs(g2.values - g.values).max() < 1e-12


def test_unperturbed_converges_immediately():
    _, corr, diag = solve_torus(free_model(), [0.3])
    assert diag.iterations == 0 and diag.residual == 0.0
    assert np.all(corr.u.values == 0) and np.all(corr.v.values == 0)


@pytest.fixture(scope="module")
def reference_solve():
    return solve_torus(reference_model(), [0.3])


def test_reference_model_converges(reference_solve):
    exp, corr, diag = reference_solve
    assert diag.residual <= 1e-9
    assert diag.iterations <= 25
    assert all(r <= 0.5 for r in diag.ratios[1:])
    z, g = eval_functional(exp, corr)
    assert functional_norm(z, g, 1.0, 2.0) <= SETTINGS.tol
    dz, dg = vector_field_defect(exp, corr)
    assert max(np.abs(samples(dz)).max(), np.abs(samples(dg)).max()) < 1e-8
    assert diag.derivative_consistency <= 1e-6


def test_correction_decays(reference_solve):
    _, corr, _ = reference_solve
    t = np.abs(corr.grid.nodes)
    late = t > 50
    u = np.abs(samples(corr.u)).max(axis=(1, 2))
    v = np.abs(samples(corr.v)).max(axis=(1, 2))
    assert np.all(u[late] * (1 + t[late] ** 2) < 10 * u.max())
    assert np.all(v[late] * (1 + t[late] ** 3) < 10 * v.max())


def test_first_iterate_linear_in_eps():
    norms = []
    for eps in (1e-3, 2e-3):
        model = reference_model(eps)
        exp = expand_at(model, [0.3])
        grid = solver_grid(model, 1, SETTINGS)
        z, g = eval_functional(exp, TorusCorrection.zero(grid, 16, 1, data_tail(model)))
        norms.append(max(invert_linearized(exp, z, g).norms(1.0, 2.0)))
    assert norms[1] / norms[0] == pytest.approx(2.0, rel=0.2)


def test_non_convergence_reports_history():
    with pytest.raises(NonConvergenceError) as info:
        solve_torus(reference_model(), [0.3], settings=SolverSettings(max_iter=1))
    assert len(info.value.history) == 2


def test_stalled_iteration_raises_divergence(monkeypatch):
    import kamflow.torus_solver as ts

    real = ts.invert_linearized

    def stalled(exp, z, g, mbar0=None):
        step = real(exp, z, g, mbar0)
        return step - step

    monkeypatch.setattr(ts, "invert_linearized", stalled)
    with pytest.raises(DivergenceError) as info:
        solve_torus(reference_model(), [0.3])
    assert len(info.value.history) == 4
    assert "smallness" in str(info.value)


def test_large_perturbation_leaves_domain():
    from kamflow.hamiltonian import DomainError
    from kamflow.torus_fourier import ShiftTooLargeError

    with pytest.raises((DomainError, ShiftTooLargeError)):
        solve_torus(reference_model(eps=1.0), [0.3])


def test_time_reversal_symmetry():
    model = angle_only_model()
    _, plus, _ = solve_torus(model, [0.0], 1)
    _, minus, _ = solve_torus(model, [0.0], -1)
    np.testing.assert_allclose(minus.u.values, plus.u.values, atol=1e-13)
    np.testing.assert_allclose(minus.v.values, -plus.v.values, atol=1e-13)


def test_theorem_estimates_zero_model():
    fam = solve_family(free_model(), [[0.3]])
    rep = theorem_estimates(fam, 1e-3)
    assert rep.deviation == 0.0 and rep.C0 == 0.0


def test_theorem_estimates_reference():
    reps = [theorem_estimates(solve_family(reference_model(eps), [[0.3]]), eps) for eps in (1e-3, 5e-4)]
    ratio, ok = estimate_stability(*reps)
    assert ok and 0.75 <= ratio <= 1.25
    assert reps[0].deviation < 1.0 and reps[0].sane


def test_family_order_independent_of_threads():
    model = reference_model()
    params = [[0.1], [0.3], [-0.2]]
    a = solve_family(model, params, threads=1)
    b = solve_family(model, params, threads=3)
    assert isinstance(a, AsymptoticTorusFamily)
    for ca, cb in zip(a.corrections, b.corrections):
        assert np.array_equal(ca.u.values, cb.u.values)
    assert a.deviation == b.deviation == [c1_deviation(c) for c in b.corrections]


def test_lipschitz_deviation_over_grid():
    fam = solve_family(reference_model(), [[0.2], [0.3]])
    rep = theorem_estimates(fam, 1e-3)
    diff = np.abs(samples(fam.corrections[0].u) - samples(fam.corrections[1].u)).max() / 0.1
    assert rep.lipschitz >= diff - 1e-15


def test_warm_start_on_other_grid_rejected(reference_solve):
    exp, corr, _ = reference_solve
    other = solver_grid(reference_model(), 1, SolverSettings(ratio=1.05))
    with pytest.raises(ValueError):
        chord_iterate(exp, 1, grid=other, initial=corr)
