from fractions import Fraction

import numpy as np
import pytest

from kamflow.decay_norms import TimeGrid
from kamflow.hamiltonian import (
    DecayProfile,
    DomainError,
    HamiltonianModel,
    Polynomial,
    SeparableMode,
    check_decay_budget,
    eval_XH,
    eval_Xh_tilde,
    expand_at,
    near_integrable_model,
    reference_model,
)
from kamflow.torus_fourier import TorusFun

HALF_P2 = Polynomial({(2,): 0.5})


def free_model(**kw):
    return HamiltonianModel(1, HALF_P2, **kw)


def two_dof_model(eps=1e-3):
    h = Polynomial({(2, 0): 0.5, (1, 1): 1 / 3, (0, 3): 0.25, (0, 2): 0.5}, 2)
    shape = TorusFun.from_trig([((1, 0), 1.0, 0.2), ((1, -1), 0.3, 0.0)], 2)
    modes = [
        SeparableMode(shape * eps, Polynomial({(1, 0): 1.0, (0, 2): 0.5, (1, 1): 0.3}, 2), DecayProfile("poly", 4.0)),
        SeparableMode(TorusFun.from_trig([((0, 1), 0.0, 1.0)], 2) * eps, Polynomial({(0, 0): 1.0, (2, 1): 1.0}, 2),
                      DecayProfile("exp", 0.7)),
    ]
    return HamiltonianModel(2, h, modes, l=2.0, eps=eps)


def test_unperturbed_expansion_closed_form():
    exp = expand_at(free_model(eps=0.0), [0.3])
    assert exp.e == pytest.approx(0.045, abs=1e-15)
    assert exp.omega == pytest.approx([0.3])
    theta = np.random.default_rng(0).random((5, 1))
    I = np.full((5, 1), 0.1)
    T = exp.terms(theta, I, 2.0)
    assert np.all(T["a"] == 0) and np.all(T["b"] == 0)
    np.testing.assert_allclose(T["m"][..., 0, 0], 0.5, rtol=1e-14)
    np.testing.assert_allclose(T["mbar"][..., 0, 0], 1.0, rtol=1e-14)


def test_reference_a_and_b_by_substitution():
    eps = 1e-3
    exp = expand_at(reference_model(eps), [0.3])
    theta = np.linspace(0, 1, 9)[:, None]
    t = 1.7
    T = exp.terms(theta, np.zeros((9, 1)), t)
    w = 1 / (1 + t**4)
    np.testing.assert_allclose(T["a"], 0.3 * eps * np.cos(2 * np.pi * theta[:, 0]) * w, atol=1e-17)
    np.testing.assert_allclose(T["b"][:, 0], eps * np.cos(2 * np.pi * theta[:, 0]) * w, atol=1e-17)


@pytest.mark.parametrize("builder,p0", [(lambda: reference_model(1e-3, drift=1.0), [0.3]),
                                        (two_dof_model, [0.2, -0.1]),
                                        (near_integrable_model, [0.5])])
def test_reconstruction_identity(builder, p0):
    model = builder()
    exp = expand_at(model, p0)
    rng = np.random.default_rng(1)
    n = model.n
    theta = rng.random((100, n))
    I = rng.uniform(-1, 1, (100, n))
    I *= (0.9 * exp.radius * rng.random(100) / np.linalg.norm(I, axis=1))[:, None]
    t = rng.uniform(-5, 5, 100)
    assert np.abs(exp.H(theta, I, t) - exp.reconstruct(theta, I, t)).max() < 1e-10


def test_mbar_is_action_derivative_of_m_quadratic():
    model = two_dof_model()
    exp = expand_at(model, [0.2, -0.1])
    rng = np.random.default_rng(2)
    theta, I, t = rng.random(2), rng.uniform(-0.1, 0.1, 2), 0.8
    mbar = exp.terms(theta, I, t)["mbar"]

    def quad(J):
        return J @ exp.terms(theta, J, t)["m"] @ J

    h = 1e-6
    grad = np.array([(quad(I + h * e) - quad(I - h * e)) / (2 * h) for e in np.eye(2)])
    np.testing.assert_allclose(mbar @ I, grad, atol=1e-8)


def test_vector_field_against_symplectic_gradient():
    model = two_dof_model()
    exp = expand_at(model, [0.2, -0.1])
    rng = np.random.default_rng(3)
    h = 1e-6
    for _ in range(5):
        theta, I, t = rng.random(2), rng.uniform(-0.1, 0.1, 2), rng.uniform(-3, 3)
        dth, dI = eval_XH(exp, theta, I, t)
        gI = np.array([(exp.H(theta, I + h * e, t) - exp.H(theta, I - h * e, t)) / (2 * h) for e in np.eye(2)])
        gq = np.array([(exp.H(theta + h * e, I, t) - exp.H(theta - h * e, I, t)) / (2 * h) for e in np.eye(2)])
        assert np.abs(dth - gI).max() / np.abs(gI).max() < 1e-6
        assert np.abs(dI + gq).max() <= 1e-6 * max(np.abs(gq).max(), 1e-3)


def test_unperturbed_vector_field():
    exp = expand_at(free_model(eps=0.0), [0.3])
    dth, dI = eval_XH(exp, np.array([0.4]), np.array([0.05]), 3.0)
    assert dth == pytest.approx([0.35]) and dI == pytest.approx([0.0])
    dth2, dI2 = eval_Xh_tilde(exp, np.array([0.4]), np.array([0.05]), 3.0)
    assert np.array_equal(dth, dth2) and np.array_equal(dI, dI2)


def test_vector_field_at_zero_action():
    eps = 1e-3
    exp = expand_at(reference_model(eps), [0.3])
    theta, t = np.array([0.1]), 0.5
    w = 1 / (1 + t**4)
    dth, dI = eval_XH(exp, theta, np.zeros(1), t)
    assert dth[0] == pytest.approx(0.3 + eps * np.cos(2 * np.pi * 0.1) * w, rel=1e-14)
    assert dI[0] == pytest.approx(0.3 * eps * 2 * np.pi * np.sin(2 * np.pi * 0.1) * w, rel=1e-12)


def test_reduced_field_keeps_torus_invariant():
    exp = expand_at(two_dof_model(), [0.2, -0.1])
    dth, dI = eval_Xh_tilde(exp, np.array([0.3, 0.7]), np.zeros(2), 1.3)
    assert np.array_equal(dth, exp.omega)
    assert np.array_equal(dI, np.zeros(2))


def test_reduced_field_finite_differences():
    exp = expand_at(two_dof_model(), [0.2, -0.1])
    rng = np.random.default_rng(4)
    theta, I, t = rng.random(2), rng.uniform(-0.1, 0.1, 2), 0.4

    def htilde(th, J):
        return exp.e + J @ exp.omega + J @ exp.terms(th, J, t)["m"] @ J

    h = 1e-6
    dth, dI = eval_Xh_tilde(exp, theta, I, t)
    gI = np.array([(htilde(theta, I + h * e) - htilde(theta, I - h * e)) / (2 * h) for e in np.eye(2)])
    gq = np.array([(htilde(theta + h * e, I) - htilde(theta - h * e, I)) / (2 * h) for e in np.eye(2)])
    assert np.abs(dth - gI).max() / np.abs(gI).max() < 1e-6
    assert np.abs(dI + gq).max() < 1e-9


def test_domain_errors():
    with pytest.raises(DomainError):
        expand_at(reference_model(), [0.8])
    exp = expand_at(reference_model(), [0.3])
    with pytest.raises(DomainError):
        eval_XH(exp, np.zeros(1), np.array([0.3]), 0.0)
    with pytest.raises(DomainError):
        expand_at(near_integrable_model(), [0.3])


def test_flat_set_remainder_vanishes():
    model = near_integrable_model()
    assert model.check_flat_set(1000) < 1e-12


def test_frequency_matches_exact_gradient():
    h = two_dof_model().h
    p0 = (Fraction(1, 4), Fraction(-1, 8))
    exact = [Fraction(0)] * 2
    for exps, c in h.terms.items():
        c = Fraction(c).limit_denominator(1000)
        for axis in range(2):
            if exps[axis]:
                e = list(exps)
                term = c * exps[axis]
                e[axis] -= 1
                exact[axis] += term * p0[0] ** e[0] * p0[1] ** e[1]
    omega = expand_at(two_dof_model(), [0.25, -0.125]).omega
    np.testing.assert_allclose(omega, [float(x) for x in exact], rtol=1e-15, atol=1e-16)


def test_branch_mirror_symmetry():
    exp = expand_at(reference_model(), [0.3])
    g = TimeGrid.geometric(50.0, 0.05, 1.2)
    plus = exp.a_family(g, 4).values
    minus = exp.a_family(g.mirrored(), 4).values
    assert np.array_equal(plus, minus)
    assert np.array_equal(exp.b_family(g, 4).values, exp.b_family(g.mirrored(), 4).values)


def test_decay_budget_zero_perturbation():
    rep = check_decay_budget(free_model(eps=1e-6))
    assert rep.passed and rep.total == 0.0


def single_mode(eps0, decay, l, eps):
    mode = SeparableMode(TorusFun.from_trig([(1, eps0, 0.0)]), Polynomial.constant(1.0), DecayProfile("poly", decay))
    return free_model(modes=[mode], l=l, eps=eps)


def test_decay_budget_norm_arithmetic():
    eps, l = 1e-3, 2.0
    eps0 = 1e-7
    grid = TimeGrid.geometric(1e4, first_step=0.01, ratio=1.05)
    rep = check_decay_budget(single_mode(eps0, l + 3, l, eps), sigma=1.0, grid=grid)
    t = grid.nodes
    weight_ratio = np.max((1 + t**4) / (1 + t**5))
    c3 = (2 * np.pi) ** 3
    assert rep.norms["|f|_{sigma+2,0}"] == pytest.approx(eps0 * c3, rel=1e-12)
    assert rep.norms["||d_q f||_{sigma,1,l+2}"] == pytest.approx(eps0 * c3 * weight_ratio, rel=1e-12)
    assert rep.norms["||d_p f||_{sigma,2,l+1}"] == 0.0
    assert rep.passed


def test_decay_budget_flags_slow_decay():
    rep = check_decay_budget(single_mode(1e-7, 2.0, 3.0, 1e-3))
    assert not rep.passed
    assert any(v.startswith("||d_q f||_{sigma,1,l+2}") for v in rep.violations)
