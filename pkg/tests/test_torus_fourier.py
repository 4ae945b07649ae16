import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kamflow.torus_fourier import (
    AliasingError,
    CollocationGrid,
    ShiftTooLargeError,
    TorusFun,
    analyze,
    compose_shift,
    conjugate_symmetry_error,
    differentiate,
    holder_surrogate,
    multiply,
    symmetrize_coeffs,
    synthesize,
)


def random_fun(rng, n=1, K=4, m=1, scale=1.0):
    c = rng.normal(size=(2 * K + 1,) * n + (m,)) + 1j * rng.normal(size=(2 * K + 1,) * n + (m,))
    return TorusFun(symmetrize_coeffs(scale * c, n))


def test_zero_function_samples_vanish():
    grid = CollocationGrid(8)
    assert np.all(synthesize(TorusFun.zeros(1, 1, 2), grid) == 0.0)


def test_single_cosine_samples():
    N = 12
    f = TorusFun.from_trig([(1, 1.0, 0.0)])
    got = synthesize(f, CollocationGrid(N))[:, 0]
    np.testing.assert_allclose(got, np.cos(2 * np.pi * np.arange(N) / N), atol=1e-14)


def test_round_trip_two_dimensional():
    rng = np.random.default_rng(1)
    f = random_fun(rng, n=2, K=3, m=2)
    grid = CollocationGrid.for_order(3, 2)
    back = analyze(synthesize(f, grid), 3, grid)
    assert np.abs(back.coeffs - f.coeffs).max() < 1e-12


def test_coarse_grid_is_rejected():
    f = TorusFun.from_trig([(3, 1.0, 0.0)])
    with pytest.raises(AliasingError):
        synthesize(f, CollocationGrid(6))


def test_conjugate_symmetry_and_real_evaluation():
    rng = np.random.default_rng(2)
    f = random_fun(rng, n=2, K=2)
    assert conjugate_symmetry_error(f) < 1e-14
    from kamflow.torus_fourier import evaluate_coeffs
    theta = rng.random((10, 2))
    k = np.stack(np.meshgrid(np.arange(-2, 3), np.arange(-2, 3), indexing="ij"), -1)
    direct = np.einsum("abm,pab->pm", f.coeffs, np.exp(2j * np.pi * np.einsum("abn,pn->pab", k, theta)))
    assert np.abs(direct.imag).max() < 1e-12
    np.testing.assert_allclose(evaluate_coeffs(f.coeffs, theta, 2), direct.real, atol=1e-12)


def test_derivative_of_constant_and_sine():
    assert np.abs(differentiate(TorusFun.constant(3.0, K=2)).coeffs).max() == 0.0
    d = differentiate(TorusFun.from_trig([(1, 0.0, 1.0)]))
    theta = np.linspace(0, 1, 7)
    np.testing.assert_allclose(d(theta)[:, 0], 2 * np.pi * np.cos(2 * np.pi * theta), atol=1e-12)


def test_derivative_matches_central_differences():
    rng = np.random.default_rng(3)
    f = random_fun(rng, K=5)
    d = differentiate(f)
    theta = rng.random(20)
    h = 1e-5
    fd = (f(theta + h) - f(theta - h)) / (2 * h)
    rel = np.abs(fd - d(theta)).max() / np.abs(d(theta)).max()
    assert rel < 1e-6


def test_mixed_partials_commute():
    f = random_fun(np.random.default_rng(4), n=2, K=3)
    a = differentiate(differentiate(f, 0), 1).coeffs
    b = differentiate(differentiate(f, 1), 0).coeffs
    assert np.abs(a - b).max() < 1e-12


def test_identity_shift():
    f = random_fun(np.random.default_rng(5), K=4)
    g = compose_shift(f, TorusFun.zeros(1, 1, 4))
    assert np.abs(g.coeffs - f.coeffs).max() < 1e-13


def test_constant_shift_is_phase_rotation():
    c = 0.137
    f = random_fun(np.random.default_rng(6), K=4)
    g = compose_shift(f, TorusFun.constant(c, K=0))
    k = np.arange(-4, 5)
    expected = f.coeffs * np.exp(2j * np.pi * k * c)[:, None]
    assert np.abs(g.coeffs - expected).max() < 1e-12


def test_nonconstant_shift_against_direct_evaluation():
    f = TorusFun.from_trig([(1, 1.0, 0.0)])
    u = TorusFun.from_trig([(1, 0.0, 0.01)])
    g = compose_shift(f, u, K=16)
    theta = np.arange(64) / 64
    direct = np.cos(2 * np.pi * (theta + 0.01 * np.sin(2 * np.pi * theta)))
    assert np.abs(g(theta)[:, 0] - direct).max() < 1e-10


def test_large_shift_rejected():
    f = TorusFun.from_trig([(1, 1.0, 0.0)])
    with pytest.raises(ShiftTooLargeError):
        compose_shift(f, TorusFun.constant(0.6))


def test_product_against_pointwise():
    rng = np.random.default_rng(7)
    f, g = random_fun(rng, K=3), random_fun(rng, K=3)
    h = multiply(f, g, K=6)
    theta = rng.random(15)
    np.testing.assert_allclose(h(theta), f(theta) * g(theta), atol=1e-12)


def test_holder_of_constant():
    for sigma in (0.0, 0.5, 1.0, 2.3):
        assert holder_surrogate(TorusFun.constant(-2.5, K=2), sigma, CollocationGrid(32)) == pytest.approx(2.5)


def test_holder_of_cosine_at_one():
    f = TorusFun.from_trig([(1, 1.0, 0.0)])
    assert holder_surrogate(f, 1.0, CollocationGrid(256)) == pytest.approx(2 * np.pi, rel=1e-12)


def test_holder_refinement_monotone():
    rng = np.random.default_rng(8)
    for _ in range(50):
        f = random_fun(rng, K=4)
        sigma = rng.uniform(0, 2.5)
        assert holder_surrogate(f, sigma, CollocationGrid(16)) <= holder_surrogate(f, sigma, CollocationGrid(32)) + 1e-12


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 3), st.floats(0, 3), st.integers(0, 10_000))
def test_holder_monotone_in_sigma(s1, s2, seed):
    f = random_fun(np.random.default_rng(seed), K=3)
    lo, hi = sorted((s1, s2))
    grid = CollocationGrid(32)
    assert holder_surrogate(f, lo, grid) <= holder_surrogate(f, hi, grid) + 1e-12


def test_parseval():
    rng = np.random.default_rng(9)
    f = random_fun(rng, n=2, K=3)
    grid = CollocationGrid(8, 2)
    samples = synthesize(f, grid)
    assert np.mean(samples**2) == pytest.approx(np.sum(np.abs(f.coeffs) ** 2), rel=1e-12)


def test_linearity():
    rng = np.random.default_rng(10)
    f, g = random_fun(rng, K=3), random_fun(rng, K=3)
    grid = CollocationGrid(10)
    np.testing.assert_allclose(synthesize(2.0 * f + g, grid), 2.0 * synthesize(f, grid) + synthesize(g, grid), atol=1e-12)
