"""Transport equation omega . d_theta kappa + d_t kappa = g along characteristics.

Each Fourier mode k decouples into the scalar problem

    kappa_k' + i w_k kappa_k = g_k,   w_k = 2 pi k . omega,

whose decaying solution on the positive branch is
kappa_k(t) = -int_t^inf g_k(tau) e^{i w_k (tau - t)} dtau. Between grid nodes
g_k is replaced by a local quintic and the polynomial-times-exponential integrals are
done exactly (Filon-type), so large w_k costs nothing extra. Beyond the horizon
the declared tail model supplies the remaining integral.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate

from .decay_norms import (
    DivergentIntegralError,
    TailModel,
    TimeFamily,
    TimeGrid,
    tail_bound_f,
    tail_bound_g,
    tail_integral,
    weighted_norm,
)
from .torus_fourier import CollocationGrid, TWO_PI, synthesize_coeffs, wave_vectors

RESIDUAL_RTOL = 1e-8
# nodes per local interpolant (degree STENCIL - 1)
STENCIL = 6


class GridMismatchError(ValueError):
    pass


class SlowTailWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# oscillatory moments and interval weights


def oscillatory_moments(x: np.ndarray) -> np.ndarray:
    """J_m(x) = int_0^1 u^m e^{i x u} du for m < STENCIL, shape x.shape + (STENCIL,)."""
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape + (STENCIL,), dtype=complex)
    small = np.abs(x) < 0.5
    xs = x[small]
    if xs.size:
        terms = np.ones_like(xs, dtype=complex)
        acc = np.zeros(xs.shape + (STENCIL,), dtype=complex)
        for k in range(24):
            for m in range(STENCIL):
                acc[..., m] += terms / (m + k + 1)
            terms = terms * (1j * xs) / (k + 1)
        out[small] = acc
    xl = x[~small]
    if xl.size:
        e = np.exp(1j * xl)
        ix = 1j * xl
        J = [(e - 1.0) / ix]
        for m in range(1, STENCIL):
            J.append((e - m * J[-1]) / ix)
        out[~small] = np.stack(J, axis=-1)
    return out


def _stencils(M: int) -> np.ndarray:
    """Centred STENCIL-node stencil for each interval [t_j, t_{j+1}], j = 0..M-2."""
    j = np.arange(M - 1)
    start = np.clip(j - (STENCIL // 2 - 1), 0, M - STENCIL)
    return start[:, None] + np.arange(STENCIL)[None, :]


@lru_cache(maxsize=64)
def _interval_geometry(nodes_key: bytes):
    s = np.frombuffer(nodes_key, dtype=float)
    M = s.size
    if M < STENCIL:
        raise ValueError(f"need at least {STENCIL} time nodes")
    h = np.diff(s)
    idx = _stencils(M)
    u = (s[idx] - s[:-1, None]) / h[:, None]
    V = u[:, :, None] ** np.arange(STENCIL)[None, None, :]  # V[j, i, m] = u_i^m
    Vinv = np.linalg.inv(V)  # Vinv[j, m, i]
    return s, h, idx, Vinv


def _filon_weights(s: np.ndarray, w: np.ndarray):
    """Weights W[k, j, i] with int_{s_j}^{s_j+1} g e^{i w_k (tau - s_j)} = sum_i W g(s[idx[j, i]])."""
    return _cached_weights(np.ascontiguousarray(s, dtype=float).tobytes(),
                           np.ascontiguousarray(w, dtype=float).tobytes())


@lru_cache(maxsize=32)
def _cached_weights(nodes_key: bytes, freq_key: bytes):
    s, h, idx, Vinv = _interval_geometry(nodes_key)
    w = np.frombuffer(freq_key, dtype=float)
    J = oscillatory_moments(w[:, None] * h[None, :])  # (k, j, m)
    W = np.einsum("kjm,jmi->kji", J, Vinv) * h[None, :, None]
    W.setflags(write=False)
    return W, idx, h


# ---------------------------------------------------------------------------
# tails


def _poly_tail_oscillatory(p: float, T: float, w: float) -> complex:
    """int_T^inf e^{i w (tau - T)} / (1 + tau^p) dtau."""
    if w == 0.0:
        return complex(tail_integral(p, 0.0, T))
    if abs(w) * T >= 40.0:
        # integration by parts, phi^(n)(T) from the leading tau^-p behaviour
        total = 0.0j
        deriv = 1.0 / (1.0 + T**p)
        coef = 1.0
        for n in range(8):
            term = (-1) ** (n + 1) * deriv * coef / (1j * w) ** (n + 1)
            total += term
            coef *= -(p + n) / T
            if abs(term) < 1e-17 * abs(total):
                break
        return total
    fn = lambda x: 1.0 / (1.0 + (T + x) ** p)
    c, _ = integrate.quad(fn, 0.0, np.inf, weight="cos", wvar=abs(w), limlst=200)
    sn, _ = integrate.quad(fn, 0.0, np.inf, weight="sin", wvar=abs(w), limlst=200)
    return complex(c, math.copysign(sn, w) if sn else 0.0)


def _tail_integrals(tail: TailModel, T: float, w: np.ndarray) -> np.ndarray:
    """int_T^inf env(tau)/env(T) e^{i w (tau - T)} dtau per frequency."""
    if tail.kind == "exp":
        return 1.0 / (tail.exponent - 1j * w)
    env_T = 1.0 / (1.0 + T**tail.exponent)
    cache: dict[float, complex] = {}
    out = np.empty(w.shape, dtype=complex)
    for i, wi in enumerate(w.ravel()):
        key = float(wi)
        if key not in cache:
            cache[key] = _poly_tail_oscillatory(tail.exponent, T, key) / env_T
        out.flat[i] = cache[key]
    return out


def _check_tail(tail: TailModel) -> None:
    if tail.kind == "poly":
        if tail.exponent <= 1.0:
            raise DivergentIntegralError(f"tail exponent {tail.exponent:g} <= 1 is not integrable")
        if tail.exponent <= 2.0:
            warnings.warn(f"tail exponent {tail.exponent:g} <= 2: the decay estimate for the solution is not available",
                          SlowTailWarning, stacklevel=3)


# ---------------------------------------------------------------------------
# solver


@dataclass
class HomologicalSolution:
    kappa: TimeFamily
    rhs: TimeFamily
    omega: np.ndarray
    residual_sup: float
    decay_fit_exponent: float
    tail_bound: float
    residual_ok: bool


def mode_frequencies(omega, K: int, n: int) -> np.ndarray:
    """w_k = 2 pi k . omega in coefficient layout, flattened."""
    k = wave_vectors(n, K).reshape(-1, n)
    return TWO_PI * (k @ np.atleast_1d(np.asarray(omega, dtype=float)))


def characteristic_coefficients(values: np.ndarray, grid: TimeGrid, omega, tail: TailModel, n: int) -> tuple[np.ndarray, float]:
    """Solve every mode of a coefficient array (M, (2K+1,)*n, m); returns (kappa coefficients, tail bound)."""
    _check_tail(tail)
    M = grid.size
    K = (values.shape[1] - 1) // 2
    m = values.shape[-1]
    sign = grid.branch
    s = grid.abs_nodes
    w = sign * mode_frequencies(omega, K, n)
    g = values.reshape(M, -1, m)  # (M, modes, m)
    W, idx, h = _filon_weights(s, w)
    # S[k, j, c] = integral over interval j with phase measured from its left node
    S = np.einsum("kji,jikc->kjc", W, g[idx])
    T = s[-1]
    tail_factor = _tail_integrals(tail, T, w)  # (k,)
    tail_val = tail_factor[:, None] * g[-1]  # (k, c)
    phase = np.exp(1j * np.outer(w, s))  # (k, M)
    terms = phase[:, :-1, None] * S
    acc = np.cumsum(terms[:, ::-1], axis=1)[:, ::-1]
    acc = np.concatenate([acc, np.zeros_like(acc[:, :1])], axis=1)
    acc = acc + (phase[:, -1, None] * tail_val)[:, None, :]
    kappa = -np.conj(phase)[:, :, None] * acc  # (k, M, c)
    kappa = sign * np.moveaxis(kappa, 1, 0).reshape(values.shape)
    unit = tail.scaled(1.0)
    scale = np.abs(g[-1]).sum(axis=0).max(initial=0.0) / float(unit.envelope(T))
    bound = float(scale * unit.integral_beyond(T))
    return kappa, bound


def time_derivative_weights(nodes: np.ndarray, width: int = 7) -> tuple[np.ndarray, np.ndarray]:
    """Lagrange derivative weights on a non-uniform grid, centred and one-sided near the ends."""
    t = np.asarray(nodes, dtype=float)
    M = t.size
    start = np.clip(np.arange(M) - width // 2, 0, M - width)
    idx = start[:, None] + np.arange(width)[None, :]
    x = t[idx]
    x0 = t
    W = np.zeros((M, width))
    for i in range(width):
        others = [j for j in range(width) if j != i]
        total = np.zeros(M)
        for mm in others:
            prod = 1.0 / (x[:, i] - x[:, mm])
            for ll in others:
                if ll != mm:
                    prod = prod * (x0 - x[:, ll]) / (x[:, i] - x[:, ll])
            total += prod
        W[:, i] = total
    return W, idx


def time_derivative(values: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    W, idx = time_derivative_weights(nodes)
    shape = values.shape
    flat = values.reshape(shape[0], -1)
    return np.einsum("ji,jik->jk", W, flat[idx]).reshape(shape)


def transport(kappa: TimeFamily, omega) -> np.ndarray:
    """Coefficients of omega . d_theta kappa + d_t kappa (time part by finite differences)."""
    n = kappa.n
    w = mode_frequencies(omega, kappa.K, n).reshape((2 * kappa.K + 1,) * n)
    spatial = 1j * w[(None,) + (Ellipsis,) + (None,)] * kappa.values
    return spatial + time_derivative(kappa.values, kappa.grid.nodes)


def residual(kappa: TimeFamily, g: TimeFamily, omega, margin: int = 3) -> float:
    """sup over interior nodes and collocation points of |omega . d_theta kappa + d_t kappa - g|."""
    if kappa.grid.size != g.grid.size or not np.array_equal(kappa.grid.nodes, g.grid.nodes):
        raise GridMismatchError("kappa and g live on different time grids")
    if kappa.n != g.n or kappa.m != g.m:
        raise GridMismatchError("kappa and g have different shapes")
    K = max(kappa.K, g.K)
    from .torus_fourier import resize_coeffs

    kv = kappa.with_values(resize_coeffs(kappa.values, K, kappa.n))
    gv = resize_coeffs(g.values, K, g.n)
    r = transport(kv, omega) - gv
    inner = r[margin : r.shape[0] - margin]
    if inner.size == 0:
        return 0.0
    N = CollocationGrid.for_order(K, kappa.n, oversample=False).N
    return float(np.abs(synthesize_coeffs(inner, N, kappa.n)).max(initial=0.0))


def _decay_slope(family: TimeFamily) -> float:
    """Least-squares slope of log sup|f^t| against log |t| over the last decade of nodes."""
    t = family.grid.abs_nodes
    sup = family.sup_norms()
    T = t[-1]
    mask = (t >= T / 10.0) & (sup > 0)
    if mask.sum() < 3:
        return float("nan")
    slope, _ = np.polyfit(np.log(t[mask]), np.log(sup[mask]), 1)
    return float(slope)


def solve_he(g: TimeFamily, omega, branch: int | None = None) -> HomologicalSolution:
    """Decaying solution of omega . d_theta kappa + d_t kappa = g on the grid's branch."""
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    if branch is not None and branch != g.grid.branch:
        raise GridMismatchError("requested branch differs from the grid branch")
    if omega.shape != (g.n,):
        raise ValueError("omega must be an n-vector")
    values, bound = characteristic_coefficients(g.values, g.grid, omega, g.tail, g.n)
    tail = TailModel(g.tail.kind, max(g.tail.exponent - 1.0, 0.0) if g.tail.kind == "poly" else g.tail.exponent, g.tail.constant)
    kappa = TimeFamily(g.grid, values, tail, g.n)
    res = residual(kappa, g, omega)
    gsup = float(g.sup_norms().max(initial=0.0))
    slope = _decay_slope(kappa)
    return HomologicalSolution(kappa, g, omega, res, -slope, bound, res <= RESIDUAL_RTOL * (1.0 + gsup))


def characteristic_integral_adaptive(g_mode, w: float, t: float, branch: int = 1) -> complex:
    """Reference value of one mode by adaptive quadrature on the infinite interval.

    g_mode(tau) returns the complex mode value; oscillation is handled by
    QUADPACK's Fourier-integral routine rather than by interpolation.
    """
    if branch == 1:
        gr = lambda s: float(np.real(g_mode(t + s)))
        gi = lambda s: float(np.imag(g_mode(t + s)))
        wv = w
    else:
        gr = lambda s: float(np.real(g_mode(t - s)))
        gi = lambda s: float(np.imag(g_mode(t - s)))
        wv = -w
    opts = dict(limlst=400, limit=400, epsabs=1e-10)
    if wv == 0.0:
        re, _ = integrate.quad(gr, 0.0, np.inf, epsabs=1e-14, epsrel=1e-12, limit=400)
        im, _ = integrate.quad(gi, 0.0, np.inf, epsabs=1e-14, epsrel=1e-12, limit=400)
        val = complex(re, im)
    else:
        a = abs(wv)
        sg = math.copysign(1.0, wv)
        rc, _ = integrate.quad(gr, 0.0, np.inf, weight="cos", wvar=a, **opts)
        rs, _ = integrate.quad(gr, 0.0, np.inf, weight="sin", wvar=a, **opts)
        ic, _ = integrate.quad(gi, 0.0, np.inf, weight="cos", wvar=a, **opts)
        is_, _ = integrate.quad(gi, 0.0, np.inf, weight="sin", wvar=a, **opts)
        val = complex(rc - sg * is_, sg * rs + ic)
    return -val if branch == 1 else val


@dataclass
class DecayEstimateReport:
    kappa_norm: float
    rhs_norm: float
    ratio: float
    constant: float
    passed: bool
    slope: float
    slope_ok: bool | None


def decay_estimate_constant(l: float, omega) -> float:
    """4 (f_{l+1}(0) + |omega| g_l(0) + f_l(0)), following the proof of the estimate."""
    w = float(np.linalg.norm(np.atleast_1d(omega)))
    return 4.0 * (tail_bound_f(l + 1.0, 0.0) + w * tail_bound_g(l, 0.0) + tail_bound_f(l, 0.0))


def decay_estimate_check(sol: HomologicalSolution, sigma: float, l: float,
                         slope_rtol: float = 0.05) -> DecayEstimateReport:
    """Compare |kappa|_{sigma,l} with |g|_{sigma,l+1} and fit the late-time decay slope."""
    kn = weighted_norm(sol.kappa, sigma, l).total
    gn = weighted_norm(sol.rhs, sigma, l + 1).total
    C = decay_estimate_constant(l, sol.omega)
    ratio = 0.0 if gn == 0.0 else kn / gn
    slope = _decay_slope(sol.kappa)
    slope_ok = None if math.isnan(slope) else abs(slope + l) <= slope_rtol * l
    return DecayEstimateReport(kn, gn, ratio, C, ratio <= C, slope, slope_ok)
