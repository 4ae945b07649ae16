"""Closed-form Hamiltonians H(q, p, t) = h(p) + R(q, p) + sum_j G_j(q) P_j(p) w_j(t).

``expand_at`` rewrites H around a fixed action p0 as

    e + omega.I + a(theta, t) + b(theta, t).I + I.m(theta, I, t).I

with m the Taylor remainder kernel and mbar its action-derivative companion,
so that the vector field of H in (theta, I) can be evaluated directly.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .decay_norms import (
    ParameterFamily,
    TailModel,
    TimeFamily,
    TimeGrid,
    family_norm,
    weighted_norm,
)
from .torus_fourier import CollocationGrid, TorusFun, differentiate, holder_parts

GAUSS_NODES = 16
_gl_x, _gl_w = np.polynomial.legendre.leggauss(GAUSS_NODES)
TAU = 0.5 * (_gl_x + 1.0)
TAU_WEIGHTS = 0.5 * _gl_w

INTEGRABLE_RADIUS = 0.75
EXPANSION_RADIUS = 0.25
MAX_DEGREE = 6


class DomainError(ValueError):
    pass


class Polynomial:
    """Real polynomial in p in R^n stored as {exponent tuple: coefficient}."""

    def __init__(self, terms: dict, n: int = 1):
        clean = {}
        for exps, c in dict(terms).items():
            exps = tuple(int(e) for e in np.atleast_1d(exps))
            if len(exps) != n or min(exps) < 0:
                raise ValueError(f"exponent {exps} does not fit dimension {n}")
            if c != 0:
                clean[exps] = clean.get(exps, 0.0) + float(c)
        self.terms = clean
        self.n = n
        if self.degree > MAX_DEGREE:
            raise ValueError(f"degree {self.degree} exceeds the cap {MAX_DEGREE}")

    @property
    def degree(self) -> int:
        return max((sum(e) for e in self.terms), default=0)

    @classmethod
    def constant(cls, value: float, n: int = 1) -> "Polynomial":
        return cls({(0,) * n: value}, n)

    def derivative(self, axis: int) -> "Polynomial":
        out = {}
        for exps, c in self.terms.items():
            if exps[axis] == 0:
                continue
            e = list(exps)
            e[axis] -= 1
            out[tuple(e)] = out.get(tuple(e), 0.0) + c * exps[axis]
        return Polynomial(out, self.n)

    def is_zero(self) -> bool:
        return not self.terms

    def __call__(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        out = np.zeros(p.shape[:-1])
        for exps, c in self.terms.items():
            term = np.full(p.shape[:-1], c)
            for i, e in enumerate(exps):
                if e:
                    term = term * p[..., i] ** e
            out = out + term
        return out

    def gradient_polys(self) -> list["Polynomial"]:
        return [self.derivative(i) for i in range(self.n)]

    def hessian_polys(self) -> list[list["Polynomial"]]:
        return [[d.derivative(j) for j in range(self.n)] for d in self.gradient_polys()]


def _stack_eval(polys, p) -> np.ndarray:
    return np.stack([q(p) for q in polys], axis=-1)


def _matrix_eval(polys, p) -> np.ndarray:
    return np.stack([np.stack([q(p) for q in row], axis=-1) for row in polys], axis=-2)


@dataclass(frozen=True)
class DecayProfile:
    """w(t) = 1/(1+|t|^exponent) or exp(-exponent |t|)."""

    kind: str = "poly"
    exponent: float = 4.0

    def __post_init__(self):
        if self.kind not in ("poly", "exp"):
            raise ValueError(f"unknown profile kind {self.kind!r}")

    def __call__(self, t) -> np.ndarray:
        t = np.abs(np.asarray(t, dtype=float))
        if self.kind == "poly":
            return 1.0 / (1.0 + t**self.exponent)
        return np.exp(-self.exponent * t)

    def supports_weight(self, weight_exponent: float) -> bool:
        return self.kind == "exp" or self.exponent >= weight_exponent

    @property
    def tail(self) -> TailModel:
        return TailModel(self.kind, self.exponent, 1.0)


@dataclass(frozen=True)
class SeparableMode:
    shape: TorusFun
    poly: Polynomial
    profile: DecayProfile

    def __post_init__(self):
        if self.shape.m != 1:
            raise ValueError("mode shapes are scalar torus functions")


@dataclass(frozen=True)
class Ball:
    center: np.ndarray
    radius: float

    def contains(self, p, closed: bool = True) -> np.ndarray:
        d = np.linalg.norm(np.asarray(p, dtype=float) - np.asarray(self.center, dtype=float), axis=-1)
        return d <= self.radius if closed else d < self.radius


@dataclass(frozen=True)
class BumpTerm:
    """amplitude * G(q) * (1 - |p-c|^2/r^2)^3 inside the open ball B(c, r), zero outside."""

    shape: TorusFun
    center: np.ndarray
    radius: float
    amplitude: float

    def _s(self, p):
        c = np.asarray(self.center, dtype=float)
        diff = np.asarray(p, dtype=float) - c
        return diff, np.sum(diff**2, axis=-1) / self.radius**2

    def profile(self, p) -> np.ndarray:
        _, s = self._s(p)
        return np.where(s < 1.0, self.amplitude * np.clip(1.0 - s, 0.0, None) ** 3, 0.0)

    def profile_gradient(self, p) -> np.ndarray:
        diff, s = self._s(p)
        one = np.clip(1.0 - s, 0.0, None)
        g = -6.0 * (one**2)[..., None] * diff / self.radius**2
        return self.amplitude * np.where((s < 1.0)[..., None], g, 0.0)

    def profile_hessian(self, p) -> np.ndarray:
        diff, s = self._s(p)
        one = np.clip(1.0 - s, 0.0, None)
        n = diff.shape[-1]
        outer = diff[..., :, None] * diff[..., None, :]
        H = 24.0 * one[..., None, None] * outer / self.radius**4 - 6.0 * (one**2)[..., None, None] * np.eye(n) / self.radius**2
        return self.amplitude * np.where((s < 1.0)[..., None, None], H, 0.0)


@dataclass
class _ShapeCache:
    """Mode shapes and their theta-gradients evaluated at a batch of points."""

    values: list
    grads: list


class HamiltonianModel:
    def __init__(self, n: int, h: Polynomial, modes: Sequence[SeparableMode] = (),
                 remainder: Sequence[BumpTerm] = (), flat_set: Sequence[Ball] | None = None,
                 l: float = 2.0, eps: float = 1e-3, upsilon: float = 2.0, delta: float = 0.02):
        if h.n != n:
            raise ValueError("integrable part has the wrong dimension")
        for mode in modes:
            if mode.shape.n != n or mode.poly.n != n:
                raise ValueError("mode dimension mismatch")
            if mode.poly.degree > MAX_DEGREE:
                raise ValueError("mode polynomial degree exceeds cap")
        if remainder and flat_set is None:
            raise ValueError("a remainder needs a declared flat set D")
        if l <= 1:
            raise ValueError("decay exponent l must exceed 1")
        self.n = n
        self.h = h
        self.modes = tuple(modes)
        self.remainder = tuple(remainder)
        self.flat_set = None if flat_set is None else tuple(flat_set)
        self.l = float(l)
        self.eps = float(eps)
        self.upsilon = float(upsilon)
        self.delta = float(delta)
        self._h_grad = h.gradient_polys()
        self._h_hess = h.hessian_polys()
        self._mode_grad = [m.poly.gradient_polys() for m in modes]
        self._mode_hess = [m.poly.hessian_polys() for m in modes]
        self._mode_dshape = [[differentiate(m.shape, a) for a in range(n)] for m in modes]
        self._bump_dshape = [[differentiate(b.shape, a) for a in range(n)] for b in self.remainder]

    @property
    def near_integrable(self) -> bool:
        return self.flat_set is not None

    @property
    def unperturbed(self) -> bool:
        return not self.modes and not self.remainder

    def with_modes(self, modes: Sequence[SeparableMode], eps: float | None = None) -> "HamiltonianModel":
        return HamiltonianModel(self.n, self.h, modes, self.remainder, self.flat_set, self.l,
                                self.eps if eps is None else eps, self.upsilon, self.delta)

    def scaled(self, factor: float) -> "HamiltonianModel":
        """Perturbation and smallness budget multiplied by ``factor``."""
        modes = [SeparableMode(m.shape * factor, m.poly, m.profile) for m in self.modes]
        return self.with_modes(modes, self.eps * factor)

    # -- admissible parameters ------------------------------------------------

    def in_flat_set(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        if self.flat_set is None:
            return np.ones(p.shape[:-1], dtype=bool)
        return np.any([b.contains(p) for b in self.flat_set], axis=0)

    def in_good_set(self, p) -> np.ndarray:
        """Integrable: open ball B_{3/4}. Near-integrable: D' = B_{1-delta} intersected with D."""
        p = np.atleast_1d(np.asarray(p, dtype=float))
        r = np.linalg.norm(p, axis=-1)
        if not self.near_integrable:
            return r < INTEGRABLE_RADIUS
        return (r <= 1.0 - self.delta) & self.in_flat_set(p)

    @property
    def expansion_radius(self) -> float:
        return self.delta if self.near_integrable else EXPANSION_RADIUS

    @property
    def parameter_radius(self) -> float:
        return 1.0 - self.delta if self.near_integrable else INTEGRABLE_RADIUS

    # -- evaluation -----------------------------------------------------------

    def _shapes(self, q, shapes, dshapes) -> _ShapeCache:
        vals = [s(q)[..., 0] for s in shapes]
        grads = [np.stack([d(q)[..., 0] for d in ds], axis=-1) for ds in dshapes]
        return _ShapeCache(vals, grads)

    def _mode_cache(self, q):
        return self._shapes(q, [m.shape for m in self.modes], self._mode_dshape)

    def _bump_cache(self, q):
        return self._shapes(q, [b.shape for b in self.remainder], self._bump_dshape)

    def H(self, q, p, t) -> np.ndarray:
        q, p = np.asarray(q, dtype=float), np.asarray(p, dtype=float)
        out = self.h(p)
        for mode, G in zip(self.modes, self._mode_cache(q).values):
            out = out + G * mode.poly(p) * mode.profile(t)
        for bump, G in zip(self.remainder, self._bump_cache(q).values):
            out = out + G * bump.profile(p)
        return out

    def perturbation(self, q, p, t) -> np.ndarray:
        q, p = np.asarray(q, dtype=float), np.asarray(p, dtype=float)
        out = np.zeros(np.broadcast_shapes(q.shape[:-1], p.shape[:-1], np.shape(t)))
        for mode, G in zip(self.modes, self._mode_cache(q).values):
            out = out + G * mode.poly(p) * mode.profile(t)
        return out

    def remainder_value(self, q, p) -> np.ndarray:
        q, p = np.asarray(q, dtype=float), np.asarray(p, dtype=float)
        out = np.zeros(np.broadcast_shapes(q.shape[:-1], p.shape[:-1]))
        for bump, G in zip(self.remainder, self._bump_cache(q).values):
            out = out + G * bump.profile(p)
        return out

    def remainder_gradient(self, q, p) -> np.ndarray:
        q, p = np.asarray(q, dtype=float), np.asarray(p, dtype=float)
        out = np.zeros(np.broadcast_shapes(q.shape[:-1], p.shape[:-1]) + (self.n,))
        for bump, G in zip(self.remainder, self._bump_cache(q).values):
            out = out + G[..., None] * bump.profile_gradient(p)
        return out

    def dH_dp(self, q, p, t) -> np.ndarray:
        q, p = np.asarray(q, dtype=float), np.asarray(p, dtype=float)
        out = _stack_eval(self._h_grad, p)
        for mode, grad, G in zip(self.modes, self._mode_grad, self._mode_cache(q).values):
            out = out + (G * mode.profile(t))[..., None] * _stack_eval(grad, p)
        return out + self.remainder_gradient(q, p)

    def dH_dq(self, q, p, t) -> np.ndarray:
        q, p = np.asarray(q, dtype=float), np.asarray(p, dtype=float)
        shape = np.broadcast_shapes(q.shape[:-1], p.shape[:-1], np.shape(t)) + (self.n,)
        out = np.zeros(shape)
        for mode, dG in zip(self.modes, self._mode_cache(q).grads):
            out = out + dG * (mode.poly(p) * mode.profile(t))[..., None]
        for bump, dG in zip(self.remainder, self._bump_cache(q).grads):
            out = out + dG * bump.profile(p)[..., None]
        return out

    def vector_field(self, q, p, t) -> tuple[np.ndarray, np.ndarray]:
        """(dq/dt, dp/dt) = (dH/dp, -dH/dq)."""
        return self.dH_dp(q, p, t), -self.dH_dq(q, p, t)

    def _hessian_parts(self, cache_m, cache_b, p, t, use_grads: bool):
        """Hessian in p (or its theta-gradient) at action points p of shape (..., n)."""
        if use_grads:
            out = 0.0
        else:
            out = _matrix_eval(self._h_hess, p)
        for k, (mode, hess) in enumerate(zip(self.modes, self._mode_hess)):
            if all(q.is_zero() for row in hess for q in row):
                continue
            Hp = _matrix_eval(hess, p)
            w = mode.profile(t)
            if use_grads:
                term = (cache_m.grads[k] * np.asarray(w)[..., None])[..., :, None, None] * Hp[..., None, :, :]
            else:
                term = (cache_m.values[k] * w)[..., None, None] * Hp
            out = out + term
        for k, bump in enumerate(self.remainder):
            Hp = bump.profile_hessian(p)
            if use_grads:
                term = cache_b.grads[k][..., :, None, None] * Hp[..., None, :, :]
            else:
                term = cache_b.values[k][..., None, None] * Hp
            out = out + term
        return out

    def hess_p(self, q, p, t) -> np.ndarray:
        q, p = np.asarray(q, dtype=float), np.asarray(p, dtype=float)
        H = self._hessian_parts(self._mode_cache(q), self._bump_cache(q), p, t, False)
        shape = np.broadcast_shapes(q.shape[:-1], p.shape[:-1], np.shape(t)) + (self.n, self.n)
        return np.broadcast_to(H, shape)

    def check_flat_set(self, samples: int = 1000, seed: int = 0) -> float:
        """Largest |R| or |d_p R| over random points of D (zero by construction)."""
        if not self.remainder:
            return 0.0
        rng = np.random.default_rng(seed)
        pts = []
        for ball in self.flat_set:
            c = np.asarray(ball.center, dtype=float)
            d = rng.normal(size=(samples, self.n))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            r = ball.radius * rng.random(samples) ** (1.0 / self.n)
            pts.append(c + d * r[:, None])
        p = np.concatenate(pts)
        q = rng.random(p.shape)
        val = np.abs(self.remainder_value(q, p)).max()
        grad = np.abs(self.remainder_gradient(q, p)).max()
        return float(max(val, grad))


# ---------------------------------------------------------------------------
# expansion around p0


class ExpandedHamiltonian:
    """Per-parameter data e, omega, a, b, m, mbar of the expansion around p0."""

    def __init__(self, model: HamiltonianModel, p0):
        p0 = np.atleast_1d(np.asarray(p0, dtype=float))
        if p0.shape != (model.n,):
            raise ValueError(f"p0 must have shape ({model.n},)")
        if not bool(model.in_good_set(p0)):
            where = "D' = B_{1-delta} cap D" if model.near_integrable else "B_{3/4}"
            raise DomainError(f"p0 = {p0.tolist()} lies outside the admissible set {where}")
        self.model = model
        self.p0 = p0
        self.n = model.n
        self.e = float(model.h(p0))
        self.omega = _stack_eval(model._h_grad, p0)
        self.radius = model.expansion_radius
        self._mode_p = [float(m.poly(p0)) for m in model.modes]
        self._mode_dp = [_stack_eval(g, p0) for g in model._mode_grad]
        self._bump_p = [float(b.profile(p0)) for b in model.remainder]
        self._bump_dp = [b.profile_gradient(p0) for b in model.remainder]

    # -- coefficient families ---------------------------------------------------

    def a_family(self, grid: TimeGrid, K: int, tail: TailModel | None = None) -> TimeFamily:
        return self._family(grid, K, "a", tail)

    def b_family(self, grid: TimeGrid, K: int, tail: TailModel | None = None) -> TimeFamily:
        return self._family(grid, K, "b", tail)

    def da_family(self, grid: TimeGrid, K: int, tail: TailModel | None = None) -> TimeFamily:
        """theta-gradient of a, range R^n."""
        return self._family(grid, K, "da", tail)

    def _family(self, grid: TimeGrid, K: int, kind: str, tail: TailModel | None) -> TimeFamily:
        n = self.n
        m = 1 if kind == "a" else n
        out = np.zeros((grid.size,) + (2 * K + 1,) * n + (m,), dtype=complex)

        def table(shape: TorusFun, value, gradient):
            if kind == "a":
                return shape.resized(K).coeffs * value
            if kind == "b":
                return shape.resized(K).coeffs * gradient
            parts = [differentiate(shape, ax).resized(K).coeffs[..., 0] for ax in range(n)]
            return np.stack(parts, axis=-1) * value

        lead = (slice(None),) + (None,) * (n + 1)
        for j, mode in enumerate(self.model.modes):
            w = mode.profile(grid.nodes)
            out += w[lead] * table(mode.shape, self._mode_p[j], self._mode_dp[j])[None]
        for j, bump in enumerate(self.model.remainder):
            out += table(bump.shape, self._bump_p[j], self._bump_dp[j])[None]
        return TimeFamily(grid, out, tail, n)

    # -- pointwise evaluators ---------------------------------------------------

    def _caches(self, theta):
        return self.model._mode_cache(theta), self.model._bump_cache(theta)

    def terms(self, theta, I, t, need=("a", "b", "da", "db", "mbar", "m", "dm")) -> dict:
        """All expansion terms at (theta, I, t) sharing one evaluation of the mode shapes.

        Shapes: a (...), b (..., n), da (..., n), db (..., n, n) with db[..., i, j] = d_theta_i b_j,
        mbar and m (..., n, n), dm (..., n) = d_theta (I.m.I).
        """
        theta = np.asarray(theta, dtype=float)
        I = np.asarray(I, dtype=float)
        t = np.asarray(t, dtype=float)
        cm, cb = self._caches(theta)
        model = self.model
        n = self.n
        base = np.broadcast_shapes(theta.shape[:-1], I.shape[:-1], t.shape)
        out = {}
        if "a" in need:
            a = np.zeros(base)
            for j, mode in enumerate(model.modes):
                a = a + cm.values[j] * self._mode_p[j] * mode.profile(t)
            for j in range(len(model.remainder)):
                a = a + cb.values[j] * self._bump_p[j]
            out["a"] = a
        if "b" in need:
            b = np.zeros(base + (n,))
            for j, mode in enumerate(model.modes):
                b = b + (cm.values[j] * mode.profile(t))[..., None] * self._mode_dp[j]
            for j in range(len(model.remainder)):
                b = b + cb.values[j][..., None] * self._bump_dp[j]
            out["b"] = b
        if "da" in need:
            da = np.zeros(base + (n,))
            for j, mode in enumerate(model.modes):
                da = da + cm.grads[j] * (self._mode_p[j] * mode.profile(t))[..., None]
            for j in range(len(model.remainder)):
                da = da + cb.grads[j] * self._bump_p[j]
            out["da"] = da
        if "db" in need:
            db = np.zeros(base + (n, n))
            for j, mode in enumerate(model.modes):
                db = db + (cm.grads[j] * np.asarray(mode.profile(t))[..., None])[..., :, None] * self._mode_dp[j]
            for j in range(len(model.remainder)):
                db = db + cb.grads[j][..., :, None] * self._bump_dp[j]
            out["db"] = db
        if {"mbar", "m", "dm"} & set(need):
            Ib = np.broadcast_to(I, base + (n,))
            P = self.p0 + TAU.reshape((-1,) + (1,) * Ib.ndim) * Ib[None]
            if "mbar" in need or "m" in need:
                Hs = model._hessian_parts(cm, cb, P, t, False)
                Hs = np.broadcast_to(Hs, (GAUSS_NODES,) + base + (n, n))
                wv = TAU_WEIGHTS.reshape((-1,) + (1,) * (len(base) + 2))
                if "mbar" in need:
                    out["mbar"] = np.sum(wv * Hs, axis=0)
                if "m" in need:
                    out["m"] = np.sum(wv * (1.0 - TAU).reshape(wv.shape) * Hs, axis=0)
            if "dm" in need:
                dH = model._hessian_parts(cm, cb, P, t, True)
                if np.ndim(dH) == 0:
                    out["dm"] = np.zeros(base + (n,))
                else:
                    dH = np.broadcast_to(dH, (GAUSS_NODES,) + base + (n, n, n))
                    wv = (TAU_WEIGHTS * (1.0 - TAU)).reshape((-1,) + (1,) * (len(base) + 3))
                    dm = np.sum(wv * dH, axis=0)
                    out["dm"] = np.einsum("...kij,...i,...j->...k", dm, Ib, Ib)
        return out

    def mbar0(self, theta, t) -> np.ndarray:
        """mbar at I = 0, i.e. the p-Hessian of H at p0."""
        theta = np.asarray(theta, dtype=float)
        return self.model.hess_p(theta, np.broadcast_to(self.p0, theta.shape[:-1] + (self.n,)), t)

    def reconstruct(self, theta, I, t) -> np.ndarray:
        T = self.terms(theta, I, t, need=("a", "b", "m"))
        I = np.asarray(I, dtype=float)
        return (self.e + I @ self.omega + T["a"] + np.sum(T["b"] * I, axis=-1)
                + np.einsum("...i,...ij,...j->...", I, T["m"], I))

    def H(self, theta, I, t) -> np.ndarray:
        I = np.asarray(I, dtype=float)
        return self.model.H(theta, self.p0 + I, t)

    def check_action(self, I) -> None:
        r = float(np.max(np.linalg.norm(np.asarray(I, dtype=float).reshape(-1, self.n), axis=-1), initial=0.0))
        if r >= self.radius:
            raise DomainError(f"|I| = {r:.4g} leaves the expansion ball of radius {self.radius:.4g}")


def expand_at(model: HamiltonianModel, p0) -> ExpandedHamiltonian:
    return ExpandedHamiltonian(model, p0)


def eval_XH(exp: ExpandedHamiltonian, theta, I, t) -> tuple[np.ndarray, np.ndarray]:
    """(dtheta/dt, dI/dt) = (omega + b + mbar I, -d_theta a - d_theta b.I - d_theta(m I^2))."""
    exp.check_action(I)
    I = np.asarray(I, dtype=float)
    T = exp.terms(theta, I, t, need=("b", "da", "db", "mbar", "dm"))
    dtheta = exp.omega + T["b"] + np.einsum("...ij,...j->...i", T["mbar"], I)
    dI = -(T["da"] + np.einsum("...ij,...j->...i", T["db"], I) + T["dm"])
    return dtheta, dI


def eval_Xh_tilde(exp: ExpandedHamiltonian, theta, I, t) -> tuple[np.ndarray, np.ndarray]:
    """Vector field of e + omega.I + m I^2, which keeps {I = 0} invariant with frequency omega."""
    exp.check_action(I)
    I = np.asarray(I, dtype=float)
    T = exp.terms(theta, I, t, need=("mbar", "dm"))
    dtheta = exp.omega + np.einsum("...ij,...j->...i", T["mbar"], I)
    return dtheta, -T["dm"]


# ---------------------------------------------------------------------------
# hypothesis check


@dataclass
class DecayBudgetReport:
    norms: dict
    total: float
    eps: float
    passed: bool
    violations: list = field(default_factory=list)
    hessian_bound: float = 0.0
    mixed_derivative_bound: float = 0.0
    upsilon: float = 0.0
    notes: list = field(default_factory=list)


def _parameter_samples(n: int, count: int) -> np.ndarray:
    axis = np.linspace(-1.0, 1.0, count)
    pts = np.array(list(itertools.product(axis, repeat=n)))
    return pts[np.linalg.norm(pts, axis=1) <= 1.0 + 1e-12]


def _mode_family(model: HamiltonianModel, grid: TimeGrid, K: int, p, kind: str) -> TimeFamily:
    """Families of f, grad_p f or Hess_p f at parameter p, flattened along the range axis."""
    n = model.n
    blocks = []
    for mode in model.modes:
        if kind == "f":
            coef = np.array([float(mode.poly(p))])
        elif kind == "dp":
            coef = _stack_eval(mode.poly.gradient_polys(), p)
        else:
            coef = _matrix_eval(mode.poly.hessian_polys(), p).ravel()
        table = mode.shape.resized(K).coeffs * coef
        blocks.append(mode.profile(grid.nodes)[(slice(None),) + (None,) * (n + 1)] * table[None])
    m = {"f": 1, "dp": n, "hess": n * n}[kind]
    values = np.sum(blocks, axis=0) if blocks else np.zeros((grid.size,) + (2 * K + 1,) * n + (m,), dtype=complex)
    return TimeFamily(grid, values, None, n)


def check_decay_budget(model: HamiltonianModel, sigma: float = 1.0, K: int | None = None,
                       param_count: int = 9, grid: TimeGrid | None = None) -> DecayBudgetReport:
    """Evaluate |f|_{s+2,0} + ||d_q f||_{s,1,l+2} + ||d_p f||_{s,2,l+1} against eps, and the Hessian bound."""
    n, l = model.n, model.l
    K = K if K is not None else max([m.shape.K for m in model.modes] + [b.shape.K for b in model.remainder] + [1])
    grid = grid or TimeGrid.geometric(1e4, first_step=0.01, ratio=1.05)
    params = _parameter_samples(n, param_count)
    f_members, f_dp, fq_members, fq_dp, fp_members, fp_dp = [], [], [], [], [], []
    for p in params:
        f = _mode_family(model, grid, K, p, "f")
        dp = _mode_family(model, grid, K, p, "dp")
        hp = _mode_family(model, grid, K, p, "hess")
        f_members.append(f)
        f_dp.append(dp)
        fq_members.append(_grad_theta(f))
        fq_dp.append(_grad_theta(dp))
        fp_members.append(dp)
        fp_dp.append(hp)
    fam_f = ParameterFamily(params, tuple(f_members), tuple(f_dp))
    fam_q = ParameterFamily(params, tuple(fq_members), tuple(fq_dp))
    fam_p = ParameterFamily(params, tuple(fp_members), tuple(fp_dp))
    norms = {
        "|f|_{sigma+2,0}": weighted_norm(fam_f, sigma + 2, 0).total,
        "||d_q f||_{sigma,1,l+2}": family_norm(fam_q, sigma, 1, l + 2),
        "||d_p f||_{sigma,2,l+1}": family_norm(fam_p, sigma, 2, l + 1),
    }
    total = float(sum(norms.values()))
    violations = []
    for mode in model.modes:
        varies_q = np.abs(mode.shape.coeffs).sum() - abs(mode.shape.coeffs[(mode.shape.K,) * n + (0,)]) > 0
        varies_p = any(not g.is_zero() for g in mode.poly.gradient_polys())
        if varies_q and not mode.profile.supports_weight(l + 2):
            violations.append(f"||d_q f||_{{sigma,1,l+2}}: decay exponent {mode.profile.exponent:g} < weight {l + 2:g}")
        if varies_p and not mode.profile.supports_weight(l + 1):
            violations.append(f"||d_p f||_{{sigma,2,l+1}}: decay exponent {mode.profile.exponent:g} < weight {l + 1:g}")
    if total >= model.eps:
        violations.append(f"smallness: norm sum {total:.4g} >= eps {model.eps:.4g}")
    hess_bound, mixed = _hessian_bounds(model, grid, K, params, sigma)
    if hess_bound > model.upsilon:
        violations.append(f"Hessian bound: {hess_bound:.4g} > Upsilon {model.upsilon:.4g}")
    if mixed > model.upsilon:
        violations.append(f"mixed derivative bound (i <= 2): {mixed:.4g} > Upsilon {model.upsilon:.4g}")
    notes = ["mixed theta/action derivatives of the Hessian are checked up to order 2 in every mode"]
    return DecayBudgetReport(norms, total, model.eps, not violations, violations, hess_bound, mixed,
                             model.upsilon, notes)


def _grad_theta(f: TimeFamily) -> TimeFamily:
    from .torus_fourier import differentiate_coeffs

    parts = [differentiate_coeffs(f.values, f.n, a) for a in range(f.n)]
    return f.with_values(np.concatenate(parts, axis=-1))


def _hessian_bounds(model, grid, K, params, sigma):
    """sup_t of the C^{sigma+2} surrogate of Hess_p H, and of its mixed derivatives up to order 2."""
    n = model.n
    N = CollocationGrid.for_order(K, n).N
    cg = CollocationGrid(N, n)
    theta = cg.points()
    times = grid.nodes[:: max(1, grid.size // 60)]
    best = 0.0
    mixed = 0.0
    step = 1e-4
    for p in params:
        for t in times:
            P = np.broadcast_to(p, theta.shape)
            Hs = model.hess_p(theta, P, t).reshape(len(theta), n * n)
            from .torus_fourier import analyze_samples

            coeffs = analyze_samples(Hs, K, N, n)
            best = max(best, float(holder_parts(coeffs, sigma + 2, N, n)))
            mixed = max(mixed, float(holder_parts(coeffs, 2, N, n)))
            for a in range(n):
                dp = np.zeros(n)
                dp[a] = step
                Hplus = model.hess_p(theta, P + dp, t).reshape(len(theta), n * n)
                Hminus = model.hess_p(theta, P - dp, t).reshape(len(theta), n * n)
                first = (Hplus - Hminus) / (2 * step)
                second = (Hplus - 2 * Hs + Hminus) / step**2
                c1 = analyze_samples(first, K, N, n)
                mixed = max(mixed, float(holder_parts(c1, 1, N, n)), float(np.abs(second).max()))
    return best, mixed


# ---------------------------------------------------------------------------
# stock models


def reference_model(eps: float = 1e-3, l: float = 2.0, decay: float = 4.0, drift: float = 0.0,
                    delta: float = 0.02) -> HamiltonianModel:
    """h = p^2/2, f = eps cos(2 pi q) p w(t) with w = 1/(1+t^decay).

    A nonzero ``drift`` adds the angle-independent term drift * eps * p/(1+|t|^(l+1)),
    whose corrections decay exactly like t^-l.
    """
    h = Polynomial({(2,): 0.5}, 1)
    p_lin = Polynomial({(1,): 1.0}, 1)
    modes = [SeparableMode(TorusFun.from_trig([((1,), eps, 0.0)], 1, K=1), p_lin, DecayProfile("poly", decay))]
    if drift:
        modes.append(SeparableMode(TorusFun.constant(drift * eps, 1), p_lin, DecayProfile("poly", l + 1.0)))
    return HamiltonianModel(1, h, modes, l=l, eps=eps, delta=delta)


def near_integrable_model(eps: float = 1e-3, hole_center: float = 0.3, hole_measure: float = 0.02,
                          amplitude: float = 1e-3, l: float = 2.0, delta: float = 0.02) -> HamiltonianModel:
    """Reference perturbation plus a remainder supported in one gap of B_1 = [-1, 1].

    The gap has relative measure ``hole_measure``; D is the two closed intervals around it.
    """
    base = reference_model(eps, l, delta=delta)
    half = hole_measure  # gap length 2*hole_measure inside an interval of length 2
    lo, hi = hole_center - half, hole_center + half
    if not (-1.0 < lo < hi < 1.0):
        raise ValueError("gap must lie inside B_1")
    flat = [Ball(np.array([(-1.0 + lo) / 2]), (lo + 1.0) / 2), Ball(np.array([(hi + 1.0) / 2]), (1.0 - hi) / 2)]
    bump = BumpTerm(TorusFun.from_trig([((1,), 1.0, 0.0)], 1, K=1), np.array([hole_center]), half, amplitude)
    return HamiltonianModel(1, base.h, base.modes, [bump], flat, l=l, eps=eps, upsilon=base.upsilon, delta=delta)
