"""Time grids, decaying time families and the weighted norms that measure them.

A ``TimeFamily`` stores one Fourier coefficient table per time node in a single
array of shape ``(M, (2K+1,)*n, m)``. Norms are sups over nodes of the Hölder
surrogate times the polynomial weight 1 + |t|^l, plus a parameter-derivative
part weighted by 1 + |t|^(l-1).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, optimize

from .torus_fourier import (
    CollocationGrid,
    TorusFun,
    differentiate_coeffs,
    holder_parts,
    _direct_samples,
)


class DivergentIntegralError(ValueError):
    pass


class MissingParameterDataError(ValueError):
    pass


class LipschitzViolationError(ValueError):
    def __init__(self, i: int, j: int, quotient: float, L: float):
        super().__init__(f"samples {i} and {j} have difference quotient {quotient:.6g} > L = {L:.6g}")
        self.pair = (i, j)
        self.quotient = quotient


# ---------------------------------------------------------------------------
# grids and tails


@dataclass(frozen=True)
class TimeGrid:
    """Monotone nodes 0 = t_0, ..., t_M on one side of the time axis."""

    branch: int
    nodes: np.ndarray

    def __post_init__(self):
        if self.branch not in (1, -1):
            raise ValueError("branch must be +1 or -1")
        t = np.asarray(self.nodes, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("a time grid needs at least two nodes")
        if t[0] != 0.0:
            raise ValueError("time grids start at t = 0")
        steps = np.diff(self.branch * t)
        if np.any(steps <= 0):
            raise ValueError("nodes must be strictly monotone in the branch direction")
        ratios = steps[1:] / steps[:-1]
        if ratios.size and (ratios.min() < 1.0 - 1e-9 or ratios.max() > 4.0 + 1e-9):
            raise ValueError("consecutive spacing ratio must stay within [1, 4]")
        t = t.copy()
        t.setflags(write=False)
        object.__setattr__(self, "nodes", t)

    @property
    def horizon(self) -> float:
        return float(abs(self.nodes[-1]))

    @property
    def size(self) -> int:
        return self.nodes.size

    @property
    def abs_nodes(self) -> np.ndarray:
        return np.abs(self.nodes)

    @classmethod
    def geometric(cls, horizon: float, first_step: float = 0.005, ratio: float = 1.01, branch: int = 1) -> "TimeGrid":
        """Steps first_step * ratio**j until the horizon is reached or passed."""
        if horizon <= 0 or first_step <= 0:
            raise ValueError("horizon and first step must be positive")
        if not 1.0 <= ratio <= 4.0:
            raise ValueError("ratio must lie in [1, 4]")
        if ratio == 1.0:
            count = int(math.ceil(horizon / first_step))
        else:
            count = int(math.ceil(math.log1p(horizon * (ratio - 1.0) / first_step) / math.log(ratio)))
        steps = first_step * ratio ** np.arange(max(count, 1))
        nodes = np.concatenate([[0.0], np.cumsum(steps)])
        return cls(branch, branch * nodes)

    @classmethod
    def with_count(cls, count: int, horizon: float, first_step: float = 0.05, branch: int = 1) -> "TimeGrid":
        """Geometric grid with exactly ``count`` nodes ending at ``horizon``."""
        intervals = count - 1
        if intervals < 1:
            raise ValueError("need at least two nodes")
        if first_step * intervals >= horizon:
            ratio = 1.0
            first_step = horizon / intervals
        else:
            span = lambda r: first_step * (r**intervals - 1.0) / (r - 1.0) - horizon
            ratio = optimize.brentq(span, 1.0 + 1e-12, 4.0)
        steps = first_step * ratio ** np.arange(intervals)
        nodes = np.concatenate([[0.0], np.cumsum(steps)])
        nodes[-1] = horizon if ratio > 1.0 else nodes[-1]
        return cls(branch, branch * nodes)

    def mirrored(self) -> "TimeGrid":
        return TimeGrid(-self.branch, -self.nodes)


@dataclass(frozen=True)
class TailModel:
    """Declared decay beyond the horizon: |f^t| <= c/(1+|t|^exponent) or c e^{-exponent |t|}."""

    kind: str = "poly"
    exponent: float = 2.0
    constant: float = 1.0

    def __post_init__(self):
        if self.kind not in ("poly", "exp"):
            raise ValueError(f"unknown tail kind {self.kind!r}")

    def envelope(self, t) -> np.ndarray:
        t = np.abs(np.asarray(t, dtype=float))
        if self.kind == "poly":
            return self.constant / (1.0 + t**self.exponent)
        return self.constant * np.exp(-self.exponent * t)

    def integral_beyond(self, T: float) -> float:
        """Bound for the integral of the envelope over [T, inf)."""
        if self.kind == "exp":
            return self.constant * math.exp(-self.exponent * T) / self.exponent
        if self.exponent <= 1:
            return math.inf
        return self.constant * tail_integral(self.exponent, 0.0, T)

    def scaled(self, constant: float) -> "TailModel":
        return TailModel(self.kind, self.exponent, constant)


def horizon_for_tail(tail: TailModel, rel_tol: float = 1e-10) -> float:
    """Smallest horizon with integral of the unit-constant envelope beyond it below rel_tol."""
    unit = tail.scaled(1.0)
    if tail.kind == "exp":
        return max(1.0, math.log(1.0 / (tail.exponent * rel_tol)) / tail.exponent)
    if tail.exponent <= 1:
        raise DivergentIntegralError("polynomial tail with exponent <= 1 is not integrable")
    return optimize.brentq(lambda T: math.log(unit.integral_beyond(T)) - math.log(rel_tol), 1.0, 1e16)


def weight(t, l: float) -> np.ndarray:
    """1 + |t|^l, with unit weight for l = 0."""
    t = np.abs(np.asarray(t, dtype=float))
    if l == 0:
        return np.ones_like(t)
    return 1.0 + t**l


def derivative_weight(t, l: float) -> np.ndarray:
    t = np.abs(np.asarray(t, dtype=float))
    if l == 0:
        return np.ones_like(t)
    return 1.0 + t ** (l - 1.0)


# ---------------------------------------------------------------------------
# families


class TimeFamily:
    """One torus function per node of a time grid, with a declared tail."""

    __slots__ = ("grid", "_values", "tail", "n")

    def __init__(self, grid: TimeGrid, values, tail: TailModel | None = None, n: int = 1):
        v = np.array(values, dtype=complex)
        if v.shape[0] != grid.size:
            raise ValueError(f"{v.shape[0]} slices for a grid of {grid.size} nodes")
        if v.ndim != n + 2:
            raise ValueError("values must have shape (M, (2K+1,)*n, m)")
        v.setflags(write=False)
        self.grid = grid
        self._values = v
        self.tail = tail if tail is not None else TailModel()
        self.n = n

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def K(self) -> int:
        return (self._values.shape[1] - 1) // 2

    @property
    def m(self) -> int:
        return self._values.shape[-1]

    @property
    def times(self) -> np.ndarray:
        return self.grid.nodes

    def slice(self, j: int) -> TorusFun:
        return TorusFun(self._values[j])

    @property
    def slices(self) -> tuple[TorusFun, ...]:
        return tuple(TorusFun(v) for v in self._values)

    @classmethod
    def from_function(cls, grid: TimeGrid, fn: Callable[[np.ndarray, np.ndarray], np.ndarray], K: int,
                      m: int = 1, n: int = 1, tail: TailModel | None = None) -> "TimeFamily":
        """Sample fn(theta_points (P, n), t) -> (P, m) on a collocation grid and analyze."""
        from .torus_fourier import analyze_samples

        cg = CollocationGrid.for_order(K, n)
        pts = cg.points()
        samples = np.stack([np.asarray(fn(pts, t), dtype=float).reshape(len(pts), m) for t in grid.nodes])
        return cls(grid, analyze_samples(samples, K, cg.N, n), tail, n)

    @classmethod
    def separable(cls, grid: TimeGrid, shape: TorusFun, profile: Callable[[np.ndarray], np.ndarray],
                  tail: TailModel | None = None) -> "TimeFamily":
        """f(theta, t) = shape(theta) * profile(t)."""
        prof = np.asarray(profile(grid.nodes), dtype=float)
        return cls(grid, prof[(slice(None),) + (None,) * (shape.n + 1)] * shape.coeffs[None], tail, shape.n)

    def with_values(self, values, tail: TailModel | None = None) -> "TimeFamily":
        return TimeFamily(self.grid, values, self.tail if tail is None else tail, self.n)

    def derivative(self, axis: int = 0) -> "TimeFamily":
        return self.with_values(differentiate_coeffs(self._values, self.n, axis))

    def __add__(self, other: "TimeFamily") -> "TimeFamily":
        return self.with_values(self._values + other._values)

    def __sub__(self, other: "TimeFamily") -> "TimeFamily":
        return self.with_values(self._values - other._values)

    def __mul__(self, scalar: float) -> "TimeFamily":
        return self.with_values(self._values * scalar)

    __rmul__ = __mul__

    def sup_norms(self, N: int | None = None) -> np.ndarray:
        """Per-node sup over a collocation grid (max over range components)."""
        N = N or CollocationGrid.for_order(self.K, self.n).N
        return np.abs(_direct_samples(self._values, N, self.n)).max(axis=(-2, -1))

    def tail_consistent(self, factor: float = 4.0) -> bool:
        """Last three slices lie under factor * declared envelope."""
        t = self.grid.nodes[-3:]
        return bool(np.all(self.sup_norms()[-3:] <= factor * self.tail.envelope(t) + 1e-300))


@dataclass(frozen=True)
class ParameterFamily:
    """Time families indexed by a finite parameter set, optionally with d/dp slices.

    ``dp_members[i]`` stacks the partial derivatives in p along the range axis.
    """

    params: np.ndarray
    members: tuple
    dp_members: tuple | None = None

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.params, dtype=float))
        if p.shape[0] == 1 and len(self.members) > 1:
            p = p.T
        object.__setattr__(self, "params", p)
        if len(self.members) != p.shape[0]:
            raise ValueError("one member per parameter point")


FamilyLike = TimeFamily | ParameterFamily


@dataclass(frozen=True)
class WeightedNorm:
    sigma: float
    l: float
    c0_part: float
    dp_part: float
    total: float
    tail_violation: bool = False
    dp_source: str = "none"


def _weighted_sup(values: np.ndarray, times: np.ndarray, sigma: float, w: np.ndarray, n: int) -> float:
    K = (values.shape[1] - 1) // 2
    N = CollocationGrid.for_order(K, n).N
    return float(np.max(holder_parts(values, sigma, N, n) * w, initial=0.0))


def _tail_exceeded(tail: TailModel, l: float) -> bool:
    return tail.kind == "poly" and l > tail.exponent


def weighted_norm(f: FamilyLike, sigma: float, l: float) -> WeightedNorm:
    """sup |f^t_p|_{C^sigma}(1+|t|^l) + sup |d_p f^t_p|_{C^0}(1+|t|^(l-1)), unit weights at l = 0."""
    if not (l == 0 or l >= 1):
        raise ValueError("weights need l = 0 or l >= 1")
    if isinstance(f, TimeFamily):
        members, dp, params = (f,), None, None
        dp_source = "parameter-independent"
    else:
        members, dp, params = f.members, f.dp_members, f.params
        dp_source = "analytic" if dp is not None else "difference"
        if dp is None and len(members) < 2:
            raise MissingParameterDataError("parameter-derivative part needs d/dp slices or at least two parameter points")
    c0 = 0.0
    violation = False
    for member in members:
        t = member.grid.nodes
        c0 = max(c0, _weighted_sup(member.values, t, sigma, weight(t, l), member.n))
        violation |= _tail_exceeded(member.tail, l)
    dp_part = 0.0
    if dp is not None:
        for member in dp:
            t = member.grid.nodes
            dp_part = max(dp_part, _weighted_sup(member.values, t, 0.0, derivative_weight(t, l), member.n))
    elif params is not None:
        dp_part = _difference_part(params, members, l, pairs="neighbours")
    return WeightedNorm(sigma, l, c0, dp_part, c0 + dp_part, violation, dp_source)


def _difference_part(params: np.ndarray, members: Sequence[TimeFamily], l: float, pairs: str) -> float:
    """Max over parameter pairs of sup_t |f(x) - f(y)|_C0 / |x - y| * (1+|t|^(l-1))."""
    P = len(members)
    if pairs == "neighbours":
        order = np.lexsort(params.T[::-1])
        idx = [(order[i], order[i + 1]) for i in range(P - 1)]
    else:
        idx = [(i, j) for i in range(P) for j in range(i + 1, P)]
    best = 0.0
    for i, j in idx:
        a, b = members[i], members[j]
        dist = float(np.linalg.norm(params[i] - params[j]))
        if dist == 0.0:
            continue
        diff = a.with_values(a.values - b.values)
        w = derivative_weight(a.grid.nodes, l)
        best = max(best, float(np.max(diff.sup_norms() * w)) / dist)
    return best


def family_norm(f: FamilyLike, sigma: float, k: int, l: float) -> float:
    """max over 0 <= i <= k of the weighted norm of the i-th theta derivatives at order sigma + k - i."""
    if not 0 <= k <= 3:
        raise ValueError("family norms are defined here for 0 <= k <= 3")
    best = 0.0
    for i in range(k + 1):
        best = max(best, weighted_norm(theta_derivatives(f, i), sigma + k - i, l).total)
    return best


def theta_derivatives(f: FamilyLike, order: int) -> FamilyLike:
    """Stack all order-th partial theta derivatives along the range axis."""
    if isinstance(f, ParameterFamily):
        members = tuple(theta_derivatives(m, order) for m in f.members)
        dp = None if f.dp_members is None else tuple(theta_derivatives(m, order) for m in f.dp_members)
        return ParameterFamily(f.params, members, dp)
    if order == 0:
        return f
    from .torus_fourier import _multi_indices

    parts = []
    for alpha in _multi_indices(order, f.n):
        c = f.values
        for axis, times in enumerate(alpha):
            for _ in range(times):
                c = differentiate_coeffs(c, f.n, axis)
        parts.append(c)
    return f.with_values(np.concatenate(parts, axis=-1))


def lipschitz_param_norm(f: ParameterFamily, sigma: float, l: float) -> float:
    """Hölder part plus the pairwise Lipschitz quotient over the parameter set."""
    if not isinstance(f, ParameterFamily) or len(f.members) < 2:
        raise MissingParameterDataError("Lipschitz quotient needs at least two parameter points")
    c0 = 0.0
    for member in f.members:
        t = member.grid.nodes
        c0 = max(c0, _weighted_sup(member.values, t, sigma, weight(t, l), member.n))
    return c0 + _difference_part(f.params, f.members, l, pairs="all")


def lipschitz_part(f: ParameterFamily, l: float) -> float:
    if len(f.members) < 2:
        raise MissingParameterDataError("Lipschitz quotient needs at least two parameter points")
    return _difference_part(f.params, f.members, l, pairs="all")


# ---------------------------------------------------------------------------
# tail integrals


def _series_tail(p: float, s: float, X: float) -> float:
    """Integral over [X, inf) of tau^s/(1+tau^p) for X >= 2 by the alternating series."""
    total = 0.0
    for j in range(200):
        e = p * (j + 1) - s - 1.0
        term = X ** (-e) / e
        total += term if j % 2 == 0 else -term
        if abs(term) < 1e-18 * abs(total):
            break
    return total


def tail_integral(p: float, s: float, t: float) -> float:
    """Integral over [t, inf) of tau^s/(1+tau^p), t >= 0, requiring p > s + 1."""
    if p <= s + 1:
        raise DivergentIntegralError(f"integral of tau^{s}/(1+tau^{p}) diverges")
    X = max(t, 2.0)
    head = 0.0
    if t < X:
        head, _ = integrate.quad(lambda x: x**s / (1.0 + x**p), t, X, epsabs=0.0, epsrel=1e-13, limit=200)
    return head + _series_tail(p, s, X)


def tail_bound_f(m: float, t: float) -> float:
    """(1 + t^(m-1)) * integral_t^inf dtau/(1+tau^m); tends to 1/(m-1)."""
    if m <= 1:
        raise DivergentIntegralError(f"m = {m} <= 1: integral of 1/(1+tau^m) diverges")
    if t < 0:
        raise ValueError("t must be nonnegative")
    return (1.0 + t ** (m - 1.0)) * tail_integral(m, 0.0, t)


def tail_bound_g(m: float, t: float) -> float:
    """(1 + t^(m-1)) * integral_t^inf (tau - t)/(1+tau^(m+1)) dtau; tends to 1/(m(m-1))."""
    if m <= 1:
        raise DivergentIntegralError(f"m = {m} <= 1: integral of (tau-t)/(1+tau^(m+1)) diverges")
    if t < 0:
        raise ValueError("t must be nonnegative")
    inner = tail_integral(m + 1.0, 1.0, t) - t * tail_integral(m + 1.0, 0.0, t)
    return (1.0 + t ** (m - 1.0)) * inner


# ---------------------------------------------------------------------------
# Lipschitz extension


@dataclass(frozen=True)
class McShaneExtension:
    points: np.ndarray
    values: np.ndarray
    L: float

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        d = self.points.shape[1]
        flat = x.reshape(-1, d)
        dist = np.linalg.norm(flat[:, None, :] - self.points[None, :, :], axis=-1)
        cones = self.values[None, :, :] + self.L * dist[:, :, None]
        out = cones.min(axis=1)
        return out.reshape(x.shape[:-1] + (self.values.shape[1],))


def mcshane_extend(points, values, L: float, rtol: float = 1e-12) -> McShaneExtension:
    """x -> min_y (value(y) + L |x - y|), after checking the data are L-Lipschitz."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    vals = np.asarray(values, dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    if len(pts) != len(vals) or len(pts) == 0:
        raise ValueError("need matching, nonempty points and values")
    if L < 0:
        raise ValueError("Lipschitz constant must be nonnegative")
    dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    gap = np.abs(vals[:, None, :] - vals[None, :, :]).max(axis=-1)
    excess = gap - L * dist * (1.0 + rtol) - 1e-15 * (1.0 + np.abs(vals).max())
    if np.any(excess > 0):
        i, j = np.unravel_index(np.argmax(excess), excess.shape)
        raise LipschitzViolationError(int(i), int(j), float(gap[i, j] / max(dist[i, j], 1e-300)), L)
    return McShaneExtension(pts, vals, float(L))


def lipschitz_constant(points, values) -> float:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    vals = np.asarray(values, dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    gap = np.abs(vals[:, None, :] - vals[None, :, :]).max(axis=-1)
    mask = dist > 0
    return float(np.max(gap[mask] / dist[mask], initial=0.0))
