"""Orbits that follow one quasiperiodic torus in the past and another in the future.

A target (q, p) at t = 0 is pulled back through the time-zero embedding of each
branch; the two preimages give the asymptotic phases and frequencies.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .decay_norms import TimeGrid, lipschitz_constant, mcshane_extend
from .flow import conjugacy_check, integrate, torus_point
from .hamiltonian import DomainError, ExpandedHamiltonian, HamiltonianModel, expand_at
from .torus_fourier import TWO_PI, CollocationGrid, evaluate_coeffs, synthesize_coeffs, wave_vectors
from .torus_solver import (
    AsymptoticTorusFamily,
    SolverSettings,
    TorusCorrection,
    c1_deviation,
    chord_iterate,
    solve_family,
    solver_grid,
)

INVERSION_TOL = 1e-10
MAX_INVERSION_STEPS = 40
TARGET_RADIUS = 0.5


class NotCoveredError(ValueError):
    def __init__(self, message: str, branch: int | None = None, margin: float = 0.0):
        super().__init__(message)
        self.branch = branch
        self.margin = margin


class GlueError(RuntimeError):
    def __init__(self, message: str, branch: int):
        super().__init__(message)
        self.branch = branch


def _wrap(d: np.ndarray) -> np.ndarray:
    return d - np.round(d)


# ---------------------------------------------------------------------------
# time-zero maps


class TimeZeroMap:
    """(q, p0) -> psi^0(q; p0) for one branch.

    ``resolve`` mode solves the torus at every requested p0 (integrable case);
    ``extension`` mode uses tori on a fixed parameter grid and extends them to
    other p0 by the Lipschitz inf-convolution (near-integrable case).
    """

    def __init__(self, model: HamiltonianModel, branch: int, settings: SolverSettings = SolverSettings(),
                 family: AsymptoticTorusFamily | None = None, safety: float = 1.5):
        self.model = model
        self.branch = branch
        self.settings = settings
        self.family = family
        self.grid: TimeGrid = solver_grid(model, branch, settings)
        self._cache: dict[bytes, tuple[ExpandedHamiltonian, TorusCorrection]] = {}
        self._last: TorusCorrection | None = None
        self._resolver: TimeZeroMap | None = None
        if family is not None:
            self._prepare_extension(family, safety)

    @property
    def mode(self) -> str:
        return "resolve" if self.family is None else "extension"

    # -- resolve mode ----------------------------------------------------------

    def torus(self, p0) -> tuple[ExpandedHamiltonian, TorusCorrection]:
        p0 = np.atleast_1d(np.asarray(p0, dtype=float))
        key = p0.tobytes()
        hit = self._cache.get(key)
        if hit is None:
            exp = expand_at(self.model, p0)
            corr, _ = chord_iterate(exp, self.branch, self.settings.tol, self.settings.max_iter,
                                    self.settings, self.grid, self._last)
            self._last = corr
            hit = (exp, corr)
            self._cache[key] = hit
        return hit

    # -- extension mode --------------------------------------------------------

    def _prepare_extension(self, family: AsymptoticTorusFamily, safety: float) -> None:
        if family.branch != self.branch:
            raise ValueError("family branch does not match")
        n = self.model.n
        self.points = np.asarray(family.param_grid, dtype=float)
        # time-zero coefficients of (u, v), shape (G, modes, 2n)
        self.coeffs = np.stack([np.concatenate([c.u.values[0], c.v.values[0]], axis=-1)
                                for c in family.corrections])
        N = CollocationGrid.for_order(family.corrections[0].K, n).N
        samples = synthesize_coeffs(self.coeffs, N, n)  # (G, N^n, 2n)
        per_theta = np.transpose(samples, (1, 0, 2))
        L = max((lipschitz_constant(self.points, s) for s in per_theta), default=0.0)
        self.lipschitz = safety * L
        for s in per_theta:
            mcshane_extend(self.points, s, self.lipschitz)
        self.omega_table = np.asarray(family.omega_of_p0, dtype=float)

    def extended(self, q: np.ndarray, p0: np.ndarray) -> np.ndarray:
        """Batched (u, v) at t = 0 for angles q (S, n) and parameters p0 (S, n)."""
        vals = self._values_at(q)  # (S, G, 2n)
        dist = np.linalg.norm(p0[:, None, :] - self.points[None, :, :], axis=-1)
        return (vals + self.lipschitz * dist[:, :, None]).min(axis=1)

    def _values_at(self, q: np.ndarray) -> np.ndarray:
        n = self.model.n
        K = (self.coeffs.shape[1] - 1) // 2
        k = wave_vectors(n, K).reshape(-1, n)
        phase = np.exp(TWO_PI * 1j * (q @ k.T))  # (S, modes)
        flat = self.coeffs.reshape(len(self.coeffs), -1, self.coeffs.shape[-1])
        return np.einsum("sk,gkc->sgc", phase, flat).real

    def resolver(self) -> "TimeZeroMap":
        """Resolve-mode map for the same model and branch, kept for reuse."""
        if self.family is None:
            return self
        if self._resolver is None:
            self._resolver = TimeZeroMap(self.model, self.branch, self.settings)
        return self._resolver

    def nearest_omega(self, p0) -> np.ndarray:
        d = np.linalg.norm(self.points - np.atleast_1d(p0), axis=-1)
        return self.omega_table[int(np.argmin(d))]

    # -- common ----------------------------------------------------------------

    def __call__(self, q, p0) -> np.ndarray:
        q = np.atleast_1d(np.asarray(q, dtype=float))
        p0 = np.atleast_1d(np.asarray(p0, dtype=float))
        n = self.model.n
        if self.mode == "extension":
            uv = self.extended(q[None], p0[None])[0]
        else:
            _, corr = self.torus(p0)
            uv = np.concatenate([evaluate_coeffs(corr.u.values[0], q, n), evaluate_coeffs(corr.v.values[0], q, n)])
        return np.concatenate([q + uv[:n], p0 + uv[n:]])

    def margin(self) -> float:
        """delta = 2 C0 eps with C0 eps read off the sup deviation of the solved tori."""
        if self.family is not None and self.family.deviation:
            return 2.0 * max(self.family.deviation)
        devs = [c1_deviation(c) for _, c in self._cache.values()]
        return 2.0 * max(devs, default=0.0)


# ---------------------------------------------------------------------------
# inversion


@dataclass
class Preimage:
    q: np.ndarray
    p0: np.ndarray
    iterations: int
    residual: float
    history: list[float] = field(default_factory=list)


def _admissible(model: HamiltonianModel, p0) -> bool:
    return bool(model.in_good_set(np.atleast_1d(p0)))


def invert_time_zero(zmap: TimeZeroMap, target, tol: float = INVERSION_TOL,
                     max_steps: int = MAX_INVERSION_STEPS, start=None) -> Preimage:
    """Fixed point x <- x - (psi^0(x) - target) for the near-identity time-zero map."""
    target = np.asarray(target, dtype=float).ravel()
    n = zmap.model.n
    model = zmap.model
    if not model.near_integrable and np.linalg.norm(target[n:]) >= TARGET_RADIUS:
        raise NotCoveredError(f"target action {target[n:].tolist()} lies outside T^n × B_{{1/2}}, "
                              "where coverage is guaranteed", zmap.branch, zmap.margin())
    x = target.copy() if start is None else np.asarray(start, dtype=float).ravel().copy()
    history = []
    for it in range(max_steps + 1):
        if not _admissible(model, x[n:]):
            raise NotCoveredError(
                f"branch {zmap.branch:+d}: preimage parameter {x[n:].tolist()} left the admissible set; "
                f"target outside the image guaranteed with margin delta = 2 C0 eps = {zmap.margin():.3g}",
                zmap.branch, zmap.margin())
        try:
            img = zmap(x[:n], x[n:])
        except DomainError as exc:
            raise NotCoveredError(str(exc), zmap.branch, zmap.margin()) from exc
        r = img - target
        r[:n] = _wrap(r[:n])
        res = float(np.abs(r).max())
        history.append(res)
        if res <= tol:
            x[:n] = np.mod(x[:n], 1.0)
            return Preimage(x[:n], x[n:], it, res, history)
        x = x - r
    raise NotCoveredError(f"branch {zmap.branch:+d}: inversion did not reach {tol:g} in {max_steps} steps "
                          f"(residuals {history[-3:]})", zmap.branch, zmap.margin())


def invert_batch(zmap: TimeZeroMap, targets: np.ndarray, tol: float = INVERSION_TOL,
                 max_steps: int = MAX_INVERSION_STEPS) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized extension-mode inversion; returns preimages (S, 2n) and a converged mask."""
    if zmap.mode != "extension":
        raise ValueError("batched inversion needs extension mode")
    n = zmap.model.n
    x = np.array(targets, dtype=float)
    done = np.zeros(len(x), dtype=bool)
    for _ in range(max_steps + 1):
        active = ~done
        if not active.any():
            break
        xa = x[active]
        uv = zmap.extended(xa[:, :n], xa[:, n:])
        r = np.concatenate([_wrap(uv[:, :n] + xa[:, :n] - targets[active, :n]),
                            xa[:, n:] + uv[:, n:] - targets[active, n:]], axis=1)
        ok = np.abs(r).max(axis=1) <= tol
        idx = np.flatnonzero(active)
        done[idx[ok]] = True
        x[idx[~ok]] = xa[~ok] - r[~ok]
    x[:, :n] = np.mod(x[:, :n], 1.0)
    return x, done


# ---------------------------------------------------------------------------
# gluing


@dataclass
class BiasymptoticOrbit:
    target: np.ndarray
    plus_preimage: tuple[np.ndarray, np.ndarray]
    minus_preimage: tuple[np.ndarray, np.ndarray]
    omega_plus: np.ndarray
    omega_minus: np.ndarray
    plus: tuple[ExpandedHamiltonian, TorusCorrection] | None
    minus: tuple[ExpandedHamiltonian, TorusCorrection] | None
    iterations: tuple[int, int] = (0, 0)
    grid_omegas: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def n(self) -> int:
        return self.target.size // 2

    def __call__(self, t: float) -> np.ndarray:
        """g(t), angle not reduced."""
        if t >= 0:
            (q, _), (exp, corr), om = self.plus_preimage, self.plus, self.omega_plus
        else:
            (q, _), (exp, corr), om = self.minus_preimage, self.minus, self.omega_minus
        return torus_point(exp, corr, q + om * t, t)

    def asymptote(self, t: float) -> np.ndarray:
        """(q +- omega +- t, p0 +-): the quasiperiodic motion approached on each side."""
        (q, p0), om = (self.plus_preimage, self.omega_plus) if t >= 0 else (self.minus_preimage, self.omega_minus)
        return np.concatenate([q + om * t, p0])


def _invert_both(plus: TimeZeroMap, minus: TimeZeroMap, target, starts=(None, None)) -> tuple[Preimage, Preimage]:
    pre = []
    for zmap, start in zip((plus, minus), starts):
        try:
            pre.append(invert_time_zero(zmap, target, start=start))
        except NotCoveredError as exc:
            raise GlueError(f"branch {zmap.branch:+d} inversion failed: {exc}", zmap.branch) from exc
    return pre[0], pre[1]


def glue(plus: TimeZeroMap, minus: TimeZeroMap, target) -> BiasymptoticOrbit:
    """Biasymptotic orbit through ``target`` at t = 0."""
    if plus.branch != 1 or minus.branch != -1:
        raise ValueError("glue needs a + branch map and a - branch map")
    target = np.asarray(target, dtype=float).ravel()
    a, b = _invert_both(plus, minus, target)
    grid_omegas = None
    if plus.mode == "extension":
        # the extension locates the preimages; the orbit runs on the tori solved at those parameters
        grid_omegas = (plus.nearest_omega(a.p0), minus.nearest_omega(b.p0))
        starts = (np.concatenate([a.q, a.p0]), np.concatenate([b.q, b.p0]))
        plus, minus = plus.resolver(), minus.resolver()
        a, b = _invert_both(plus, minus, target, starts)
    tp, tm = plus.torus(a.p0), minus.torus(b.p0)
    return BiasymptoticOrbit(target, (a.q, a.p0), (b.q, b.p0), tp[0].omega, tm[0].omega, tp, tm,
                             (a.iterations, b.iterations), grid_omegas)


# ---------------------------------------------------------------------------
# diagnostics


@dataclass
class ConvergenceReport:
    times: np.ndarray
    torus_plus: np.ndarray
    torus_minus: np.ndarray
    flow_plus: np.ndarray
    flow_minus: np.ndarray
    slope_plus: float
    slope_minus: float
    flow_slope_plus: float
    flow_slope_minus: float
    agreement: float
    budget: float
    agree: bool


def _deviation(state: np.ndarray, ref: np.ndarray, n: int) -> float:
    return float(max(np.abs(_wrap(state[:n] - ref[:n])).max(), np.abs(state[n:] - ref[n:]).max()))


def _slope(t: np.ndarray, d: np.ndarray, t_lo: float) -> float:
    mask = (t >= t_lo) & (d > 0)
    if mask.sum() < 3:
        return float("nan")
    return float(np.polyfit(np.log(t[mask]), np.log(d[mask]), 1)[0])


def convergence_diagnostics(orbit: BiasymptoticOrbit, t_max: float = 1000.0, points: int = 40,
                            tol: float = 1e-10, agree_until: float = 20.0, residual: float = 0.0) -> ConvergenceReport:
    """Deviation from the asymptotic motions, from the torus representation and from the flow."""
    n = orbit.n
    times = np.geomspace(1.0, t_max, points)
    tp = np.array([_deviation(orbit(t), orbit.asymptote(t), n) for t in times])
    tm = np.array([_deviation(orbit(-t), orbit.asymptote(-t), n) for t in times])
    model = orbit.plus[0].model
    fwd = integrate(model, orbit.target, 0.0, t_max, tol)
    bwd = integrate(model, orbit.target, 0.0, -t_max, tol)
    fp = np.array([_deviation(fwd.at(t), orbit.asymptote(t), n) for t in times])
    fm = np.array([_deviation(bwd.at(-t), orbit.asymptote(-t), n) for t in times])
    near = times <= agree_until
    agreement = float(max(np.abs(fp - tp)[near].max(initial=0.0), np.abs(fm - tm)[near].max(initial=0.0)))
    steps = max(fwd.accepted, bwd.accepted, 1)
    budget = residual * agree_until * 10.0 + tol * steps
    lo = t_max / 100.0
    return ConvergenceReport(times, tp, tm, fp, fm, _slope(times, tp, lo), _slope(times, tm, lo),
                             _slope(times, fp, lo), _slope(times, fm, lo), agreement, budget, agreement <= budget)


# ---------------------------------------------------------------------------
# coverage


@dataclass
class CoverageReport:
    samples: int
    failures: int
    fraction: float
    half_width: float
    bound: float
    passed: bool
    targets: np.ndarray
    failed: np.ndarray
    seed: int


def coverage_estimate(plus: TimeZeroMap, minus: TimeZeroMap, samples: int, seed: int,
                      mu: float | None = None) -> CoverageReport:
    """Monte Carlo share of uniform targets in T^n x B_1 that fail to glue inside D'."""
    model = plus.model
    n = model.n
    rng = np.random.default_rng(seed)
    if samples <= 0:
        empty = np.zeros((0, 2 * n))
        return CoverageReport(0, 0, 0.0, 0.0, 0.0, True, empty, np.zeros(0, dtype=bool), seed)
    q = rng.random((samples, n))
    d = rng.normal(size=(samples, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = rng.random(samples) ** (1.0 / n)
    targets = np.concatenate([q, d * r[:, None]], axis=1)
    fail = np.zeros(samples, dtype=bool)
    for zmap in (plus, minus):
        x, ok = invert_batch(zmap, targets)
        fail |= ~ok | ~model.in_good_set(x[:, n:])
    if mu is None:
        mu = excluded_measure(model)
    frac = float(fail.mean())
    hw = 1.96 * math.sqrt(max(frac * (1.0 - frac), 0.0) / samples)
    bound = 4.0 * mu / unit_ball_volume(n) + 3.0 * hw
    return CoverageReport(samples, int(fail.sum()), frac, hw, bound, frac <= bound, targets, fail, seed)


def unit_ball_volume(n: int) -> float:
    return math.pi ** (n / 2) / math.gamma(n / 2 + 1)


def excluded_measure(model: HamiltonianModel, samples: int = 200_000, seed: int = 0) -> float:
    """Lebesgue measure of B_1 outside D (exact in one dimension, Monte Carlo otherwise)."""
    if model.flat_set is None:
        return 0.0
    if model.n == 1:
        # D is a finite union of intervals clipped to [-1, 1]
        pieces = sorted((max(-1.0, float(b.center[0]) - b.radius), min(1.0, float(b.center[0]) + b.radius))
                        for b in model.flat_set)
        covered, end = 0.0, -1.0
        for lo, hi in pieces:
            lo = max(lo, end)
            if hi > lo:
                covered += hi - lo
                end = hi
        return 2.0 - covered
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(samples, model.n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pts = d * (rng.random(samples) ** (1.0 / model.n))[:, None]
    return unit_ball_volume(model.n) * float((~model.in_flat_set(pts)).mean())


def parameter_grid(model: HamiltonianModel, spacing: float) -> np.ndarray:
    """Regular grid with the given spacing restricted to the admissible parameter set."""
    R = model.parameter_radius
    axis = np.arange(-R, R + 1e-12, spacing)
    pts = np.array(np.meshgrid(*([axis] * model.n), indexing="ij")).reshape(model.n, -1).T
    if model.flat_set is not None:
        # include the edges of each flat interval so D' is resolved up to its boundary
        if model.n == 1:
            # nudged inward so rounding in the centre/radius form does not drop them
            edges = [float(b.center[0]) + s * (b.radius - 1e-12) for b in model.flat_set for s in (-1, 1)]
            inside = pts[model.in_good_set(pts), 0]
            merged = np.sort(np.concatenate([inside, np.clip(edges, -R, R)]))
            keep = np.concatenate([[True], np.diff(merged) > 1e-9])
            pts = merged[keep][:, None]
    return pts[model.in_good_set(pts)]


def solve_extension_maps(model: HamiltonianModel, spacing: float, settings: SolverSettings = SolverSettings(),
                         threads: int = 1) -> tuple[TimeZeroMap, TimeZeroMap]:
    params = parameter_grid(model, spacing)
    maps = []
    for branch in (1, -1):
        fam = solve_family(model, params, branch, settings, threads)
        maps.append(TimeZeroMap(model, branch, settings, fam))
    return maps[0], maps[1]


def glue_conjugacy(orbit: BiasymptoticOrbit, t_end: float = 20.0, tol: float = 1e-10) -> tuple[float, float]:
    """Conjugacy deviations of the two tori used by the orbit, evaluated along the orbit's own phases."""
    out = []
    for (q, _), tor in ((orbit.plus_preimage, orbit.plus), (orbit.minus_preimage, orbit.minus)):
        rep = conjugacy_check(tor[0], tor[1], q, t_end, tol)
        out.append(rep.max_deviation)
    return out[0], out[1]
