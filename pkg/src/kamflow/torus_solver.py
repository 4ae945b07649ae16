"""Asymptotic KAM tori as fixed points of the invariance functional.

The torus at parameter p0 is psi(theta, t) = (theta + u, v). The unknowns are
y = (u, v, DuOmega, DvOmega), where the last two stand for the directional
derivatives (d_theta . omega + d_t) of u and v. They are carried separately
because the frozen inverse produces them directly as right-hand sides of
transport equations, which keeps the discrete iteration exactly contractive.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .decay_norms import TailModel, TimeFamily, TimeGrid, horizon_for_tail, weighted_norm
from .hamiltonian import ExpandedHamiltonian, HamiltonianModel, eval_XH, expand_at
from .homological import solve_he, transport
from .torus_fourier import (
    CollocationGrid,
    ShiftTooLargeError,
    analyze_samples,
    differentiate_coeffs,
    holder_parts,
    synthesize_coeffs,
)


class DivergenceError(RuntimeError):
    def __init__(self, message: str, history: list[float]):
        super().__init__(message)
        self.history = history


class NonConvergenceError(RuntimeError):
    def __init__(self, message: str, history: list[float]):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class SolverSettings:
    K: int = 16
    sigma: float = 1.0
    tol: float = 1e-10
    max_iter: int = 25
    horizon_rtol: float = 1e-10
    first_step: float = 0.005
    ratio: float = 1.01


@dataclass
class TorusCorrection:
    u: TimeFamily
    v: TimeFamily
    DuOmega: TimeFamily
    DvOmega: TimeFamily
    omega: np.ndarray | None = None

    @property
    def grid(self) -> TimeGrid:
        return self.u.grid

    @property
    def K(self) -> int:
        return self.u.K

    @classmethod
    def zero(cls, grid: TimeGrid, K: int, n: int, tail: TailModel) -> "TorusCorrection":
        z = np.zeros((grid.size,) + (2 * K + 1,) * n + (n,), dtype=complex)
        fam = TimeFamily(grid, z, tail, n)
        return cls(fam, fam, fam, fam)

    def __sub__(self, other: "TorusCorrection") -> "TorusCorrection":
        return TorusCorrection(self.u - other.u, self.v - other.v,
                               self.DuOmega - other.DuOmega, self.DvOmega - other.DvOmega, self.omega)

    def rebased(self, omega) -> "TorusCorrection":
        """Same (u, v) with the stored directional derivatives moved to frequency ``omega``."""
        omega = np.atleast_1d(np.asarray(omega, dtype=float))
        if self.omega is None:
            raise ValueError("correction has no recorded frequency")
        dw = omega - self.omega
        n = self.u.n

        def shift(fam: TimeFamily) -> TimeFamily:
            extra = sum(dw[a] * differentiate_coeffs(fam.values, n, a) for a in range(n))
            return fam.with_values(extra)

        return TorusCorrection(self.u, self.v, self.DuOmega + shift(self.u), self.DvOmega + shift(self.v), omega)

    def norms(self, sigma: float, l: float) -> tuple[float, float]:
        """(|u|, |v|) in the solution spaces: u and DuOmega weighted by l, l+1; v and DvOmega by l+1, l+2."""
        nu = max(weighted_norm(self.u, sigma, l).total, weighted_norm(self.DuOmega, sigma, l + 1).total)
        nv = max(weighted_norm(self.v, sigma, l + 1).total, weighted_norm(self.DvOmega, sigma, l + 2).total)
        return nu, nv

    def derivative_consistency(self, omega) -> float:
        """sup |stored DuOmega, DvOmega - finite-difference transport derivative| over interior nodes."""
        err = 0.0
        for fam, stored in ((self.u, self.DuOmega), (self.v, self.DvOmega)):
            diff = transport(fam, omega) - stored.values
            inner = diff[3:-3]
            N = CollocationGrid.for_order(fam.K, fam.n, oversample=False).N
            err = max(err, float(np.abs(synthesize_coeffs(inner, N, fam.n)).max(initial=0.0)))
        return err


@dataclass
class SolveDiagnostics:
    residual: float
    residual_history: list[float]
    ratios: list[float]
    iterations: int
    max_iterate_norm: float
    derivative_consistency: float


@dataclass
class AsymptoticTorusFamily:
    branch: int
    param_grid: np.ndarray
    corrections: list[TorusCorrection]
    omega_of_p0: np.ndarray
    diagnostics: list[SolveDiagnostics]
    deviation: list[float] = field(default_factory=list)
    eps: float = 0.0

    def index_of(self, p0) -> int:
        d = np.linalg.norm(self.param_grid - np.atleast_1d(p0), axis=-1)
        return int(np.argmin(d))


# ---------------------------------------------------------------------------
# grids and data tails


def data_tail(model: HamiltonianModel) -> TailModel:
    """Slowest declared decay among the perturbation modes; l+2 when there are none."""
    polys = [m.profile.exponent for m in model.modes if m.profile.kind == "poly"]
    if polys:
        return TailModel("poly", min(polys), 1.0)
    exps = [m.profile.exponent for m in model.modes if m.profile.kind == "exp"]
    if exps:
        return TailModel("exp", min(exps), 1.0)
    return TailModel("poly", model.l + 2.0, 1.0)


def solver_grid(model: HamiltonianModel, branch: int, settings: SolverSettings = SolverSettings()) -> TimeGrid:
    T = horizon_for_tail(data_tail(model), settings.horizon_rtol)
    return TimeGrid.geometric(T, settings.first_step, settings.ratio, branch)


# ---------------------------------------------------------------------------
# functional


def _samples(fam: TimeFamily, N: int) -> np.ndarray:
    return synthesize_coeffs(fam.values, N, fam.n)


def _collocation(K: int, n: int) -> CollocationGrid:
    return CollocationGrid.for_order(K, n)


def eval_functional(exp: ExpandedHamiltonian, corr: TorusCorrection,
                    tail: TailModel | None = None) -> tuple[TimeFamily, TimeFamily]:
    """(F1, F2) slice by slice: the torus invariance defect split into angle and action rows."""
    n, K = exp.n, corr.K
    grid = corr.grid
    cg = _collocation(K, n)
    pts = cg.points()
    U = _samples(corr.u, cg.N)
    V = _samples(corr.v, cg.N)
    shift = float(np.abs(U).max(initial=0.0))
    if shift >= 0.5:
        raise ShiftTooLargeError(f"|u|_C0 = {shift:.4g} >= 1/2")
    exp.check_action(V)
    theta = pts[None] + U
    t = grid.nodes[:, None]
    T = exp.terms(theta, V, t, need=("b", "da", "db", "mbar", "dm"))
    F1 = T["b"] + np.einsum("...ij,...j->...i", T["mbar"], V) - _samples(corr.DuOmega, cg.N)
    F2 = (T["da"] + np.einsum("...ij,...j->...i", T["db"], V) + T["dm"]
          + _samples(corr.DvOmega, cg.N))
    tail = tail or data_tail(exp.model)
    z = TimeFamily(grid, analyze_samples(F1, K, cg.N, n), tail, n)
    g = TimeFamily(grid, analyze_samples(F2, K, cg.N, n), tail, n)
    return z, g


def vector_field_defect(exp: ExpandedHamiltonian, corr: TorusCorrection) -> tuple[TimeFamily, TimeFamily]:
    """X_H(psi) - d_theta psi . omega - d_t psi, with d_t by finite differences.

    Equals (F1, -F2) when the stored directional derivatives are consistent.
    """
    n, K = exp.n, corr.K
    grid = corr.grid
    cg = _collocation(K, n)
    pts = cg.points()
    U = _samples(corr.u, cg.N)
    V = _samples(corr.v, cg.N)
    dth, dI = eval_XH(exp, pts[None] + U, V, grid.nodes[:, None])
    Du = _samples(corr.u.with_values(transport(corr.u, exp.omega)), cg.N)
    Dv = _samples(corr.v.with_values(transport(corr.v, exp.omega)), cg.N)
    z = analyze_samples(dth - exp.omega - Du, K, cg.N, n)
    g = analyze_samples(dI - Dv, K, cg.N, n)
    return TimeFamily(grid, z, corr.u.tail, n), TimeFamily(grid, g, corr.v.tail, n)


def functional_norm(z: TimeFamily, g: TimeFamily, sigma: float, l: float) -> float:
    """max(|z|_{sigma,l+1}, |g|_{sigma,l+2}) at fixed p0."""
    return max(weighted_norm(z, sigma, l + 1).total, weighted_norm(g, sigma, l + 2).total)


# ---------------------------------------------------------------------------
# frozen linearization


def _mbar0_samples(exp: ExpandedHamiltonian, grid: TimeGrid, cg: CollocationGrid) -> np.ndarray:
    return exp.mbar0(cg.points()[None], grid.nodes[:, None])


def _times_mbar0(exp: ExpandedHamiltonian, v: TimeFamily, mbar0: np.ndarray, cg: CollocationGrid) -> np.ndarray:
    V = _samples(v, cg.N)
    return analyze_samples(np.einsum("...ij,...j->...i", mbar0, V), v.K, cg.N, v.n)


def invert_linearized(exp: ExpandedHamiltonian, z: TimeFamily, g: TimeFamily,
                      mbar0: np.ndarray | None = None) -> TorusCorrection:
    """Solve mbar0 v - (grad u)Omega = z, (grad v)Omega = g for decaying (u, v)."""
    cg = _collocation(z.K, z.n)
    if mbar0 is None:
        mbar0 = _mbar0_samples(exp, z.grid, cg)
    v_sol = solve_he(g, exp.omega)
    v = v_sol.kappa
    rhs_u = _times_mbar0(exp, v, mbar0, cg) - z.values
    # mbar0 v decays like the data, so the angle equation keeps the data tail
    rhs = TimeFamily(z.grid, rhs_u, z.tail, z.n)
    u = solve_he(rhs, exp.omega).kappa
    return TorusCorrection(u, v, rhs, g)


def apply_linearized(exp: ExpandedHamiltonian, corr: TorusCorrection,
                     stored: bool = False) -> tuple[TimeFamily, TimeFamily]:
    """(mbar0 v - (grad u)Omega, (grad v)Omega); derivatives by finite differences unless ``stored``."""
    cg = _collocation(corr.K, exp.n)
    mbar0 = _mbar0_samples(exp, corr.grid, cg)
    if stored:
        du, dv = corr.DuOmega.values, corr.DvOmega.values
    else:
        du, dv = transport(corr.u, exp.omega), transport(corr.v, exp.omega)
    z = _times_mbar0(exp, corr.v, mbar0, cg) - du
    return corr.u.with_values(z), corr.v.with_values(dv)


# ---------------------------------------------------------------------------
# chord iteration


def chord_iterate(exp: ExpandedHamiltonian, branch: int = 1, tol: float = 1e-10, max_iter: int = 25,
                  settings: SolverSettings = SolverSettings(), grid: TimeGrid | None = None,
                  initial: TorusCorrection | None = None) -> tuple[TorusCorrection, SolveDiagnostics]:
    """y <- y - T F(y) with T the inverse of the linearization at the unperturbed torus.

    ``initial`` warm-starts from a nearby solution on the same grid.
    """
    model = exp.model
    grid = grid or solver_grid(model, branch, settings)
    if grid.branch != branch:
        raise ValueError("grid branch does not match the requested branch")
    n, K, sigma, l = exp.n, settings.K, settings.sigma, model.l
    tail = data_tail(model)
    if initial is None:
        corr = TorusCorrection.zero(grid, K, n, tail)
        corr.omega = exp.omega
    else:
        corr = initial.rebased(exp.omega)
    if corr.grid is not grid and not np.array_equal(corr.grid.nodes, grid.nodes):
        raise ValueError("warm start lives on a different time grid")
    cg = _collocation(K, n)
    mbar0 = _mbar0_samples(exp, grid, cg)
    history: list[float] = []
    ratios: list[float] = []
    max_norm = 0.0
    over = 0
    for it in range(max_iter + 1):
        z, g = eval_functional(exp, corr, tail)
        res = functional_norm(z, g, sigma, l)
        history.append(res)
        if len(history) > 1:
            ratio = res / history[-2] if history[-2] > 0 else 0.0
            ratios.append(ratio)
            over = over + 1 if ratio > 0.9 else 0
            if over >= 3:
                raise DivergenceError(
                    "contraction ratio above 0.9 for three steps: the smallness condition "
                    "|I - T DF(y)| <= 1/2 on the iteration ball fails; reduce eps", history)
        if res <= tol:
            diag = SolveDiagnostics(res, history, ratios, it, max_norm, corr.derivative_consistency(exp.omega))
            return corr, diag
        if it == max_iter:
            break
        step = invert_linearized(exp, z, g, mbar0)
        corr = corr - step
        max_norm = max(max_norm, *corr.norms(sigma, l))
    raise NonConvergenceError(f"no convergence in {max_iter} steps; residuals {history}", history)


def solve_torus(model: HamiltonianModel, p0, branch: int = 1, settings: SolverSettings = SolverSettings(),
                grid: TimeGrid | None = None, initial: TorusCorrection | None = None
                ) -> tuple[ExpandedHamiltonian, TorusCorrection, SolveDiagnostics]:
    exp = expand_at(model, p0)
    corr, diag = chord_iterate(exp, branch, settings.tol, settings.max_iter, settings, grid, initial)
    return exp, corr, diag


def solve_family(model: HamiltonianModel, params, branch: int = 1, settings: SolverSettings = SolverSettings(),
                 threads: int = 1) -> AsymptoticTorusFamily:
    """Independent solves over a parameter grid; results are ordered as ``params`` for any thread count."""
    params = np.atleast_2d(np.asarray(params, dtype=float))
    grid = solver_grid(model, branch, settings)

    def one(p0):
        return solve_torus(model, p0, branch, settings, grid)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, params))
    else:
        results = [one(p) for p in params]
    fam = AsymptoticTorusFamily(
        branch=branch,
        param_grid=params,
        corrections=[r[1] for r in results],
        omega_of_p0=np.array([r[0].omega for r in results]),
        diagnostics=[r[2] for r in results],
        eps=model.eps,
    )
    fam.deviation = [c1_deviation(c) for c in fam.corrections]
    return fam


# ---------------------------------------------------------------------------
# closeness estimates


def c1_deviation(corr: TorusCorrection) -> float:
    """sup_t of the C^1 surrogate of psi^t - psi_0 = (u, v)."""
    both = np.concatenate([corr.u.values, corr.v.values], axis=-1)
    N = CollocationGrid.for_order(corr.K, corr.u.n).N
    return float(holder_parts(both, 1.0, N, corr.u.n).max(initial=0.0))


def lipschitz_deviation(family: AsymptoticTorusFamily) -> float:
    """Largest C^0 difference quotient of (u, v) across the parameter grid, sup over t."""
    best = 0.0
    P = family.param_grid
    N = CollocationGrid.for_order(family.corrections[0].K, family.corrections[0].u.n).N
    samples = [synthesize_coeffs(np.concatenate([c.u.values, c.v.values], axis=-1), N, c.u.n)
               for c in family.corrections]
    for i in range(len(P)):
        for j in range(i + 1, len(P)):
            d = float(np.linalg.norm(P[i] - P[j]))
            if d > 0:
                best = max(best, float(np.abs(samples[i] - samples[j]).max()) / d)
    return best


@dataclass
class TheoremEstimateReport:
    deviation: float
    lipschitz: float
    eps: float
    C0: float
    per_param: list[float]
    sane: bool


def theorem_estimates(family: AsymptoticTorusFamily, eps: float) -> TheoremEstimateReport:
    """Empirical constant C0 = sup_t |psi^t - psi_0| / eps over the parameter grid."""
    per = family.deviation or [c1_deviation(c) for c in family.corrections]
    dev = max(per, default=0.0)
    lip = lipschitz_deviation(family) if len(family.corrections) > 1 else 0.0
    value = max(dev, lip)
    C0 = value / eps if eps > 0 else 0.0
    return TheoremEstimateReport(dev, lip, eps, C0, list(per), value < 1.0)


def estimate_stability(full: TheoremEstimateReport, half: TheoremEstimateReport, rtol: float = 0.25) -> tuple[float, bool]:
    """Ratio of empirical constants at eps and eps/2; stable when within rtol of 1."""
    if full.C0 == 0.0 and half.C0 == 0.0:
        return 1.0, True
    r = half.C0 / full.C0 if full.C0 else math.inf
    return r, abs(r - 1.0) <= rtol


def embedding(exp: ExpandedHamiltonian, corr: TorusCorrection, theta, j: int) -> tuple[np.ndarray, np.ndarray]:
    """psi at grid node j: (theta + u, p0 + v) in original coordinates, angle not reduced."""
    from .torus_fourier import evaluate_coeffs

    theta = np.asarray(theta, dtype=float)
    u = evaluate_coeffs(corr.u.values[j], theta, exp.n)
    v = evaluate_coeffs(corr.v.values[j], theta, exp.n)
    return theta + u, exp.p0 + v
