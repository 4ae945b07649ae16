"""Acceptance checks shared by the ``verify`` command and the test suite.

Each check returns a CheckResult whose ``values`` hold only deterministic
numbers; wall-clock time is kept apart in ``seconds``.
"""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .biasymptotic import (
    GlueError,
    TimeZeroMap,
    convergence_diagnostics,
    coverage_estimate,
    glue,
    solve_extension_maps,
)
from .decay_norms import (
    TailModel,
    TimeFamily,
    TimeGrid,
    horizon_for_tail,
    tail_bound_f,
    tail_bound_g,
    weight,
    weighted_norm,
)
from .flow import conjugacy_check
from .hamiltonian import (
    DecayProfile,
    HamiltonianModel,
    Polynomial,
    SeparableMode,
    expand_at,
    near_integrable_model,
    reference_model,
)
from .homological import SlowTailWarning, solve_he
from .torus_fourier import (
    CollocationGrid,
    TorusFun,
    compose_shift,
    synthesize_coeffs,
)
from .torus_solver import (
    SolverSettings,
    apply_linearized,
    c1_deviation,
    chord_iterate,
    eval_functional,
    invert_linearized,
    solve_torus,
)

# single recorded constants for the bounded-ratio tests
PRODUCT_CONSTANT = 2.0
COMPOSITION_CONSTANT = 2.0

RUNTIME_LIMITS = {
    "tail_constants": 1.0,
    "homological": 10.0,
    "chord_iteration": 60.0,
    "coverage": 300.0,
}


@dataclass
class CheckResult:
    name: str
    passed: bool
    values: dict
    seconds: float = 0.0
    runtime_ok: bool = True
    notes: list = field(default_factory=list)

    def as_json(self) -> dict:
        return {"passed": bool(self.passed and self.runtime_ok), "values": _clean(self.values),
                "within_runtime_limit": bool(self.runtime_ok), "notes": list(self.notes)}


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def _timed(name: str, fn, *args, **kwargs) -> CheckResult:
    t0 = time.perf_counter()
    passed, values, notes = fn(*args, **kwargs)
    dt = time.perf_counter() - t0
    limit = RUNTIME_LIMITS.get(name)
    return CheckResult(name, bool(passed), values, dt, limit is None or dt < limit, notes)


# ---------------------------------------------------------------------------
# 1. tail constants


def _tail_constants():
    rows = {}
    ok = True
    for m in (2, 3, 4):
        f = tail_bound_f(m, 1000.0)
        g = tail_bound_g(m, 1000.0)
        fe, ge = 1.0 / (m - 1), 1.0 / (m * (m - 1))
        rows[f"m={m}"] = {"f": f, "f_limit": fe, "g": g, "g_limit": ge}
        ok &= abs(f - fe) <= 0.02 * fe and abs(g - ge) <= 0.02 * ge
    return ok, rows, []


def check_tail_constants() -> CheckResult:
    return _timed("tail_constants", _tail_constants)


# ---------------------------------------------------------------------------
# 2. homological solver


def _single(shape_terms, K: int = 2) -> TorusFun:
    return TorusFun.from_trig(shape_terms, 1, K=K)


def _he_closed_forms() -> dict:
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SlowTailWarning)
        tail = TailModel("poly", 2.0, 1.0)
        grid = TimeGrid.geometric(horizon_for_tail(tail))
        g = TimeFamily.separable(grid, _single([((1,), 1.0, 0.0)]), lambda t: 1.0 / (1.0 + t**2), tail)
        sol = solve_he(g, [0.0])
    theta = np.linspace(0.0, 1.0, 17)[:-1, None]
    t = grid.nodes
    got = np.stack([sol.kappa.slice(j)(theta)[:, 0] for j in range(grid.size)])
    exact = -np.cos(2 * np.pi * theta[:, 0])[None] * (np.pi / 2 - np.arctan(t))[:, None]
    out["arctan"] = {"sup_error": float(np.abs(got - exact).max()), "residual": sol.residual_sup}

    tail = TailModel("exp", 1.0, 1.0)
    grid = TimeGrid.geometric(horizon_for_tail(tail, 1e-12))
    om = 0.7
    w = 2 * np.pi * om
    g = TimeFamily.separable(grid, _single([((1,), 1.0, 0.0)]), lambda t: np.exp(-t), tail)
    sol = solve_he(g, [om])
    got = np.stack([sol.kappa.slice(j)(theta)[:, 0] for j in range(grid.size)])
    A, B = 1.0 / (1.0 + w**2), w / (1.0 + w**2)
    c, s = np.cos(2 * np.pi * theta[:, 0]), np.sin(2 * np.pi * theta[:, 0])
    exact = -np.exp(-grid.nodes)[:, None] * (A * c - B * s)[None]
    out["oscillatory"] = {"sup_error": float(np.abs(got - exact).max()), "residual": sol.residual_sup}
    return out


def he_battery(seed: int = 0) -> list[tuple[TimeFamily, np.ndarray]]:
    """Random right-hand sides over dimensions, tails and frequencies."""
    rng = np.random.default_rng(seed)
    cases = []
    for n, K, tail, omega in [
        (1, 6, TailModel("poly", 3.0), [0.0]),
        (1, 6, TailModel("poly", 4.0), [0.37]),
        (1, 16, TailModel("poly", 3.0), [1.9]),
        (1, 8, TailModel("exp", 0.5), [0.61803398875]),
        (2, 4, TailModel("poly", 4.0), [0.3, 0.3 * (5**0.5 - 1) / 2]),
        (2, 3, TailModel("exp", 1.0), [1.0, 0.0]),
    ]:
        grid = TimeGrid.geometric(horizon_for_tail(tail))
        shape = (2 * K + 1,) * n + (1,)
        c = (rng.normal(size=shape) + 1j * rng.normal(size=shape))
        k = np.indices((2 * K + 1,) * n).reshape(n, -1).T - K
        c *= np.exp(-0.5 * np.abs(k).sum(axis=1)).reshape(shape)
        c = 0.5 * (c + np.conj(c[(slice(None, None, -1),) * n]))
        prof = tail.envelope(grid.nodes)
        values = prof[(slice(None),) + (None,) * (n + 1)] * c[None]
        cases.append((TimeFamily(grid, values, tail, n), np.array(omega)))
    return cases


def _homological(seed: int):
    values = {}
    closed = _he_closed_forms()
    values["closed_forms"] = closed
    ok = all(v["sup_error"] <= 1e-8 for v in closed.values())
    res = []
    for g, omega in he_battery(seed):
        sol = solve_he(g, omega)
        gsup = float(g.sup_norms().max())
        res.append(sol.residual_sup / (1.0 + gsup))
    res += [v["residual"] for v in closed.values()]
    values["max_relative_residual"] = max(res)
    ok &= max(res) <= 1e-8
    # exact poly(l+1) tail with l = 2 and zero frequency: kappa decays like t^-l
    l = 2.0
    tail = TailModel("poly", l + 1.0)
    grid = TimeGrid.geometric(horizon_for_tail(tail))
    g = TimeFamily.separable(grid, _single([((1,), 1.0, 0.0)]), lambda t: 1.0 / (1.0 + t ** (l + 1)), tail)
    sol = solve_he(g, [0.0])
    slope = -sol.decay_fit_exponent
    values["decay_slope"] = slope
    ok &= abs(slope + l) <= 0.05 * l
    # runtime case: n = 1, K = 16, 200 nodes
    rng = np.random.default_rng(seed + 1)
    tail = TailModel("poly", 4.0)
    grid = TimeGrid.with_count(200, horizon_for_tail(tail))
    c = rng.normal(size=(33, 1)) + 1j * rng.normal(size=(33, 1))
    c = 0.5 * (c + np.conj(c[::-1]))
    g = TimeFamily(grid, tail.envelope(grid.nodes)[:, None, None] * c[None], tail, 1)
    sol = solve_he(g, [0.4142])
    values["runtime_case_nodes"] = grid.size
    values["runtime_case_relative_residual"] = sol.residual_sup / (1.0 + float(g.sup_norms().max()))
    return ok, values, []


def check_homological(seed: int = 0) -> CheckResult:
    return _timed("homological", _homological, seed)


# ---------------------------------------------------------------------------
# 3. linearized inverse round trip


def quadratic_coupling_model(eps: float = 1e-3) -> HamiltonianModel:
    """Reference model plus eps sin(2 pi q) p^2 w(t), so the frozen coupling mbar0 depends on (theta, t)."""
    base = reference_model(eps)
    extra = SeparableMode(TorusFun.from_trig([((1,), 0.0, eps)], 1, K=1), Polynomial({(2,): 1.0}, 1),
                          DecayProfile("poly", 4.0))
    return base.with_modes(list(base.modes) + [extra])


def _roundtrip(instances: int, seed: int, settings: SolverSettings):
    rng = np.random.default_rng(seed)
    model = quadratic_coupling_model()
    l = model.l
    from .torus_solver import solver_grid

    grid = solver_grid(model, 1, settings)
    K = settings.K
    N = CollocationGrid.for_order(K, 1).N
    worst = 0.0
    for _ in range(instances):
        exp = expand_at(model, [rng.uniform(-0.7, 0.7)])
        fams = []
        for decay in (l + 2.0, l + 3.0):
            c = rng.normal(size=(2 * K + 1, 1)) + 1j * rng.normal(size=(2 * K + 1, 1))
            c *= np.exp(-0.4 * np.abs(np.arange(-K, K + 1)))[:, None]
            c = 0.5 * (c + np.conj(c[::-1]))
            tail = TailModel("poly", decay)
            fams.append(TimeFamily(grid, tail.envelope(grid.nodes)[:, None, None] * c[None], tail, 1))
        z, g = fams
        corr = invert_linearized(exp, z, g)
        z2, g2 = apply_linearized(exp, corr)
        inner = slice(3, grid.size - 3)
        err = max(np.abs(synthesize_coeffs(z2.values[inner] - z.values[inner], N, 1)).max(),
                  np.abs(synthesize_coeffs(g2.values[inner] - g.values[inner], N, 1)).max())
        worst = max(worst, float(err))
    return worst <= 1e-8, {"instances": instances, "max_error": worst}, []


def check_linearized_roundtrip(instances: int = 20, seed: int = 0,
                               settings: SolverSettings = SolverSettings()) -> CheckResult:
    return _timed("linearized_roundtrip", _roundtrip, instances, seed, settings)


# ---------------------------------------------------------------------------
# 4-6. reference-model torus


def _chord(settings: SolverSettings):
    model = reference_model(1e-3, 2.0)
    exp = expand_at(model, [0.3])
    corr, diag = chord_iterate(exp, 1, 1e-10, 25, settings)
    ratios = diag.ratios
    late = ratios[1:]
    ok = diag.residual <= 1e-9 and diag.iterations <= 25 and all(r <= 0.5 for r in late)
    return ok, {"iterations": diag.iterations, "residuals": diag.residual_history, "ratios": ratios,
                "final_residual": diag.residual, "derivative_consistency": diag.derivative_consistency}, []


def check_chord_iteration(settings: SolverSettings = SolverSettings()) -> CheckResult:
    return _timed("chord_iteration", _chord, settings)


def _closeness(settings: SolverSettings, params=(-0.5, 0.0, 0.3, 0.6)):
    c0 = {}
    for eps in (1e-3, 5e-4):
        model = reference_model(eps, 2.0)
        devs = [c1_deviation(solve_torus(model, [p], 1, settings)[1]) for p in params]
        c0[eps] = max(devs) / eps
    ratio = c0[5e-4] / c0[1e-3]
    dev = c0[1e-3] * 1e-3
    return 0.75 <= ratio <= 1.25 and dev < 1.0, {"C0_eps": c0[1e-3], "C0_half_eps": c0[5e-4],
                                                 "ratio": ratio, "deviation": dev}, []


def check_closeness(settings: SolverSettings = SolverSettings()) -> CheckResult:
    return _timed("closeness", _closeness, settings)


def _conjugacy(settings: SolverSettings, tol: float = 1e-10):
    model = reference_model(1e-3, 2.0)
    values = {}
    ok = True
    for branch in (1, -1):
        exp, corr, diag = solve_torus(model, [0.3], branch, settings)
        z, g = eval_functional(exp, corr)
        N = CollocationGrid.for_order(corr.K, 1).N
        res = max(np.abs(synthesize_coeffs(z.values, N, 1)).max(), np.abs(synthesize_coeffs(g.values, N, 1)).max())
        rep = conjugacy_check(exp, corr, [0.1], 20.0, tol, float(res))
        values[f"branch{branch:+d}"] = {"max_deviation": rep.max_deviation, "budget": rep.budget,
                                        "within_budget": rep.passed}
        ok &= rep.max_deviation <= 1e-5
    return ok, values, []


def check_conjugacy(settings: SolverSettings = SolverSettings()) -> CheckResult:
    return _timed("conjugacy", _conjugacy, settings)


# ---------------------------------------------------------------------------
# 7. biasymptotic orbits


def glue_targets(count: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.stack([rng.random(count), rng.uniform(-0.45, 0.45, count)], axis=1)


def _glue(count: int, seed: int, settings: SolverSettings):
    model = reference_model(1e-3, 2.0, drift=1.0)
    plus, minus = TimeZeroMap(model, 1, settings), TimeZeroMap(model, -1, settings)
    l = model.l
    rows = []
    ok = True
    for target in glue_targets(count, seed):
        try:
            orbit = glue(plus, minus, target)
        except GlueError as exc:
            rows.append({"target": target, "glued": False, "error": str(exc)})
            ok = False
            continue
        err0 = max(np.abs(orbit(0.0) - target).max(), np.abs(orbit(-0.0 - 1e-300) - target).max())
        rep = convergence_diagnostics(orbit, 1000.0)
        slopes_ok = all(abs(s + l) <= 0.1 * l for s in (rep.slope_plus, rep.slope_minus))
        good = err0 <= 1e-10 and slopes_ok and rep.agree
        ok &= good
        rows.append({"target": target, "glued": True, "g0_error": err0, "slope_plus": rep.slope_plus,
                     "slope_minus": rep.slope_minus, "flow_torus_gap": rep.agreement, "budget": rep.budget,
                     "p0_plus": orbit.plus_preimage[1], "p0_minus": orbit.minus_preimage[1], "passed": good})
    return ok, {"targets": rows}, []


def check_glue(count: int = 10, seed: int = 0, settings: SolverSettings = SolverSettings()) -> CheckResult:
    return _timed("glue", _glue, count, seed, settings)


# ---------------------------------------------------------------------------
# 8. near-integrable coverage


def _coverage(samples: int, seed: int, spacing: float, settings: SolverSettings, threads: int):
    model = near_integrable_model()
    plus, minus = solve_extension_maps(model, spacing, settings, threads)
    rep = coverage_estimate(plus, minus, samples, seed)
    return rep.passed, {"samples": rep.samples, "failures": rep.failures, "fraction": rep.fraction,
                        "half_width": rep.half_width, "bound": rep.bound, "grid_points": len(plus.points)}, []


def check_coverage(samples: int = 10_000, seed: int = 0, spacing: float = 0.02,
                   settings: SolverSettings = SolverSettings(), threads: int = 1) -> CheckResult:
    return _timed("coverage", _coverage, samples, seed, spacing, settings, threads)


# ---------------------------------------------------------------------------
# 9. norm algebra


def random_family(rng, grid: TimeGrid, K: int, decay: float, scale: float = 1.0) -> TimeFamily:
    c = rng.normal(size=(2 * K + 1, 1)) + 1j * rng.normal(size=(2 * K + 1, 1))
    c *= scale * np.exp(-0.6 * np.abs(np.arange(-K, K + 1)))[:, None]
    c = 0.5 * (c + np.conj(c[::-1]))
    prof = 1.0 / (1.0 + grid.nodes**decay)
    return TimeFamily(grid, prof[:, None, None] * c[None], TailModel("poly", decay), 1)


def _product(f: TimeFamily, g: TimeFamily) -> TimeFamily:
    K = f.K + g.K
    N = CollocationGrid.for_order(K, 1).N
    from .torus_fourier import analyze_samples, resize_coeffs

    fs = synthesize_coeffs(resize_coeffs(f.values, K, 1), N, 1)
    gs = synthesize_coeffs(resize_coeffs(g.values, K, 1), N, 1)
    return TimeFamily(f.grid, analyze_samples(fs * gs, K, N, 1), f.tail, 1)


def _norm_algebra(instances: int, seed: int):
    rng = np.random.default_rng(seed)
    grid = TimeGrid.geometric(200.0, 0.05, 1.1)
    sigmas = (0.0, 0.5, 1.0, 1.5, 2.0)
    mono = weight_ok = True
    prod_ratio = comp_ratio = 0.0
    for _ in range(instances):
        l, m = rng.uniform(1.0, 3.0), float(rng.choice([0.0, 1.0, 1.5, 2.0, 2.5]))
        f = random_family(rng, grid, 4, l + m + 0.5)
        g = random_family(rng, grid, 4, m + 0.5)
        norms = [weighted_norm(f, s, l).total for s in sigmas]
        mono &= all(a <= b for a, b in zip(norms, norms[1:]))
        s = float(rng.choice(sigmas[2:]))
        weight_ok &= weighted_norm(f, s, l).total <= 2.0 * weighted_norm(f, s, l + m).total
        fl = random_family(rng, grid, 4, l + 0.5)
        lhs = weighted_norm(_product(fl, g), 1.0, l + m).total
        rhs = (weighted_norm(fl, 0.0, l).total * weighted_norm(g, 1.0, m).total
               + weighted_norm(fl, 1.0, l).total * weighted_norm(g, 0.0, m).total)
        prod_ratio = max(prod_ratio, lhs / rhs)
        u = TorusFun(rng.normal(size=(9, 1)) * 0.01 * np.exp(-np.abs(np.arange(-4, 5)))[:, None])
        u = TorusFun(0.5 * (u.coeffs + np.conj(u.coeffs[::-1])))
        j = int(rng.integers(grid.size))
        fj = f.slice(j)
        comp = compose_shift(fj, u, 3 * fj.K)
        Nc = CollocationGrid.for_order(3 * fj.K, 1).N
        from .torus_fourier import holder_surrogate, resize_coeffs

        fr = TorusFun(resize_coeffs(fj.coeffs, 3 * fj.K, 1))
        lhs = holder_surrogate(comp, 1.0, CollocationGrid(Nc, 1))
        rhs = holder_surrogate(fr, 1.0, CollocationGrid(Nc, 1)) * (1.0 + holder_surrogate(
            TorusFun(resize_coeffs(u.coeffs, 3 * fj.K, 1)), 1.0, CollocationGrid(Nc, 1)))
        if rhs > 0:
            comp_ratio = max(comp_ratio, lhs / rhs)
    t = np.linspace(0.0, 1e3, 10_000)
    sub = all(np.all(weight(t, a + b) <= weight(t, a) * weight(t, b) * (1 + 1e-12))
              for a, b in [(1.0, 2.0), (2.0, 2.0), (1.5, 0.5)])
    ok = mono and weight_ok and sub and prod_ratio <= PRODUCT_CONSTANT and comp_ratio <= COMPOSITION_CONSTANT
    return ok, {"instances": instances, "sigma_monotone": mono, "weight_constant_two": weight_ok,
                "weight_submultiplicative": sub, "product_ratio": prod_ratio, "product_constant": PRODUCT_CONSTANT,
                "composition_ratio": comp_ratio, "composition_constant": COMPOSITION_CONSTANT}, []


def check_norm_algebra(instances: int = 100, seed: int = 0) -> CheckResult:
    return _timed("norm_algebra", _norm_algebra, instances, seed)
