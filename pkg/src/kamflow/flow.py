"""Reference integration of the non-autonomous Hamiltonian flow."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .hamiltonian import ExpandedHamiltonian, HamiltonianModel
from .torus_fourier import evaluate_coeffs
from .torus_solver import TorusCorrection

CHECKPOINTS = 50
BUDGET_SAFETY = 10.0


class StiffnessError(RuntimeError):
    pass


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (len(times), 2n): angle in [0, 1)^n then action
    unwrapped: np.ndarray
    tol: float
    accepted: int
    rejected: int
    left_domain: bool
    dense: object

    @property
    def n(self) -> int:
        return self.states.shape[1] // 2

    def at(self, t) -> np.ndarray:
        """Unwrapped state at arbitrary times inside the integrated span."""
        return np.asarray(self.dense(t)).T


def _rhs(system):
    if isinstance(system, ExpandedHamiltonian):
        n = system.n

        def f(t, y):
            th, I = y[:n], y[n:]
            T = system.terms(th, I, t, need=("b", "da", "db", "mbar", "dm"))
            dth = system.omega + T["b"] + T["mbar"] @ I
            dI = -(T["da"] + T["db"] @ I + T["dm"])
            return np.concatenate([dth, dI])

        return f, n
    n = system.n

    def f(t, y):
        dq, dp = system.vector_field(y[:n], y[n:], t)
        return np.concatenate([dq, dp])

    return f, n


def _domain_event(system, n):
    if isinstance(system, ExpandedHamiltonian):
        radius = system.radius

        def ev(t, y):
            return radius - np.linalg.norm(y[n:])
    else:
        def ev(t, y):
            return 1.0 - np.linalg.norm(y[n:])

    ev.terminal = True
    ev.direction = -1
    return ev


def integrate(system: HamiltonianModel | ExpandedHamiltonian, state0, t0: float, t1: float,
              tol: float = 1e-10, t_eval=None) -> Trajectory:
    """Dormand-Prince 5(4) with dense output; stops early if the state leaves the domain."""
    f, n = _rhs(system)
    y0 = np.asarray(state0, dtype=float).ravel()
    if y0.size != 2 * n:
        raise ValueError(f"state must have {2 * n} entries")
    ev = _domain_event(system, n)
    if ev(t0, y0) <= 0:
        raise ValueError("initial state lies outside the domain")
    sol = solve_ivp(f, (t0, t1), y0, method="RK45", rtol=tol, atol=tol, dense_output=True,
                    events=ev, t_eval=t_eval)
    if sol.status == -1:
        raise StiffnessError(sol.message)
    left = sol.status == 1
    accepted = len(sol.t) - 1 if t_eval is None else max(sol.nfev // 6, 0)
    rejected = max((sol.nfev - 1) // 6 - accepted, 0)
    states = sol.y.T.copy()
    unwrapped = states.copy()
    states[:, :n] = np.mod(states[:, :n], 1.0)
    return Trajectory(sol.t, states, unwrapped, tol, accepted, rejected, left, sol.sol)


def _lagrange_rows(nodes: np.ndarray, t: float, width: int = 6) -> tuple[np.ndarray, np.ndarray]:
    j = int(np.clip(np.searchsorted(np.abs(nodes), abs(t)) - width // 2, 0, nodes.size - width))
    idx = np.arange(j, j + width)
    x = nodes[idx]
    w = np.ones(width)
    for i in range(width):
        for k in range(width):
            if k != i:
                w[i] *= (t - x[k]) / (x[i] - x[k])
    return idx, w


def torus_point(exp: ExpandedHamiltonian, corr: TorusCorrection, theta, t: float) -> np.ndarray:
    """psi^t(theta) = (theta + u, p0 + v) with u, v interpolated in time between grid nodes."""
    idx, w = _lagrange_rows(corr.grid.nodes, t)
    uc = np.tensordot(w, corr.u.values[idx], axes=1)
    vc = np.tensordot(w, corr.v.values[idx], axes=1)
    theta = np.asarray(theta, dtype=float)
    return np.concatenate([theta + evaluate_coeffs(uc, theta, exp.n), exp.p0 + evaluate_coeffs(vc, theta, exp.n)])


@dataclass
class ConjugacyReport:
    times: np.ndarray
    deviations: np.ndarray
    max_deviation: float
    budget: float
    passed: bool
    left_domain: bool


def conjugacy_check(exp: ExpandedHamiltonian, corr: TorusCorrection, q, t_end: float, tol: float = 1e-10,
                    residual: float = 0.0) -> ConjugacyReport:
    """Integrate from psi^0(q) and compare with psi^t(q + omega t) at evenly spaced checkpoints."""
    branch = corr.grid.branch
    if t_end > corr.grid.horizon:
        raise ValueError("t_end exceeds the grid horizon")
    q = np.atleast_1d(np.asarray(q, dtype=float))
    n = exp.n
    start = torus_point(exp, corr, q, 0.0)
    times = branch * np.linspace(0.0, t_end, CHECKPOINTS + 1)[1:]
    traj = integrate(exp.model, start, 0.0, branch * t_end, tol)
    devs = []
    for t in times:
        if traj.left_domain and abs(t) > abs(traj.times[-1]):
            break
        flow = traj.at(t)
        tor = torus_point(exp, corr, q + exp.omega * t, t)
        d_ang = flow[:n] - tor[:n]
        d_ang = d_ang - np.round(d_ang)
        devs.append(max(np.abs(d_ang).max(), np.abs(flow[n:] - tor[n:]).max()))
    devs = np.array(devs)
    # local errors add up over the accepted steps
    budget = residual * t_end * BUDGET_SAFETY + tol * max(traj.accepted, 1)
    worst = float(devs.max(initial=0.0))
    return ConjugacyReport(times[: devs.size], devs, worst, budget, worst <= budget and not traj.left_domain,
                           traj.left_domain)
