"""Local label oracle for the nonconvex dispatch problem.

Multi-start SLSQP on the PV setpoints with the exact power flow in the loop
and gradients from the implicit-function sensitivities.  This is a local
method: labels are feasible local optima, not certified global ones.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .network import NetworkData, build_matrices
from .powerflow import (
    FEAS_TOL,
    PowerFlowError,
    check_feasibility,
    evaluate_objective,
    solve_power_flow,
)
from .sensitivity import ReducedSensitivity, SensitivityError

logger = logging.getLogger(__name__)

# limits are tightened by this much inside the solver so labels clear FEAS_TOL
_MARGIN = 1e-7


class OracleFailure(RuntimeError):
    pass


@dataclass
class OracleResult:
    f: np.ndarray
    objective: float
    starts_tried: int
    feasible_starts: int


class _Problem:
    def __init__(self, net: NetworkData, x, sens: ReducedSensitivity):
        self.net = net
        self.x = np.asarray(x, dtype=float)
        self.sens = sens
        _, _, self.pbar = net.split_scenario(self.x)
        self._key = None

    def _eval(self, f):
        key = f.tobytes()
        if key == self._key:
            return
        self._key = key
        try:
            st = solve_power_flow(self.net, f, self.x)
            dV, dl = self.sens.jacobian(st.v[1:], st.l, st.p_flow, st.q_flow)
        except (PowerFlowError, SensitivityError):
            self.state = None
            return
        self.state, self.dV, self.dl = st, dV, dl

    def objective(self, f):
        self._eval(f)
        if self.state is None:
            return 1e3
        return self.net.r @ self.state.l + np.sum(self.pbar - f[:self.net.n_pv])

    def objective_grad(self, f):
        self._eval(f)
        m = self.net.n_pv
        g = np.zeros_like(f) if self.state is None else self.net.r @ self.dl
        g = g.copy()
        g[:m] -= 1.0
        return g

    def constraints(self, f):
        self._eval(f)
        net, m = self.net, self.net.n_pv
        disk = net.inv_cap ** 2 - f[:m] ** 2 - f[m:] ** 2
        if self.state is None:
            return np.concatenate([-np.ones(3 * net.n), disk])
        V, l = self.state.v[1:], self.state.l
        return np.concatenate([net.v_max - _MARGIN - V, V - net.v_min - _MARGIN,
                               net.l_max - _MARGIN - l, disk])

    def constraints_jac(self, f):
        self._eval(f)
        net, m = self.net, self.net.n_pv
        jd = np.zeros((m, 2 * m))
        jd[np.arange(m), np.arange(m)] = -2 * f[:m]
        jd[np.arange(m), m + np.arange(m)] = -2 * f[m:]
        if self.state is None:
            return np.vstack([np.zeros((3 * net.n, 2 * m)), jd])
        return np.vstack([-self.dV, self.dV, -self.dl, jd])


def default_starts(net: NetworkData, x, extra=None) -> list[np.ndarray]:
    """Zero curtailment, half output, unity and reactive-absorbing variants,
    plus any caller-supplied starts (e.g. the affine interior point)."""
    _, _, pbar = net.split_scenario(x)
    z = np.zeros_like(pbar)
    starts = [np.concatenate([pbar, z])]
    if extra is not None:
        starts += [np.asarray(e, dtype=float) for e in extra]
    qroom = np.sqrt(np.maximum(net.inv_cap ** 2 - pbar ** 2, 0.0))
    starts += [
        np.concatenate([0.5 * pbar, z]),
        np.concatenate([pbar, -0.5 * qroom]),
        np.concatenate([0.8 * pbar, 0.5 * qroom]),
        np.concatenate([0.2 * pbar, z]),
    ]
    return starts


def label_oracle(net: NetworkData, x, starts=None, n_starts: int = 5, sens=None,
                 maxiter: int = 200) -> OracleResult:
    """Best feasible local optimum over ``n_starts`` starting points.

    Starts are tried in order; ``starts`` replaces :func:`default_starts`.
    """
    x = np.asarray(x, dtype=float)
    sens = sens if sens is not None else ReducedSensitivity(net, build_matrices(net))
    prob = _Problem(net, x, sens)
    _, _, pbar = net.split_scenario(x)
    bounds = [(0.0, float(b)) for b in pbar] + [(-float(c), float(c)) for c in net.inv_cap]
    cons = {"type": "ineq", "fun": prob.constraints, "jac": prob.constraints_jac}
    starts = default_starts(net, x) if starts is None else list(starts)
    best = None
    n_feasible = 0
    tried = 0
    for f0 in starts[:max(n_starts, 1)]:
        tried += 1
        f0 = np.clip(f0, [b[0] for b in bounds], [b[1] for b in bounds])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = minimize(prob.objective, f0, jac=prob.objective_grad, method="SLSQP",
                           bounds=bounds, constraints=[cons],
                           options={"maxiter": maxiter, "ftol": 1e-12})
        f = np.clip(res.x, [b[0] for b in bounds], [b[1] for b in bounds])
        rep = check_feasibility(net, f, x, FEAS_TOL)
        if not rep.feasible:
            continue
        n_feasible += 1
        obj = evaluate_objective(net, rep.state, f, x)
        if best is None or obj < best.objective - 1e-12:
            best = OracleResult(f, obj, 0, 0)
    if best is None:
        raise OracleFailure("no feasible local optimum from any start")
    best.starts_tried = tried
    best.feasible_starts = n_feasible
    return best


def local_projection(net: NetworkData, f_nn, x, sens=None, maxiter: int = 200) -> np.ndarray:
    """Nearest feasible dispatch to ``f_nn`` found by a local solver.

    Only a timing baseline for the bisection projection: SLSQP started at
    ``f_nn`` with the same limits as the label oracle.  Local, so the result
    is not the true minimum-distance point.  Raises OracleFailure when the
    solver ends infeasible.
    """
    x = np.asarray(x, dtype=float)
    f_nn = np.asarray(f_nn, dtype=float)
    sens = sens if sens is not None else ReducedSensitivity(net, build_matrices(net))
    prob = _Problem(net, x, sens)
    _, _, pbar = net.split_scenario(x)
    lo = np.concatenate([np.zeros_like(pbar), -net.inv_cap])
    hi = np.concatenate([pbar, net.inv_cap])
    cons = {"type": "ineq", "fun": prob.constraints, "jac": prob.constraints_jac}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = minimize(lambda f: 0.5 * np.sum((f - f_nn) ** 2), np.clip(f_nn, lo, hi),
                       jac=lambda f: f - f_nn, method="SLSQP", bounds=list(zip(lo, hi)),
                       constraints=[cons], options={"maxiter": maxiter, "ftol": 1e-12})
    f = np.clip(res.x, lo, hi)
    if not check_feasibility(net, f, x, FEAS_TOL).feasible:
        raise OracleFailure("local projection ended infeasible")
    return f
