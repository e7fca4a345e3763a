"""Exact DistFlow power flow, feasibility and objective oracles.

The backward/forward sweep runs in a compiled kernel; everything that calls
the power flow in a loop (bisection, label generation, training) goes
through the same kernel.
"""
from __future__ import annotations

import weakref
from dataclasses import dataclass, field

import numba
import numpy as np

from .network import NetworkData

PF_TOL = 1e-10
PF_MAX_ITER = 200
FEAS_TOL = 1e-6

_OK, _DIVERGED, _COLLAPSE = 0, 1, 2


class PowerFlowError(RuntimeError):
    pass


class PowerFlowDivergence(PowerFlowError):
    """Sweep did not settle within the iteration cap."""


class VoltageCollapse(PowerFlowError):
    """A squared voltage became non-positive during the sweep."""


@numba.njit(cache=True)
def _sweep(parent, order, r, x, p, q, v0, tol, max_iter, V, l, P, Q):
    """Fixed-point sweep on node-indexed arrays of length n+1 (entry 0 unused
    except V[0]).  ``l`` holds the warm start on entry.  Returns (status, iters)."""
    n = len(order)
    V[0] = v0
    Vold = np.empty_like(V)
    it = 0
    status = _DIVERGED
    while it < max_iter:
        it += 1
        # backward: accumulate downstream consumption and losses
        for k in range(1, n + 1):
            P[k] = p[k] + r[k] * l[k]
            Q[k] = q[k] + x[k] * l[k]
        for i in range(n - 1, -1, -1):
            k = order[i]
            j = parent[k]
            if j > 0:
                P[j] += P[k]
                Q[j] += Q[k]
        # forward: voltage drop from the root outwards
        for i in range(n):
            k = order[i]
            Vold[k] = V[k]
            V[k] = V[parent[k]] - 2.0 * (r[k] * P[k] + x[k] * Q[k]) + (r[k] * r[k] + x[k] * x[k]) * l[k]
            if not V[k] > 0.0:
                return _COLLAPSE, it
        dv = 0.0
        dl = 0.0
        for k in range(1, n + 1):
            lk = (P[k] * P[k] + Q[k] * Q[k]) / V[parent[k]]
            dl = max(dl, abs(lk - l[k]))
            l[k] = lk
            if it > 1:
                dv = max(dv, abs(V[k] - Vold[k]))
        if not (dl < 1e300):
            return _DIVERGED, it
        if it > 1 and dv <= tol and dl <= tol:
            status = _OK
            break
    # leave P, Q, V consistent with the final l
    for k in range(1, n + 1):
        P[k] = p[k] + r[k] * l[k]
        Q[k] = q[k] + x[k] * l[k]
    for i in range(n - 1, -1, -1):
        k = order[i]
        j = parent[k]
        if j > 0:
            P[j] += P[k]
            Q[j] += Q[k]
    for i in range(n):
        k = order[i]
        V[k] = V[parent[k]] - 2.0 * (r[k] * P[k] + x[k] * Q[k]) + (r[k] * r[k] + x[k] * x[k]) * l[k]
        if not V[k] > 0.0:
            return _COLLAPSE, it
    return status, it


@numba.njit(cache=True)
def _nodal(n, pv_nodes, pl, ql, ppv, qpv, p, q):
    p[0] = 0.0
    q[0] = 0.0
    for k in range(1, n + 1):
        p[k] = pl[k - 1]
        q[k] = ql[k - 1]
    for i in range(len(pv_nodes)):
        p[pv_nodes[i]] -= ppv[i]
        q[pv_nodes[i]] -= qpv[i]


@numba.njit(cache=True)
def _feasible(parent, order, r, x, v0, vmin, vmax, lmax, pv_nodes, pbar, cap,
              pl, ql, ppv, qpv, tol, pf_tol, max_iter, l, V, P, Q, p, q):
    """Exact feasibility test; ``l`` carries the sweep warm start in and out."""
    n = len(order)
    for i in range(len(pv_nodes)):
        if ppv[i] < -tol or ppv[i] > pbar[i] + tol:
            return False
        if ppv[i] * ppv[i] + qpv[i] * qpv[i] > cap[i] * cap[i] + tol:
            return False
    _nodal(n, pv_nodes, pl, ql, ppv, qpv, p, q)
    status, _ = _sweep(parent, order, r, x, p, q, v0, pf_tol, max_iter, V, l, P, Q)
    if status != _OK:
        for k in range(n + 1):
            l[k] = 0.0
        return False
    for k in range(1, n + 1):
        if V[k] < vmin - tol or V[k] > vmax + tol or l[k] > lmax[k - 1] + tol:
            return False
    return True


@numba.njit(cache=True)
def _bisect(parent, order, r, x, v0, vmin, vmax, lmax, pv_nodes, pbar, cap,
            pl, ql, f_nn, f_ip, tol, pf_tol, pf_max_iter, kappa_tol, max_iter, out):
    """Bisection on the segment f_ip + kappa (f_nn - f_ip).

    Returns (kappa_l, kappa_u, iterations, status) with status 0 = f_nn feasible,
    1 = bisected, 2 = f_ip infeasible.  ``out`` receives the returned point.
    """
    n = len(order)
    m = len(pv_nodes)
    l = np.zeros(n + 1)
    V = np.empty(n + 1)
    P = np.empty(n + 1)
    Q = np.empty(n + 1)
    p = np.empty(n + 1)
    q = np.empty(n + 1)
    if _feasible(parent, order, r, x, v0, vmin, vmax, lmax, pv_nodes, pbar, cap, pl, ql,
                 f_nn[:m], f_nn[m:], tol, pf_tol, pf_max_iter, l, V, P, Q, p, q):
        out[:] = f_nn
        return 1.0, 1.0, 1, 0
    l[:] = 0.0
    if not _feasible(parent, order, r, x, v0, vmin, vmax, lmax, pv_nodes, pbar, cap, pl, ql,
                     f_ip[:m], f_ip[m:], tol, pf_tol, pf_max_iter, l, V, P, Q, p, q):
        out[:] = f_ip
        return 0.0, 1.0, 1, 2
    lo = 0.0
    hi = 1.0
    it = 1
    d = f_nn - f_ip
    mid_f = np.empty_like(f_nn)
    while it < max_iter and hi - lo > kappa_tol:
        it += 1
        mid = 0.5 * (lo + hi)
        for i in range(2 * m):
            mid_f[i] = f_ip[i] + mid * d[i]
        if _feasible(parent, order, r, x, v0, vmin, vmax, lmax, pv_nodes, pbar, cap, pl, ql,
                     mid_f[:m], mid_f[m:], tol, pf_tol, pf_max_iter, l, V, P, Q, p, q):
            lo = mid
        else:
            hi = mid
    for i in range(2 * m):
        out[i] = f_ip[i] + lo * d[i]
    return lo, hi, it, 1


class _Kernels:
    """Contiguous arrays in the layout the compiled kernels expect."""

    def __init__(self, net: NetworkData, r=None, x=None):
        n = net.n
        self.parent = np.ascontiguousarray(net.parent)
        self.order = np.ascontiguousarray(net.order)
        self.r = np.zeros(n + 1)
        self.x = np.zeros(n + 1)
        self.r[1:] = net.r if r is None else r
        self.x[1:] = net.x if x is None else x
        self.lmax = np.ascontiguousarray(net.l_max)
        self.pv_nodes = np.ascontiguousarray(net.pv_nodes)
        self.cap = np.ascontiguousarray(net.inv_cap)


_KERNEL_CACHE: "weakref.WeakKeyDictionary[NetworkData, _Kernels]" = weakref.WeakKeyDictionary()


def kernels(net: NetworkData) -> _Kernels:
    k = _KERNEL_CACHE.get(net)
    if k is None:
        k = _KERNEL_CACHE[net] = _Kernels(net)
    return k


@dataclass
class SystemState:
    """Power-flow state: ``v`` includes the substation at index 0, the branch
    arrays are indexed by receiving node minus one."""

    v: np.ndarray
    l: np.ndarray
    p_flow: np.ndarray
    q_flow: np.ndarray
    iterations: int = 0


def sending_voltage(net: NetworkData, state: SystemState) -> np.ndarray:
    return state.v[net.parent[1:]]


def solve_power_flow(net: NetworkData, d, x=None, tol: float = PF_TOL,
                     max_iter: int = PF_MAX_ITER) -> SystemState:
    """Backward/forward sweep for dispatch ``d`` under scenario ``x``
    (nominal loads and PV availability when ``x`` is None)."""
    d = np.asarray(d, dtype=float)
    if not np.all(np.isfinite(d)):
        raise ValueError("dispatch must be finite")
    x = net.nominal_scenario() if x is None else np.asarray(x, dtype=float)
    p, q = net.injections(x, d)
    kn = kernels(net)
    n = net.n
    pp = np.zeros(n + 1)
    qq = np.zeros(n + 1)
    pp[1:], qq[1:] = p, q
    V = np.zeros(n + 1)
    l = np.zeros(n + 1)
    P = np.zeros(n + 1)
    Q = np.zeros(n + 1)
    status, it = _sweep(kn.parent, kn.order, kn.r, kn.x, pp, qq, net.v0, tol, max_iter, V, l, P, Q)
    if status == _COLLAPSE:
        raise VoltageCollapse("non-positive squared voltage during sweep")
    if status == _DIVERGED:
        raise PowerFlowDivergence(f"no convergence in {max_iter} iterations")
    return SystemState(v=V, l=l[1:].copy(), p_flow=P[1:].copy(), q_flow=Q[1:].copy(), iterations=it)


def pf_residuals(net: NetworkData, state: SystemState, d, x=None) -> dict[str, float]:
    """Max absolute residual of each DistFlow equation family."""
    x = net.nominal_scenario() if x is None else x
    p, q = net.injections(x, d)
    P, Q, l, V = state.p_flow, state.q_flow, state.l, state.v
    child_P = np.zeros(net.n + 1)
    child_Q = np.zeros(net.n + 1)
    np.add.at(child_P, net.parent[1:], P)
    np.add.at(child_Q, net.parent[1:], Q)
    vs = V[net.parent[1:]]
    return {
        "p_balance": float(np.max(np.abs(P - p - child_P[1:] - net.r * l), initial=0.0)),
        "q_balance": float(np.max(np.abs(Q - q - child_Q[1:] - net.x * l), initial=0.0)),
        "voltage_drop": float(np.max(np.abs(vs - V[1:] - 2 * (net.r * P + net.x * Q)
                                            + (net.r ** 2 + net.x ** 2) * l), initial=0.0)),
        "current": float(np.max(np.abs(l * vs - P ** 2 - Q ** 2), initial=0.0)),
    }


@dataclass
class FeasibilityReport:
    feasible: bool
    diverged: bool = False
    violations: dict[str, float] = field(default_factory=dict)
    state: SystemState | None = None

    def __bool__(self):
        return self.feasible


def check_feasibility(net: NetworkData, d, x=None, tol: float = FEAS_TOL) -> FeasibilityReport:
    """Exact feasibility of dispatch ``d``.  Violations are reported as the
    worst excess per constraint family (0 when satisfied)."""
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    x = net.nominal_scenario() if x is None else np.asarray(x, dtype=float)
    _, _, pbar = net.split_scenario(x)
    ppv, qpv = net.split_dispatch(d)
    viol = {
        "pv_lower": float(np.max(-ppv, initial=0.0)),
        "pv_upper": float(np.max(ppv - pbar, initial=0.0)),
        "inverter": float(np.max(ppv ** 2 + qpv ** 2 - net.inv_cap ** 2, initial=0.0)),
    }
    try:
        state = solve_power_flow(net, d, x)
    except PowerFlowError as exc:
        viol["power_flow"] = str(exc)
        return FeasibilityReport(False, diverged=True, violations=viol)
    viol["v_min"] = float(np.max(net.v_min - state.v[1:], initial=0.0))
    viol["v_max"] = float(np.max(state.v[1:] - net.v_max, initial=0.0))
    viol["l_max"] = float(np.max(state.l - net.l_max, initial=0.0))
    ok = all(max(v, 0.0) <= tol for v in viol.values())
    return FeasibilityReport(ok, violations=viol, state=state)


def is_feasible(net: NetworkData, d, x=None, tol: float = FEAS_TOL) -> bool:
    """Compiled fast path of :func:`check_feasibility` (same verdict)."""
    x = net.nominal_scenario() if x is None else np.asarray(x, dtype=float)
    pl, ql, pbar = net.split_scenario(x)
    d = np.asarray(d, dtype=float)
    kn = kernels(net)
    n = net.n
    buf = [np.zeros(n + 1) for _ in range(6)]
    m = net.n_pv
    return bool(_feasible(kn.parent, kn.order, kn.r, kn.x, net.v0, net.v_min, net.v_max, kn.lmax,
                          kn.pv_nodes, np.ascontiguousarray(pbar), kn.cap,
                          np.ascontiguousarray(pl), np.ascontiguousarray(ql),
                          np.ascontiguousarray(d[:m]), np.ascontiguousarray(d[m:]),
                          tol, PF_TOL, PF_MAX_ITER, *buf))


def evaluate_objective(net: NetworkData, state: SystemState, d, x=None) -> float:
    """Line losses plus curtailed PV energy."""
    x = net.nominal_scenario() if x is None else np.asarray(x, dtype=float)
    _, _, pbar = net.split_scenario(x)
    ppv, _ = net.split_dispatch(d)
    return float(np.dot(net.r, state.l) + np.sum(pbar - ppv))


def solve_batch(net: NetworkData, X, F, tol: float = PF_TOL, max_iter: int = PF_MAX_ITER):
    """Power flow for many (scenario, dispatch) pairs.

    Returns (V, l, P, Q, ok) with V of shape (B, n+1) and a boolean mask of
    converged samples; failed rows are NaN.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    F = np.atleast_2d(np.asarray(F, dtype=float))
    B = X.shape[0]
    n = net.n
    pl, ql, _ = net.split_scenario(X)
    p, q = net.injections(X, F)
    kn = kernels(net)
    Vs = np.full((B, n + 1), np.nan)
    ls = np.full((B, n), np.nan)
    Ps = np.full((B, n), np.nan)
    Qs = np.full((B, n), np.nan)
    ok = np.zeros(B, dtype=bool)
    pp = np.zeros(n + 1)
    qq = np.zeros(n + 1)
    V = np.zeros(n + 1)
    l = np.zeros(n + 1)
    P = np.zeros(n + 1)
    Q = np.zeros(n + 1)
    for b in range(B):
        pp[1:], qq[1:] = p[b], q[b]
        l[:] = 0.0
        status, _ = _sweep(kn.parent, kn.order, kn.r, kn.x, pp, qq, net.v0, tol, max_iter, V, l, P, Q)
        if status == _OK:
            ok[b] = True
            Vs[b], ls[b], Ps[b], Qs[b] = V, l[1:], P[1:], Q[1:]
    return Vs, ls, Ps, Qs, ok


def feasible_batch(net: NetworkData, X, F, tol: float = FEAS_TOL) -> np.ndarray:
    X = np.atleast_2d(X)
    F = np.atleast_2d(F)
    return np.array([is_feasible(net, f, x, tol) for x, f in zip(X, F)], dtype=bool)


def objective_batch(net: NetworkData, X, F, l) -> np.ndarray:
    _, _, pbar = net.split_scenario(X)
    ppv, _ = net.split_dispatch(F)
    return l @ net.r + np.sum(pbar - ppv, axis=-1)
