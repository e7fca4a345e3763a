"""Linear programs: a dense two-phase simplex and a sparse HiGHS route.

The simplex uses Bland's rule and is meant for small problems (tests,
degenerate boxes).  The robust counterpart of a full feeder has ~10^5
variables and goes through scipy's HiGHS interface instead.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

LP_TOL = 1e-9


class LPError(RuntimeError):
    pass


class LPInfeasible(LPError):
    pass


class LPUnbounded(LPError):
    pass


@dataclass
class LinearProgram:
    """maximize c.z  s.t.  A_ub z <= b_ub,  A_eq z = b_eq,  lb <= z <= ub."""

    c: np.ndarray
    A_ub: object = None
    b_ub: np.ndarray | None = None
    A_eq: object = None
    b_eq: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    layout: dict = field(default_factory=dict)

    @property
    def n_vars(self):
        return len(self.c)

    def _bounds(self):
        n = self.n_vars
        lb = np.zeros(n) if self.lb is None else np.asarray(self.lb, dtype=float)
        ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float)
        return lb, ub


@dataclass
class LPSolution:
    value: float
    z: np.ndarray
    iterations: int = 0
    method: str = ""


def solve_lp(lp: LinearProgram, method: str = "highs") -> LPSolution:
    """``highs``: scipy's HiGHS (simplex, exact vertex); ``ipm``: HiGHS barrier
    without crossover, much faster on the robust counterpart but only accurate
    to the barrier tolerance; ``simplex``: the dense tableau below."""
    if method == "highs":
        return _solve_highs(lp)
    if method == "ipm":
        return _solve_ipm(lp)
    if method == "simplex":
        A_ub = lp.A_ub.toarray() if sp.issparse(lp.A_ub) else lp.A_ub
        A_eq = lp.A_eq.toarray() if sp.issparse(lp.A_eq) else lp.A_eq
        lb, ub = lp._bounds()
        return simplex(np.asarray(lp.c, dtype=float), A_ub, lp.b_ub, A_eq, lp.b_eq, lb, ub)
    raise ValueError(f"unknown LP method {method!r}")


def _solve_highs(lp: LinearProgram) -> LPSolution:
    lb, ub = lp._bounds()
    bounds = np.column_stack([np.where(np.isfinite(lb), lb, -np.inf), np.where(np.isfinite(ub), ub, np.inf)])
    res = linprog(-np.asarray(lp.c, dtype=float), A_ub=lp.A_ub, b_ub=lp.b_ub, A_eq=lp.A_eq,
                  b_eq=lp.b_eq, bounds=bounds, method="highs",
                  options={"primal_feasibility_tolerance": 1e-9, "dual_feasibility_tolerance": 1e-9})
    if res.status == 2:
        raise LPInfeasible(res.message)
    if res.status == 3:
        raise LPUnbounded(res.message)
    if res.status != 0:
        raise LPError(res.message)
    return LPSolution(-res.fun, res.x, int(getattr(res, "nit", 0)), "highs")


def _solve_ipm(lp: LinearProgram, tol: float = 1e-9, verbose: bool = False) -> LPSolution:
    import highspy

    lb, ub = lp._bounds()
    n = lp.n_vars
    blocks, lo, hi = [], [], []
    if lp.A_ub is not None:
        blocks.append(sp.csr_matrix(lp.A_ub))
        lo.append(np.full(len(lp.b_ub), -np.inf))
        hi.append(np.asarray(lp.b_ub, dtype=float))
    if lp.A_eq is not None:
        blocks.append(sp.csr_matrix(lp.A_eq))
        lo.append(np.asarray(lp.b_eq, dtype=float))
        hi.append(np.asarray(lp.b_eq, dtype=float))
    A = sp.vstack(blocks).tocsr() if blocks else sp.csr_matrix((0, n))
    h = highspy.Highs()
    h.setOptionValue("output_flag", verbose)
    h.setOptionValue("solver", "ipm")
    h.setOptionValue("run_crossover", "off")
    h.setOptionValue("primal_feasibility_tolerance", tol)
    h.setOptionValue("dual_feasibility_tolerance", tol)
    h.setOptionValue("ipm_optimality_tolerance", tol)
    m = highspy.HighsLp()
    m.num_col_, m.num_row_ = n, A.shape[0]
    m.col_cost_ = np.asarray(lp.c, dtype=float)
    m.col_lower_ = np.where(np.isfinite(lb), lb, -highspy.kHighsInf)
    m.col_upper_ = np.where(np.isfinite(ub), ub, highspy.kHighsInf)
    rl, ru = (np.concatenate(lo), np.concatenate(hi)) if blocks else (np.zeros(0), np.zeros(0))
    m.row_lower_ = np.where(np.isfinite(rl), rl, -highspy.kHighsInf)
    m.row_upper_ = np.where(np.isfinite(ru), ru, highspy.kHighsInf)
    m.sense_ = highspy.ObjSense.kMaximize
    m.a_matrix_.format_ = highspy.MatrixFormat.kRowwise
    m.a_matrix_.num_col_, m.a_matrix_.num_row_ = n, A.shape[0]
    m.a_matrix_.start_ = A.indptr
    m.a_matrix_.index_ = A.indices
    m.a_matrix_.value_ = A.data
    h.passModel(m)
    h.run()
    status = h.getModelStatus()
    if status == highspy.HighsModelStatus.kInfeasible:
        raise LPInfeasible("no feasible point")
    if status in (highspy.HighsModelStatus.kUnbounded, highspy.HighsModelStatus.kUnboundedOrInfeasible):
        raise LPUnbounded(h.modelStatusToString(status))
    if status not in (highspy.HighsModelStatus.kOptimal, highspy.HighsModelStatus.kUnknown):
        raise LPError(h.modelStatusToString(status))
    z = np.asarray(h.getSolution().col_value)
    info = h.getInfo()
    return LPSolution(float(np.dot(lp.c, z)), z, int(info.ipm_iteration_count), "ipm")


# --------------------------------------------------------------------------- dense simplex
def simplex(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, lb=None, ub=None,
            tol: float = LP_TOL, max_iter: int = 50_000) -> LPSolution:
    """Maximize c.z by the two-phase tableau method with Bland's rule.

    Variables may be free (lb = -inf) or box-bounded; they are rewritten as
    nonnegative variables before the tableau is formed.
    """
    c = np.asarray(c, dtype=float)
    n = len(c)
    lb = np.zeros(n) if lb is None else np.asarray(lb, dtype=float)
    ub = np.full(n, np.inf) if ub is None else np.asarray(ub, dtype=float)
    A_ub = np.zeros((0, n)) if A_ub is None else np.atleast_2d(np.asarray(A_ub, dtype=float))
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, dtype=float)
    A_eq = np.zeros((0, n)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, dtype=float))
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float)

    # z = shift + T u with u >= 0
    cols = []
    shift = np.zeros(n)
    extra_ub = []
    for j in range(n):
        if np.isfinite(lb[j]):
            shift[j] = lb[j]
            cols.append((j, 1.0))
            if np.isfinite(ub[j]):
                extra_ub.append((len(cols) - 1, ub[j] - lb[j]))
        elif np.isfinite(ub[j]):
            shift[j] = ub[j]
            cols.append((j, -1.0))
        else:
            cols.append((j, 1.0))
            cols.append((j, -1.0))
    T = np.zeros((n, len(cols)))
    for k, (j, s) in enumerate(cols):
        T[j, k] = s
    nu = len(cols)
    Au = A_ub @ T
    bu = b_ub - A_ub @ shift
    if extra_ub:
        rows = np.zeros((len(extra_ub), nu))
        for i, (k, cap) in enumerate(extra_ub):
            rows[i, k] = 1.0
        Au = np.vstack([Au, rows])
        bu = np.concatenate([bu, [cap for _, cap in extra_ub]])
    Ae = A_eq @ T
    be = b_eq - A_eq @ shift
    cu = c @ T

    # standard form: [Au I; Ae 0] [u; slack] = [bu; be], rows with negative rhs flipped
    mu, me = len(bu), len(be)
    A = np.zeros((mu + me, nu + mu))
    A[:mu, :nu] = Au
    A[:mu, nu:] = np.eye(mu)
    A[mu:, :nu] = Ae
    b = np.concatenate([bu, be])
    neg = b < 0
    A[neg] *= -1
    b[neg] *= -1
    cost = np.concatenate([cu, np.zeros(mu)])
    z, value, iters = _two_phase(A, b, cost, tol, max_iter)
    u = z[:nu]
    x = shift + T @ u
    return LPSolution(float(c @ x), x, iters, "simplex")


def _pivot(tab, row, col):
    tab[row] /= tab[row, col]
    for i in range(tab.shape[0]):
        if i != row and tab[i, col] != 0.0:
            tab[i] -= tab[i, col] * tab[row]


def _run(tab, basis, n_cols, tol, max_iter, allowed):
    """Maximize with objective row tab[-1] holding reduced costs (negated)."""
    it = 0
    while True:
        obj = tab[-1, :n_cols]
        entering = -1
        for j in range(n_cols):  # Bland: smallest index with negative reduced cost
            if allowed[j] and obj[j] < -tol:
                entering = j
                break
        if entering < 0:
            return it
        colv = tab[:-1, entering]
        rhs = tab[:-1, -1]
        best, leave = np.inf, -1
        for i in range(len(colv)):
            if colv[i] > tol:
                ratio = rhs[i] / colv[i]
                if ratio < best - tol or (abs(ratio - best) <= tol and basis[i] < basis[leave]):
                    best, leave = ratio, i
        if leave < 0:
            raise LPUnbounded("objective unbounded")
        _pivot(tab, leave, entering)
        basis[leave] = entering
        it += 1
        if it > max_iter:
            raise LPError("simplex iteration limit")


def _two_phase(A, b, cost, tol, max_iter):
    m, n = A.shape
    # phase 1: artificials on every row
    tab = np.zeros((m + 1, n + m + 1))
    tab[:m, :n] = A
    tab[:m, n:n + m] = np.eye(m)
    tab[:m, -1] = b
    basis = list(range(n, n + m))
    tab[-1, :n] = -A.sum(axis=0)
    tab[-1, -1] = -b.sum()
    allowed = np.ones(n + m, dtype=bool)
    it = _run(tab, basis, n + m, tol, max_iter, allowed)
    if tab[-1, -1] < -1e-7 * max(1.0, np.abs(b).max(initial=0.0)):
        raise LPInfeasible("no feasible point")
    # drive remaining artificials out of the basis
    for i in range(m):
        if basis[i] >= n:
            nz = [j for j in range(n) if abs(tab[i, j]) > tol]
            if nz:
                _pivot(tab, i, nz[0])
                basis[i] = nz[0]
    keep = [i for i in range(m) if basis[i] < n]
    tab = np.vstack([tab[keep][:, list(range(n)) + [n + m]], np.zeros((1, n + 1))])
    basis = [basis[i] for i in keep]
    # phase 2
    tab[-1, :n] = -cost
    for i, j in enumerate(basis):
        tab[-1] -= tab[-1, j] * tab[i]
    it += _run(tab, basis, n, tol, max_iter, np.ones(n, dtype=bool))
    z = np.zeros(n)
    for i, j in enumerate(basis):
        z[j] = tab[i, -1]
    return z, float(cost @ z), it
