"""Feasibility restoration by bisection toward a certified interior point.

The candidate dispatch is pulled along the segment f_ip + kappa (f_nn - f_ip)
and kappa is bisected against the exact power-flow feasibility check.  The
feasible set is not convex, so the returned kappa is the end of the feasible
midpoint chain, not necessarily the largest feasible kappa on the segment.
"""
from __future__ import annotations

import contextlib
import csv
import gc
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .network import NetworkData
from .powerflow import (
    FEAS_TOL,
    PF_MAX_ITER,
    PF_TOL,
    PowerFlowError,
    _bisect,
    is_feasible,
    kernels,
    solve_power_flow,
)
from .robust import AffineRule, eval_interior_point

STATUS_PASSTHROUGH = 0
STATUS_BISECTED = 1


class CertificateFailure(RuntimeError):
    """The interior point handed to the projection is itself infeasible."""


@dataclass(frozen=True)
class BisectionConfig:
    max_iter: int = 30
    kappa_tol: float = 1e-6
    tol: float = FEAS_TOL

    def __post_init__(self):
        if not 0 < self.kappa_tol < 1:
            raise ValueError("kappa_tol must lie in (0, 1)")
        need = math.ceil(math.log2(1.0 / self.kappa_tol)) + 1
        if self.max_iter < need:
            raise ValueError(f"max_iter must be at least {need} to reach kappa_tol {self.kappa_tol}")


@dataclass
class ProjectionResult:
    f: np.ndarray
    kappa: float            # final lower bound, the one used for f
    kappa_hi: float
    iterations: int         # feasibility checks, counting the initial one on f_nn
    status: int             # STATUS_PASSTHROUGH or STATUS_BISECTED

    @property
    def feasible_before(self) -> bool:
        return self.status == STATUS_PASSTHROUGH


def project(net: NetworkData, f_nn, f_ip, x, cfg: BisectionConfig | None = None) -> ProjectionResult:
    """Bisect the segment from ``f_ip`` to ``f_nn`` for scenario ``x``.

    A feasible ``f_nn`` is returned unchanged after one check.  Otherwise
    ``f_ip`` is checked and a :class:`CertificateFailure` raised if it fails.
    """
    cfg = cfg or BisectionConfig()
    f_nn = np.ascontiguousarray(f_nn, dtype=float)
    f_ip = np.ascontiguousarray(f_ip, dtype=float)
    x = np.asarray(x, dtype=float)
    if f_nn.shape != (net.dispatch_dim,) or f_ip.shape != f_nn.shape or x.shape != (net.scenario_dim,):
        raise ValueError("dimension mismatch between network, dispatches and scenario")
    if not (np.all(np.isfinite(f_nn)) and np.all(np.isfinite(f_ip))):
        raise ValueError("dispatch must be finite")
    kn = kernels(net)
    pl, ql, pbar = (np.ascontiguousarray(a) for a in net.split_scenario(x))
    out = np.empty_like(f_nn)
    lo, hi, it, status = _bisect(kn.parent, kn.order, kn.r, kn.x, net.v0, net.v_min, net.v_max, kn.lmax,
                                 kn.pv_nodes, pbar, kn.cap, pl, ql,
                                 f_nn, f_ip, cfg.tol, PF_TOL, PF_MAX_ITER, cfg.kappa_tol, cfg.max_iter, out)
    if status == 2:
        raise CertificateFailure("interior point fails the exact feasibility check")
    if status == 0:
        return ProjectionResult(f_nn.copy(), 1.0, 1.0, it, STATUS_PASSTHROUGH)
    return ProjectionResult(out, lo, hi, it, STATUS_BISECTED)


@dataclass
class SampleRecord:
    sample: int
    kappa: float
    iterations: int
    feasible_before: bool
    feasible_after: bool
    objective_before: float
    objective_after: float
    seconds: float
    error: str = ""


@dataclass
class BatchProjection:
    outputs: np.ndarray
    records: list = field(default_factory=list)

    @property
    def times(self) -> np.ndarray:
        return np.array([r.seconds for r in self.records])

    @property
    def feasibility_rate(self) -> float:
        return float(np.mean([r.feasible_after for r in self.records])) if self.records else float("nan")

    def timing_stats(self) -> dict:
        t = self.times
        return {"mean": float(t.mean()), "median": float(np.median(t)), "std": float(t.std()),
                "p95": float(np.quantile(t, 0.95)), "max": float(t.max())}

    def write_csv(self, path):
        cols = list(SampleRecord.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.records:
                w.writerow([getattr(r, c) for c in cols])


def _objective(net, f, x):
    try:
        st = solve_power_flow(net, f, x)
    except PowerFlowError:
        return float("nan")
    _, _, pbar = net.split_scenario(x)
    return float(net.r @ st.l + np.sum(pbar - f[:net.n_pv]))


@contextlib.contextmanager
def gc_paused():
    """Pause the cyclic garbage collector around a timed region."""
    was = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was:
            gc.enable()


def batch_project(net: NetworkData, F_nn, X, rule: AffineRule, cfg: BisectionConfig | None = None,
                  objectives: bool = True, warmup: int = 3) -> BatchProjection:
    """Interior point plus projection for every (f_nn, x) pair.

    Timing covers the interior-point evaluation and the bisection only, with
    the garbage collector paused as timeit does.  Per sample failures are
    recorded and do not stop the batch.
    """
    rule.check_network(net)
    cfg = cfg or BisectionConfig()
    F_nn = np.atleast_2d(np.asarray(F_nn, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    for k in range(min(warmup, len(X))):  # compile and warm caches
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            try:
                project(net, F_nn[k], eval_interior_point(rule, X[k]), X[k], cfg)
            except (CertificateFailure, ValueError):
                pass
    out = np.full_like(F_nn, np.nan)
    recs = []
    clock = time.perf_counter
    for i, (f_nn, x) in enumerate(zip(F_nn, X)):
        err = ""
        with gc_paused():
            t0 = clock()
            try:
                f_ip = eval_interior_point(rule, x)
                res = project(net, f_nn, f_ip, x, cfg)
            except (CertificateFailure, ValueError) as exc:
                res, err = None, f"{type(exc).__name__}: {exc}"
            dt = clock() - t0
        if res is None:
            recs.append(SampleRecord(i, float("nan"), 0, False, False, float("nan"), float("nan"), dt, err))
            continue
        out[i] = res.f
        ob = _objective(net, f_nn, x) if objectives else float("nan")
        oa = ob if res.feasible_before else (_objective(net, res.f, x) if objectives else float("nan"))
        recs.append(SampleRecord(i, res.kappa, res.iterations, res.feasible_before,
                                is_feasible(net, res.f, x, cfg.tol), ob, oa, dt))
    return BatchProjection(out, recs)
