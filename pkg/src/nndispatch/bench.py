"""Dataset generation and the V-NN / P-NN / B-NN comparison."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .network import NetworkData, build_matrices
from .oracle import OracleFailure, default_starts, label_oracle
from .powerflow import FEAS_TOL, check_feasibility, evaluate_objective, feasible_batch
from .robust import AffineRule, ScenarioBox, eval_interior_point
from .sensitivity import ReducedSensitivity

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
RESAMPLE_CAP = 0.01


class DatasetError(RuntimeError):
    pass


@dataclass
class LabeledDataset:
    x: np.ndarray            # (N, nx)
    f: np.ndarray            # (N, 2m)
    obj: np.ndarray          # (N,)
    split: np.ndarray        # (N,) ints indexing SPLITS
    fingerprint: str = ""
    seed: int = 0
    resampled: int = 0

    def __len__(self):
        return len(self.x)

    def part(self, name: str):
        k = SPLITS.index(name)
        sel = self.split == k
        return self.x[sel], self.f[sel], self.obj[sel]

    def sizes(self):
        return tuple(int(np.sum(self.split == k)) for k in range(3))

    def save(self, path):
        np.savez(path, x=self.x, f=self.f, obj=self.obj, split=self.split,
                 meta=json.dumps({"fingerprint": self.fingerprint, "seed": self.seed,
                                  "resampled": self.resampled}))

    @classmethod
    def load(cls, path, net: NetworkData | None = None) -> "LabeledDataset":
        with np.load(path) as z:
            meta = json.loads(str(z["meta"]))
            ds = cls(z["x"], z["f"], z["obj"], z["split"], **meta)
        if net is not None and ds.fingerprint != net.fingerprint:
            raise DatasetError("dataset was labelled on a different network")
        return ds


def split_counts(count: int) -> tuple[int, int, int]:
    """5:1:1 split; exact when count is divisible by 7, remainder to training."""
    n_val = n_test = count // 7
    return count - n_val - n_test, n_val, n_test


def generate_dataset(net: NetworkData, seed: int = 0, count: int = 7000, radius: float = 0.25,
                     rule: AffineRule | None = None, n_starts: int = 5, progress=None) -> LabeledDataset:
    """Uniform scenarios in [1 - radius, 1 + radius] x nominal, labelled by the oracle.

    A sample whose oracle fails is redrawn; more than 1 % redraws is an error.
    With a rule, its interior point is one of the oracle starts.
    """
    if count < 1:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(seed)
    box = ScenarioBox.around(net, radius)
    sens = ReducedSensitivity(net, build_matrices(net))
    cap = max(1, math.ceil(RESAMPLE_CAP * count))
    X, F, obj = [], [], []
    resampled = 0
    while len(X) < count:
        x = box.sample(rng, 1)[0]
        extra = None
        if rule is not None:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                extra = [eval_interior_point(rule, x)]
        try:
            res = label_oracle(net, x, starts=default_starts(net, x, extra), n_starts=n_starts, sens=sens)
        except OracleFailure:
            resampled += 1
            if resampled > cap:
                raise DatasetError(f"label oracle failed on more than {cap} draws")
            continue
        X.append(x)
        F.append(res.f)
        obj.append(res.objective)
        if progress is not None:
            progress(len(X), count)
    split = np.concatenate([np.full(c, k) for k, c in enumerate(split_counts(count))])
    split = split[np.random.default_rng(seed + 7).permutation(count)]
    return LabeledDataset(np.array(X), np.array(F), np.array(obj), split.astype(np.int64),
                          net.fingerprint, seed, resampled)


# --------------------------------------------------------------------------- benchmark
METHODS = ("V-NN", "P-NN", "B-NN")


@dataclass
class MethodRow:
    method: str
    gap_mean: float          # % over samples counted in gap_count
    gap_median: float
    gap_count: int
    gap_negative: int        # samples where the method beats the local oracle
    feasibility: float       # % over all samples
    infer_time: float        # mean seconds per sample
    proj_time: float         # mean seconds per sample, nan without projection
    proj_time_median: float = float("nan")
    proj_time_std: float = float("nan")


@dataclass
class BenchReport:
    rows: dict
    samples: list = field(default_factory=list)   # per-sample dicts (boxplot data)
    meta: dict = field(default_factory=dict)

    def row(self, method: str) -> MethodRow:
        return self.rows[method]

    def write_csv(self, path):
        cols = list(MethodRow.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.rows.values():
                w.writerow([getattr(r, c) for c in cols])

    def write_samples_csv(self, path):
        if not self.samples:
            return
        cols = list(self.samples[0])
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            w.writerows(self.samples)

    def summary(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and not math.isfinite(v) else v
        return {"methods": {k: {c: clean(v) for c, v in asdict(r).items()} for k, r in self.rows.items()},
                "meta": self.meta}

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.summary(), indent=2))


def _timed_forward(params, X, net, repeat: int = 1) -> tuple[np.ndarray, np.ndarray]:
    from .projection import gc_paused
    from .surrogate import forward
    for x in X[:3]:  # warm-up
        forward(params, x, net)
    clock = time.perf_counter
    F = np.empty((len(X), net.dispatch_dim))
    t = np.empty(len(X))
    for i, x in enumerate(X):
        with gc_paused():
            t0 = clock()
            for _ in range(repeat):
                F[i] = forward(params, x, net)
            t[i] = (clock() - t0) / repeat
    return F, t


def _gaps(net, X, F, labels_obj):
    obj = np.array([_objective_or_nan(net, f, x) for f, x in zip(F, X)])
    return obj, (obj - labels_obj) / np.abs(labels_obj) * 100


def _objective_or_nan(net, f, x):
    rep = check_feasibility(net, f, x)
    if rep.state is None:
        return float("nan")
    return evaluate_objective(net, rep.state, f, x)


def _row(name, gap, feas, t_inf, t_proj=None):
    use = feas & np.isfinite(gap)
    g = gap[use]
    nan = float("nan")
    tp = np.asarray(t_proj) if t_proj is not None else None
    return MethodRow(name, float(g.mean()) if len(g) else nan, float(np.median(g)) if len(g) else nan,
                     int(use.sum()), int(np.sum(g < 0)), float(feas.mean() * 100), float(t_inf.mean()),
                     float(tp.mean()) if tp is not None else nan,
                     float(np.median(tp)) if tp is not None else nan,
                     float(tp.std()) if tp is not None else nan)


def run_benchmark(net: NetworkData, dataset: LabeledDataset, p_nn, v_nn, rule: AffineRule,
                  split: str = "test", limit: int | None = None, proj_cfg=None,
                  solver_baseline: bool = False) -> BenchReport:
    """V-NN, P-NN and B-NN on one split of a labelled dataset.

    Gaps are averaged over feasible outputs only: V-NN and P-NN outputs that
    violate a limit drop out of the gap but count against feasibility; B-NN
    is scored after projection.  With ``solver_baseline`` the infeasible
    P-NN outputs are also projected by a local solver for a timing row.
    """
    from .oracle import local_projection
    from .projection import batch_project, gc_paused
    from .surrogate import MlpParams

    if dataset.fingerprint and dataset.fingerprint != net.fingerprint:
        raise DatasetError("dataset was labelled on a different network")
    rule.check_network(net)
    for p in (p_nn, v_nn):
        if not isinstance(p, MlpParams):
            raise TypeError("models must be MlpParams")
    X, F_star, O_star = dataset.part(split)
    if limit is not None:
        X, F_star, O_star = X[:limit], F_star[:limit], O_star[:limit]
    if len(X) == 0:
        raise DatasetError(f"split {split!r} is empty")

    rows, per = {}, {}
    outputs = {}
    for name, params in (("V-NN", v_nn), ("P-NN", p_nn)):
        F, t = _timed_forward(params, X, net)
        feas = feasible_batch(net, X, F)
        obj, gap = _gaps(net, X, F, O_star)
        rows[name] = _row(name, gap, feas, t)
        per[name] = (feas, gap, t)
        outputs[name] = F

    F_p, t_p = outputs["P-NN"], per["P-NN"][2]
    bp = batch_project(net, F_p, X, rule, proj_cfg, objectives=False)
    F_b = bp.outputs
    feas_b = np.array([r.feasible_after for r in bp.records])
    _, gap_b = _gaps(net, X, np.where(np.isfinite(F_b), F_b, 0.0), O_star)
    t_proj = bp.times
    rows["B-NN"] = _row("B-NN", gap_b, feas_b, t_p + t_proj, t_proj)

    t_solver = np.full(len(X), np.nan)
    if solver_baseline:
        sens = ReducedSensitivity(net, build_matrices(net))
        clock = time.perf_counter
        feas_s = per["P-NN"][0].copy()
        F_s = F_p.copy()
        for i in np.flatnonzero(~per["P-NN"][0]):
            with gc_paused():
                t0 = clock()
                try:
                    F_s[i] = local_projection(net, F_p[i], X[i], sens)
                    feas_s[i] = True
                except OracleFailure:
                    pass
                t_solver[i] = clock() - t0
        _, gap_s = _gaps(net, X, F_s, O_star)
        sel = np.isfinite(t_solver)
        rows["S-NN"] = _row("S-NN", gap_s, feas_s, t_p + np.nan_to_num(t_solver),
                            t_solver[sel] if sel.any() else np.array([np.nan]))

    samples = []
    for i, rec in enumerate(bp.records):
        samples.append({
            "sample": i,
            "vnn_feasible": bool(per["V-NN"][0][i]), "vnn_gap": float(per["V-NN"][1][i]),
            "pnn_feasible": bool(per["P-NN"][0][i]), "pnn_gap": float(per["P-NN"][1][i]),
            "bnn_feasible": bool(rec.feasible_after), "bnn_gap": float(gap_b[i]),
            "kappa": rec.kappa, "iterations": rec.iterations,
            "infer_seconds": float(t_p[i]), "proj_seconds": rec.seconds,
            "solver_proj_seconds": float(t_solver[i]),
        })
    meta = {"network": net.name, "fingerprint": net.fingerprint, "split": split, "samples": len(X),
            "rule_s_star": rule.s_star, "feas_tol": FEAS_TOL,
            "gap_convention": "mean over feasible outputs; B-NN after projection"}
    return BenchReport(rows, samples, meta)
