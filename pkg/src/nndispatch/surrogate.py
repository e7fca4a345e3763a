"""Neural dispatch surrogate: a small numpy MLP with hand-written backprop.

Training runs in two phases.  The first fits oracle labels by least squares
(the result is the "V-NN" model).  The second adds hinge penalties on voltage
and current limit violations of the exact power-flow state, differentiated
through the power flow with the implicit-function adjoint ("P-NN").
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .network import NetworkData, build_matrices
from .powerflow import feasible_batch, solve_batch
from .sensitivity import ReducedSensitivity, SensitivityError

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
# "box": Q = tanh(z) * S_bar, the disk may be violated.
# "disk": Q = tanh(z) * sqrt(S_bar^2 - P^2), the disk holds by construction.
Q_HEADS = ("box", "disk")
# "sigmoid": P = sigmoid(z) * P_bar, never exactly P_bar.
# "clip": P = clip(0.5 + z / 4, 0, 1) * P_bar, same slope at 0, reaches P_bar exactly.
P_HEADS = ("sigmoid", "clip")
_ROOM_FLOOR = 1e-12


class TrainingError(RuntimeError):
    def __init__(self, msg, epoch=None):
        super().__init__(msg if epoch is None else f"epoch {epoch}: {msg}")
        self.epoch = epoch


class BatchError(RuntimeError):
    """Every sample in a batch had a diverged power flow."""


# --------------------------------------------------------------------------- parameters
@dataclass
class MlpParams:
    """Weights ``Ws[k]`` of shape (fan_in, fan_out) and biases ``bs[k]``.

    Inputs are mapped affinely from [x_lo, x_hi] to [-1, 1] before the first
    layer; the last layer has 2m outputs (P logits, then Q pre-activations).
    """

    Ws: list
    bs: list
    x_lo: np.ndarray
    x_hi: np.ndarray
    q_head: str = "disk"
    p_head: str = "clip"

    @property
    def dims(self):
        return [self.Ws[0].shape[0]] + [W.shape[1] for W in self.Ws]

    @property
    def n_pv(self):
        return self.Ws[-1].shape[1] // 2

    def copy(self) -> "MlpParams":
        return MlpParams([W.copy() for W in self.Ws], [b.copy() for b in self.bs],
                         self.x_lo.copy(), self.x_hi.copy(), self.q_head, self.p_head)

    def arrays(self):
        return self.Ws + self.bs

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, v) -> "MlpParams":
        out = self.copy()
        i = 0
        for a in out.arrays():
            a[...] = v[i:i + a.size].reshape(a.shape)
            i += a.size
        return out

    def to_dict(self):
        return {"dims": self.dims, "Ws": [W.tolist() for W in self.Ws],
                "bs": [b.tolist() for b in self.bs],
                "x_lo": self.x_lo.tolist(), "x_hi": self.x_hi.tolist(), "q_head": self.q_head,
                "p_head": self.p_head}

    @classmethod
    def from_dict(cls, d):
        return cls([np.array(W, dtype=float) for W in d["Ws"]],
                   [np.array(b, dtype=float) for b in d["bs"]],
                   np.array(d["x_lo"], dtype=float), np.array(d["x_hi"], dtype=float),
                   d.get("q_head", "box"), d.get("p_head", "sigmoid"))


def init_params(net: NetworkData, x_lo, x_hi, hidden=(64, 64), seed: int = 0,
                q_head: str = "disk", p_head: str = "clip") -> MlpParams:
    if q_head not in Q_HEADS:
        raise ValueError(f"q_head must be one of {Q_HEADS}")
    if p_head not in P_HEADS:
        raise ValueError(f"p_head must be one of {P_HEADS}")
    rng = np.random.default_rng(seed)
    dims = [net.scenario_dim, *hidden, net.dispatch_dim]
    Ws, bs = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        Ws.append(rng.normal(0.0, 1.0 / math.sqrt(a), size=(a, b)))
        bs.append(np.zeros(b))
    return MlpParams(Ws, bs, np.asarray(x_lo, dtype=float).copy(), np.asarray(x_hi, dtype=float).copy(),
                     q_head, p_head)


def zero_params(net: NetworkData, x_lo, x_hi, hidden=(64, 64), q_head: str = "disk",
                p_head: str = "clip") -> MlpParams:
    p = init_params(net, x_lo, x_hi, hidden, q_head=q_head, p_head=p_head)
    for a in p.arrays():
        a[...] = 0.0
    return p


# --------------------------------------------------------------------------- forward / backward
def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _forward(params: MlpParams, net: NetworkData, X):
    X = np.atleast_2d(X)
    span = np.where(params.x_hi > params.x_lo, params.x_hi - params.x_lo, 1.0)
    h = 2.0 * (X - params.x_lo) / span - 1.0
    acts = [h]
    for W, b in zip(params.Ws[:-1], params.bs[:-1]):
        h = np.tanh(h @ W + b)
        acts.append(h)
    z = h @ params.Ws[-1] + params.bs[-1]
    m = net.n_pv
    _, _, pbar = net.split_scenario(X)
    sp_, dsp = _p_squash(params, z[:, :m])
    tq = np.tanh(z[:, m:])
    P = sp_ * pbar
    room = _q_room(params, net, P)
    F = np.concatenate([P, tq * room], axis=1)
    return F, (acts, z, dsp, tq, pbar, P, room)


def _p_squash(params, z):
    """Squashed P fraction in [0, 1] and its derivative."""
    if params.p_head == "clip":
        u = 0.5 + 0.25 * z
        inside = (u > 0.0) & (u < 1.0)
        return np.clip(u, 0.0, 1.0), np.where(inside, 0.25, 0.0)
    s = _sigmoid(z)
    return s, s * (1 - s)


def _q_room(params, net, P):
    if params.q_head == "disk":
        return np.sqrt(np.maximum(net.inv_cap ** 2 - P ** 2, _ROOM_FLOOR))
    return np.broadcast_to(net.inv_cap, P.shape)


def forward(params: MlpParams, x, net: NetworkData) -> np.ndarray:
    """Dispatch for one scenario (returns (2m,)) or a batch (returns (B, 2m))."""
    x = np.asarray(x, dtype=float)
    F, _ = _forward(params, net, x)
    return F[0] if x.ndim == 1 else F


def _backward(params: MlpParams, net: NetworkData, cache, gF):
    acts, z, dsp, tq, pbar, P, room = cache
    m = net.n_pv
    gP = gF[:, :m]
    if params.q_head == "disk":
        inside = net.inv_cap ** 2 - P ** 2 > _ROOM_FLOOR
        gP = gP - gF[:, m:] * tq * np.where(inside, P / room, 0.0)
    gz = np.concatenate([gP * pbar * dsp, gF[:, m:] * room * (1 - tq ** 2)], axis=1)
    gWs, gbs = [None] * len(params.Ws), [None] * len(params.bs)
    g = gz
    for k in range(len(params.Ws) - 1, -1, -1):
        gWs[k] = acts[k].T @ g
        gbs[k] = g.sum(axis=0)
        if k > 0:
            g = (g @ params.Ws[k].T) * (1 - acts[k] ** 2)
    return gWs, gbs


# --------------------------------------------------------------------------- loss
@dataclass
class LossInfo:
    supervised: float
    penalty: float
    skipped: int
    n_used: int


def penalty_terms(net: NetworkData, V, l, pi_v: float, pi_l: float):
    """Per-sample hinge penalty and its gradients with respect to V and l.

    V holds the n non-root squared voltages per row.
    """
    lo = np.maximum(0.0, net.v_min - V)
    hi = np.maximum(0.0, V - net.v_max)
    ol = np.maximum(0.0, l - net.l_max)
    pen = pi_v * (lo.sum(axis=1) + hi.sum(axis=1)) + pi_l * ol.sum(axis=1)
    gV = pi_v * ((V > net.v_max).astype(float) - (V < net.v_min).astype(float))
    gl = pi_l * (l > net.l_max).astype(float)
    return pen, gV, gl


def loss_and_grad(params: MlpParams, X, F_star, net: NetworkData, pi_v: float = 0.0,
                  pi_l: float = 0.0, sens: ReducedSensitivity | None = None, need_grad: bool = True):
    """Mean over the batch of ||f - f*||^2 + hinge penalties.

    With both weights zero no power flow is solved.  Samples whose power flow
    diverges are dropped from the batch and counted in ``LossInfo.skipped``.
    Returns (loss, grads, info) with grads a list matching ``params.arrays()``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    F_star = np.atleast_2d(np.asarray(F_star, dtype=float))
    if len(X) == 0:
        raise BatchError("empty batch")
    F, cache = _forward(params, net, X)
    B = len(X)
    use = np.ones(B, dtype=bool)
    pen = np.zeros(B)
    g_pen = np.zeros_like(F)
    if pi_v > 0 or pi_l > 0:
        Vall, l, P, Q, ok = solve_batch(net, X, F)
        use = ok
        if not ok.any():
            raise BatchError("power flow diverged for every sample in the batch")
        V = Vall[ok, 1:]
        pen_ok, gV, gl = penalty_terms(net, V, l[ok], pi_v, pi_l)
        pen[ok] = pen_ok
        if need_grad:
            active = np.flatnonzero(ok)[(np.abs(gV).sum(axis=1) + gl.sum(axis=1)) > 0]
            if len(active):
                sel = np.isin(np.flatnonzero(ok), active)
                sens = sens if sens is not None else ReducedSensitivity(net, build_matrices(net))
                try:
                    g_pen[active] = sens.vjp(V[sel], l[active], P[active], Q[active], gV[sel], gl[sel])
                except SensitivityError as exc:
                    raise BatchError(f"singular power-flow Jacobian in batch: {exc}") from exc
    n_used = int(use.sum())
    resid = F - F_star
    sup = np.sum(resid ** 2, axis=1)
    loss = float((sup[use].sum() + pen[use].sum()) / n_used)
    info = LossInfo(float(sup[use].mean()), float(pen[use].mean()), B - n_used, n_used)
    if not need_grad:
        return loss, None, info
    gF = (2 * resid + g_pen) * use[:, None] / n_used
    gWs, gbs = _backward(params, net, cache, gF)
    return loss, gWs + gbs, info


# --------------------------------------------------------------------------- training
@dataclass
class TrainConfig:
    hidden: tuple = (64, 64)
    lr: float = 2e-3
    pretrain_epochs: int = 2000
    epochs: int = 400           # penalty phase
    batch_size: int = 100
    pi_v: float = 1.0
    pi_l: float = 1.0
    decay: float = 0.5          # step decay factor
    decay_every: int = 200      # epochs per decay step, counted within each phase
    phase2_lr: float | None = 1e-4
    q_head: str = "disk"
    p_head: str = "clip"
    seed: int = 0

    def __post_init__(self):
        if self.pi_v < 0 or self.pi_l < 0:
            raise ValueError("penalty weights must be nonnegative")
        if self.batch_size < 1 or self.epochs < 0 or self.pretrain_epochs < 0:
            raise ValueError("batch_size must be positive and epoch counts nonnegative")
        self.hidden = tuple(int(h) for h in self.hidden)


@dataclass
class EpochRecord:
    phase: int
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_feasible: float
    skipped: int


@dataclass
class TrainResult:
    params: MlpParams          # best checkpoint of the penalty phase (P-NN)
    pretrained: MlpParams      # best checkpoint of the supervised phase (V-NN)
    log: list = field(default_factory=list)
    config: TrainConfig | None = None


class _Adam:
    def __init__(self, arrays, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, arrays, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            a -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _run_phase(params, net, Xtr, Ftr, Xva, Fva, cfg: TrainConfig, phase: int, n_epochs: int,
               lr: float, pi_v: float, pi_l: float, rng, sens, log):
    best, best_val = params.copy(), np.inf
    if n_epochs == 0:
        return best
    opt = _Adam(params.arrays(), lr)
    n = len(Xtr)
    for ep in range(n_epochs):
        opt.lr = lr * cfg.decay ** (ep // cfg.decay_every)
        perm = rng.permutation(n)
        tot, cnt, skipped = 0.0, 0, 0
        for s in range(0, n, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            try:
                loss, grads, info = loss_and_grad(params, Xtr[idx], Ftr[idx], net, pi_v, pi_l, sens)
            except BatchError:
                skipped += len(idx)
                continue
            if not np.isfinite(loss):
                raise TrainingError("loss is not finite", epoch=ep)
            opt.step(params.arrays(), grads)
            tot += loss * info.n_used
            cnt += info.n_used
            skipped += info.skipped
        val_loss, _, _ = loss_and_grad(params, Xva, Fva, net, pi_v, pi_l, sens, need_grad=False)
        feas = float(np.mean(feasible_batch(net, Xva, forward(params, Xva, net))))
        rec = EpochRecord(phase, ep, opt.lr, tot / max(cnt, 1), val_loss, feas, skipped)
        log.append(rec)
        if not np.isfinite(val_loss):
            raise TrainingError("validation loss is not finite", epoch=ep)
        if val_loss < best_val:
            best, best_val = params.copy(), val_loss
        if ep % 25 == 0 or ep == n_epochs - 1:
            logger.info("phase %d epoch %d lr %.2g train %.4g val %.4g val-feasible %.3f",
                        phase, ep, opt.lr, rec.train_loss, val_loss, feas)
    return best


def train(net: NetworkData, X_train, F_train, X_val, F_val, cfg: TrainConfig | None = None,
          x_lo=None, x_hi=None, init: MlpParams | None = None) -> TrainResult:
    """Supervised pre-training followed by penalty training.

    Each phase keeps the checkpoint with the lowest validation loss of its
    own objective.  Deterministic for a fixed ``cfg.seed``.
    """
    cfg = cfg or TrainConfig()
    X_train, F_train = np.asarray(X_train, float), np.asarray(F_train, float)
    X_val, F_val = np.asarray(X_val, float), np.asarray(F_val, float)
    x_lo = X_train.min(axis=0) if x_lo is None else x_lo
    x_hi = X_train.max(axis=0) if x_hi is None else x_hi
    params = init.copy() if init is not None else init_params(net, x_lo, x_hi, cfg.hidden, cfg.seed, cfg.q_head, cfg.p_head)
    rng = np.random.default_rng(cfg.seed + 1)
    sens = ReducedSensitivity(net, build_matrices(net))
    log: list = []
    pre = _run_phase(params, net, X_train, F_train, X_val, F_val, cfg, 1, cfg.pretrain_epochs,
                     cfg.lr, 0.0, 0.0, rng, sens, log)
    params = pre.copy()
    lr2 = cfg.lr if cfg.phase2_lr is None else cfg.phase2_lr
    post = _run_phase(params, net, X_train, F_train, X_val, F_val, cfg, 2, cfg.epochs,
                      lr2, cfg.pi_v, cfg.pi_l, rng, sens, log)
    return TrainResult(params=post, pretrained=pre, log=log, config=cfg)


# --------------------------------------------------------------------------- persistence
def save_model(path, params: MlpParams, net: NetworkData, cfg: TrainConfig | None = None,
               metrics: dict | None = None, pretrained: MlpParams | None = None):
    d = {"format": "nndispatch.mlp", "version": MODEL_FORMAT_VERSION,
         "network_fingerprint": net.fingerprint, "params": params.to_dict(),
         "config": asdict(cfg) if cfg is not None else None, "metrics": metrics or {}}
    if pretrained is not None:
        d["pretrained"] = pretrained.to_dict()
    Path(path).write_text(json.dumps(d))


def load_model(path, net: NetworkData | None = None):
    """Return (params, pretrained_or_None, metadata dict)."""
    d = json.loads(Path(path).read_text())
    if d.get("format") != "nndispatch.mlp" or d.get("version") != MODEL_FORMAT_VERSION:
        raise ValueError("not a supported model file")
    if net is not None and d["network_fingerprint"] != net.fingerprint:
        raise ValueError("model was trained for a different network")
    pre = MlpParams.from_dict(d["pretrained"]) if "pretrained" in d else None
    return MlpParams.from_dict(d["params"]), pre, d
