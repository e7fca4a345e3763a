"""Convex inner approximation of the DistFlow feasible set.

Decision vector ``y = (P^PV, Q^PV, l_lo, l_hi)`` and scenario
``x = (P^L, Q^L, Pbar^PV)``.  Every constraint is affine in (y, x) except the
second-order-cone blocks, whose vector and bound parts are affine.

Row census (n branches, m PV units)::

    linear rows   2m + 5n   (PV box, l_lo <= l_hi, l_hi <= l_max,
                             V_lo >= v_min, V_hi <= v_max, Taylor lower envelope)
    SOC blocks    m + 4n    (inverter disks, four epigraph sign combinations)
    components    2m + 5n   (shared between the epigraph blocks of a branch)
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .network import DistFlowMatrices, NetworkData
from .powerflow import SystemState, solve_power_flow


class EnvelopeError(ValueError):
    pass


class AssemblyError(ValueError):
    pass


# --------------------------------------------------------------------------- affine algebra
@dataclass(frozen=True)
class Affine:
    """Stack of affine functions ``G y + K x + c``."""

    G: np.ndarray
    K: np.ndarray
    c: np.ndarray

    __array_ufunc__ = None  # make ndarray @ Affine dispatch to __rmatmul__

    def __add__(self, o):
        if isinstance(o, Affine):
            return Affine(self.G + o.G, self.K + o.K, self.c + o.c)
        return Affine(self.G, self.K, self.c + o)

    __radd__ = __add__

    def __neg__(self):
        return Affine(-self.G, -self.K, -self.c)

    def __sub__(self, o):
        return self + (-o)

    def __rsub__(self, o):
        return (-self) + o

    def __rmatmul__(self, M):
        return Affine(M @ self.G, M @ self.K, M @ self.c)

    def scale(self, w):
        """Row-wise scaling by vector ``w``."""
        w = np.asarray(w, dtype=float)
        return Affine(w[:, None] * self.G, w[:, None] * self.K, w * self.c)

    def __len__(self):
        return len(self.c)

    def __call__(self, y, x):
        return y @ self.G.T + x @ self.K.T + self.c

    @staticmethod
    def stack(parts):
        return Affine(np.vstack([p.G for p in parts]), np.vstack([p.K for p in parts]),
                      np.concatenate([p.c for p in parts]))


@dataclass(frozen=True)
class Layout:
    n: int
    m: int

    @property
    def ny(self):
        return 2 * self.m + 2 * self.n

    @property
    def nx(self):
        return 2 * self.n + self.m

    @property
    def ppv(self):
        return slice(0, self.m)

    @property
    def qpv(self):
        return slice(self.m, 2 * self.m)

    @property
    def dispatch(self):
        return slice(0, 2 * self.m)

    @property
    def l_lo(self):
        return slice(2 * self.m, 2 * self.m + self.n)

    @property
    def l_hi(self):
        return slice(2 * self.m + self.n, 2 * self.m + 2 * self.n)

    def var(self, sl: slice) -> Affine:
        size = sl.stop - sl.start
        G = np.zeros((size, self.ny))
        G[np.arange(size), np.arange(sl.start, sl.stop)] = 1.0
        return Affine(G, np.zeros((size, self.nx)), np.zeros(size))

    def param(self, start: int, size: int) -> Affine:
        K = np.zeros((size, self.nx))
        K[np.arange(size), start + np.arange(size)] = 1.0
        return Affine(np.zeros((size, self.ny)), K, np.zeros(size))

    def const(self, c) -> Affine:
        c = np.atleast_1d(np.asarray(c, dtype=float))
        return Affine(np.zeros((len(c), self.ny)), np.zeros((len(c), self.nx)), c)


# --------------------------------------------------------------------------- envelopes
@dataclass(frozen=True)
class CurrentEnvelope:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.lo) > np.asarray(self.hi)):
            raise EnvelopeError("current envelope needs l_lo <= l_hi")


@dataclass(frozen=True)
class AuxBounds:
    p_hi: np.ndarray
    p_lo: np.ndarray
    q_hi: np.ndarray
    q_lo: np.ndarray
    v_hi: np.ndarray
    v_lo: np.ndarray


def aux_bounds(mat: DistFlowMatrices, p, q, env: CurrentEnvelope) -> AuxBounds:
    """Interval bounds on branch flows and node voltages over l in [env.lo, env.hi]."""
    lo, hi = np.asarray(env.lo, dtype=float), np.asarray(env.hi, dtype=float)
    if np.any(lo > hi):
        raise EnvelopeError("current envelope needs l_lo <= l_hi")
    Cp, Cq = p @ mat.C.T, q @ mat.C.T
    (Rp, Rm), (Xp, Xm), (Hp, Hm) = mat.D_R_pm, mat.D_X_pm, mat.H_pm
    vb = mat.v0 - p @ mat.M_p.T - q @ mat.M_q.T
    return AuxBounds(
        p_hi=Cp + hi @ Rp.T + lo @ Rm.T, p_lo=Cp + lo @ Rp.T + hi @ Rm.T,
        q_hi=Cq + hi @ Xp.T + lo @ Xm.T, q_lo=Cq + lo @ Xp.T + hi @ Xm.T,
        v_hi=vb - lo @ Hp.T - hi @ Hm.T, v_lo=vb - hi @ Hp.T - lo @ Hm.T,
    )


# --------------------------------------------------------------------------- Taylor cuts
@dataclass(frozen=True)
class TaylorCuts:
    """First-order expansions of g(P, Q, V) = (P^2 + Q^2) / V, one per branch.

    ``jac[:, 0:3]`` holds (dg/dP, dg/dQ, dg/dV) at the expansion point and
    ``const`` the offset, so ``cut = jac . (P, Q, V) + const``.  Since g is
    positively homogeneous the offset is zero up to rounding.
    """

    p0: np.ndarray
    q0: np.ndarray
    v0: np.ndarray
    l0: np.ndarray
    jac: np.ndarray
    const: np.ndarray

    def __len__(self):
        return len(self.l0)

    @property
    def jac_pos(self):
        return np.where(self.jac > 0, self.jac, 0.0)

    @property
    def jac_neg(self):
        return np.where(self.jac < 0, self.jac, 0.0)

    def __call__(self, P, Q, V):
        return self.jac[:, 0] * P + self.jac[:, 1] * Q + self.jac[:, 2] * V + self.const


def current_function(P, Q, V):
    return (P ** 2 + Q ** 2) / V


def make_taylor_cuts(net: NetworkData, base: SystemState) -> TaylorCuts:
    vs = base.v[net.parent[1:]]
    if np.any(vs <= 0):
        raise ValueError("expansion point needs positive sending-end voltages")
    P0, Q0 = base.p_flow, base.q_flow
    g0 = current_function(P0, Q0, vs)
    jac = np.column_stack([2 * P0 / vs, 2 * Q0 / vs, -g0 / vs])
    const = g0 - (jac[:, 0] * P0 + jac[:, 1] * Q0 + jac[:, 2] * vs)
    return TaylorCuts(p0=P0.copy(), q0=Q0.copy(), v0=vs, l0=g0, jac=jac, const=const)


def nominal_expansion_state(net: NetworkData) -> SystemState:
    """Exact state at nominal loads, zero curtailment and zero reactive output."""
    f = np.concatenate([net.pv_avail, np.zeros(net.n_pv)])
    return solve_power_flow(net, f, net.nominal_scenario())


# --------------------------------------------------------------------------- the system
@dataclass(frozen=True, eq=False)
class InnerSystem:
    """``lin(y, x) <= 0`` rowwise and ``||comp[blk](y, x)||_2 <= bound[b](y, x)``
    for every SOC block b."""

    layout: Layout
    lin: Affine
    lin_family: np.ndarray
    comp: Affine
    bound: Affine
    blocks: np.ndarray          # (n_blocks, 3) component indices, -1 = unused
    block_family: np.ndarray
    soc_scale: np.ndarray
    pairing: str

    @property
    def n_lin(self):
        return len(self.lin)

    @property
    def n_blocks(self):
        return len(self.blocks)

    def soc_values(self, y, x):
        """Return (2-norm - bound) per block for a batch (B, n_blocks)."""
        comp = np.atleast_2d(self.comp(y, x))
        padded = np.concatenate([comp, np.zeros((comp.shape[0], 1))], axis=1)
        idx = np.where(self.blocks < 0, comp.shape[1], self.blocks)
        norms = np.sqrt(np.sum(padded[:, idx] ** 2, axis=2))
        return norms - np.atleast_2d(self.bound(y, x))


@dataclass
class Membership:
    inside: bool
    margins: dict[str, float]
    worst_linear: int
    worst_block: int


def inner_membership(sys: InnerSystem, y, x, tol: float = 1e-9) -> Membership:
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if y.shape != (sys.layout.ny,) or x.shape != (sys.layout.nx,):
        raise ValueError(f"expected y of length {sys.layout.ny} and x of length {sys.layout.nx}")
    lin = sys.lin(y, x)
    soc = sys.soc_values(y, x)[0]
    margins = {}
    for fam in np.unique(sys.lin_family):
        margins[str(fam)] = float(-lin[sys.lin_family == fam].max())
    for fam in np.unique(sys.block_family):
        margins[str(fam)] = float(-soc[sys.block_family == fam].max())
    inside = bool(lin.max(initial=-np.inf) <= tol and soc.max(initial=-np.inf) <= tol)
    return Membership(inside, margins, int(np.argmax(lin)) if len(lin) else -1,
                      int(np.argmax(soc)) if len(soc) else -1)


def membership_batch(sys: InnerSystem, Y, X, tol: float = 1e-9) -> np.ndarray:
    lin = np.atleast_2d(sys.lin(Y, X))
    soc = sys.soc_values(Y, X)
    return (lin.max(axis=1) <= tol) & (soc.max(axis=1) <= tol)


SOC_HEADROOM = 1.5


def _default_soc_scale(net: NetworkData, mat: DistFlowMatrices) -> np.ndarray:
    """Per-branch scale for the rotated-cone epigraph rows.

    The 2-norm block is exact for any positive scale; the scale only matters
    once the block is replaced by its 1-norm surrogate, where it should track
    the largest |P| + |Q| the branch can carry over the scenario range.
    The surrogate caps |P| + |Q| at scale * v_min, so the stress flow gets
    50% headroom for dispatch-driven flow and envelope widening.
    """
    pl, ql, pbar = net.split_scenario(net.nominal_scenario())
    z = np.zeros(net.n_pv)
    heavy = solve_power_flow(net, np.concatenate([z, z]), np.concatenate([1.25 * pl, 1.25 * ql, pbar]))
    light = solve_power_flow(net, np.concatenate([1.25 * pbar, z]),
                             np.concatenate([0.75 * pl, 0.75 * ql, 1.25 * pbar]))
    flow = np.maximum(np.abs(heavy.p_flow) + np.abs(heavy.q_flow),
                      np.abs(light.p_flow) + np.abs(light.q_flow))
    flow = np.maximum(flow, 1e-3)
    return SOC_HEADROOM * flow / net.v_min


def assemble_inner_system(net: NetworkData, mat: DistFlowMatrices, cuts: TaylorCuts,
                          pairing: str = "sound", soc_scale=None) -> InnerSystem:
    """Build the inner approximation.

    ``pairing="sound"`` lower-bounds the Taylor cut by pairing positive
    Jacobian entries with the lower auxiliary bounds; ``"letter"`` pairs them
    with the upper bounds, which does not yield a lower bound in general and
    is kept only for comparison.
    """
    n, m = net.n, net.n_pv
    if len(cuts) != n:
        raise AssemblyError(f"need one Taylor cut per branch ({n}), got {len(cuts)}")
    if pairing not in ("sound", "letter"):
        raise ValueError("pairing must be 'sound' or 'letter'")
    L = Layout(n, m)
    Ppv, Qpv, lo, hi = L.var(L.ppv), L.var(L.qpv), L.var(L.l_lo), L.var(L.l_hi)
    PL, QL, Pbar = L.param(0, n), L.param(n, n), L.param(2 * n, m)
    E = net.pv_map
    p = PL - E @ Ppv
    q = QL - E @ Qpv

    (Rp, Rm), (Xp, Xm), (Hp, Hm) = mat.D_R_pm, mat.D_X_pm, mat.H_pm
    P_hi = mat.C @ p + Rp @ hi + Rm @ lo
    P_lo = mat.C @ p + Rp @ lo + Rm @ hi
    Q_hi = mat.C @ q + Xp @ hi + Xm @ lo
    Q_lo = mat.C @ q + Xp @ lo + Xm @ hi
    vb = mat.v0 - (mat.M_p @ p) - (mat.M_q @ q)
    V_hi = vb - Hp @ lo - Hm @ hi
    V_lo = vb - Hp @ hi - Hm @ lo
    Vs_hi = mat.S @ V_hi + mat.v0 * mat.root
    Vs_lo = mat.S @ V_lo + mat.v0 * mat.root

    Jp, Jn = cuts.jac_pos, cuts.jac_neg
    if pairing == "sound":
        cut_lb = (P_lo.scale(Jp[:, 0]) + P_hi.scale(Jn[:, 0]) + Q_lo.scale(Jp[:, 1])
                  + Q_hi.scale(Jn[:, 1]) + Vs_lo.scale(Jp[:, 2]) + Vs_hi.scale(Jn[:, 2]) + cuts.const)
    else:
        cut_lb = (P_hi.scale(Jp[:, 0]) + P_lo.scale(Jn[:, 0]) + Q_hi.scale(Jp[:, 1])
                  + Q_lo.scale(Jn[:, 1]) + Vs_hi.scale(Jp[:, 2]) + Vs_lo.scale(Jn[:, 2]) + cuts.const)

    rows = [
        (-Ppv, "pv_lower"),
        (Ppv - Pbar, "pv_upper"),
        (lo - hi, "envelope_order"),
        (hi - net.l_max, "l_max"),
        (net.v_min - V_lo, "v_min"),
        (V_hi - net.v_max, "v_max"),
        (lo - cut_lb, "taylor"),
    ]
    lin = Affine.stack([r for r, _ in rows])
    lin_family = np.concatenate([[fam] * len(r) for r, fam in rows])

    alpha = _default_soc_scale(net, mat) if soc_scale is None else np.asarray(soc_scale, dtype=float)
    if alpha.shape != (n,) or np.any(alpha <= 0):
        raise AssemblyError("soc_scale must be positive, one entry per branch")
    # components: inverter (P, Q) per unit, then per branch 2P+, 2P-, 2Q+, 2Q-, a*vmin - l_hi/a.
    # ||(2P, 2Q, a*vmin - l/a)|| <= a*vmin + l/a  <=>  P^2 + Q^2 <= vmin * l  for any a > 0
    two = np.full(n, 2.0)
    comp = Affine.stack([
        Ppv, Qpv,
        P_hi.scale(two), P_lo.scale(two), Q_hi.scale(two), Q_lo.scale(two),
        alpha * net.v_min - hi.scale(1 / alpha),
    ])
    c_ph = 2 * m
    c_pl, c_qh, c_ql, c_w = c_ph + n, c_ph + 2 * n, c_ph + 3 * n, c_ph + 4 * n
    br = np.arange(n)
    inv_blocks = np.column_stack([np.arange(m), m + np.arange(m), np.full(m, -1)])
    epi_blocks = np.vstack([
        np.column_stack([c_ph + br, c_qh + br, c_w + br]),
        np.column_stack([c_ph + br, c_ql + br, c_w + br]),
        np.column_stack([c_pl + br, c_ql + br, c_w + br]),
        np.column_stack([c_pl + br, c_qh + br, c_w + br]),
    ])
    epi_bound = alpha * net.v_min + hi.scale(1 / alpha)
    bound = Affine.stack([L.const(net.inv_cap), epi_bound, epi_bound, epi_bound, epi_bound])
    return InnerSystem(
        layout=L, lin=lin, lin_family=lin_family, comp=comp, bound=bound,
        blocks=np.vstack([inv_blocks, epi_blocks]).astype(np.int64),
        block_family=np.array(["inverter"] * m + ["epigraph"] * (4 * n)),
        soc_scale=alpha, pairing=pairing,
    )


def dump_inner_system(sys: InnerSystem, path) -> None:
    """Write the assembled system as plain-text matrices for inspection."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name, aff in (("lin", sys.lin), ("comp", sys.comp), ("bound", sys.bound)):
        np.savetxt(path / f"{name}_G.txt", aff.G, fmt="%.10g")
        np.savetxt(path / f"{name}_K.txt", aff.K, fmt="%.10g")
        np.savetxt(path / f"{name}_c.txt", aff.c, fmt="%.10g")
    np.savetxt(path / "blocks.txt", sys.blocks, fmt="%d")
    (path / "families.txt").write_text(
        "\n".join(f"lin {i} {f}" for i, f in enumerate(sys.lin_family)) + "\n"
        + "\n".join(f"soc {i} {f}" for i, f in enumerate(sys.block_family)) + "\n")
