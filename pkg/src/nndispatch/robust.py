"""Affine interior-point rule fitted by robust linear programming.

The rule maps a scenario x to ``y(x) = W x + w`` and is chosen to maximise a
uniform slack ``s`` such that y(x) satisfies the inner approximation with
margin ``s`` for every x in the scenario box.  Linear rows are made robust
through the box-support dual; SOC blocks are first replaced by the stronger
1-norm condition, whose absolute values get affinely adjustable epigraph
variables, and the resulting linear rows are dualised the same way.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .inner import InnerSystem
from .lp import LinearProgram, LPError, solve_lp
from .network import NetworkData

logger = logging.getLogger(__name__)

RULE_FORMAT_VERSION = 1


# slack fraction the PV bound rows keep in the refinement LP
BOX_MARGIN = 0.05
# weight of centre reactive absorption in the refinement objective
Q_WEIGHT = 1.0


class NoInteriorRule(RuntimeError):
    """Robust LP infeasible or optimal slack not positive."""


class FormulationError(ValueError):
    pass


class UncertifiedScenarioWarning(UserWarning):
    pass


class FingerprintMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioBox:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.lo) > np.asarray(self.hi)):
            raise ValueError("scenario box needs lo <= hi")

    @classmethod
    def around(cls, net: NetworkData, radius: float = 0.25) -> "ScenarioBox":
        x = net.nominal_scenario()
        return cls(x * (1 - radius), x * (1 + radius))

    @property
    def dim(self):
        return len(self.lo)

    def contains(self, x, tol: float = 1e-12) -> bool:
        x = np.asarray(x)
        return bool(np.all(x >= self.lo - tol) and np.all(x <= self.hi + tol))

    def sample(self, rng, size: int) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(size, self.dim))

    def vertices(self, rng=None, limit: int = 1 << 16, size: int | None = None) -> np.ndarray:
        """All vertices when there are at most ``limit``, else ``size`` random ones."""
        k = self.dim
        if 2 ** k <= limit and size is None:
            bits = (np.arange(2 ** k)[:, None] >> np.arange(k)) & 1
        else:
            rng = np.random.default_rng(0) if rng is None else rng
            bits = rng.integers(0, 2, size=(size or limit, k))
        return np.where(bits == 1, self.hi, self.lo)


# --------------------------------------------------------------------------- robust rows
@dataclass
class RobustRows:
    """Rows ``g . y_ext(x) + k . x + c + sigma * s <= 0`` required for every x in the box,
    where y_ext(x) = W x + w is the (extended) affine rule."""

    g: sp.csr_matrix      # (R, ne)
    k: np.ndarray         # (R, nx)
    c: np.ndarray         # (R,)
    sigma: np.ndarray     # (R,)

    def __len__(self):
        return len(self.c)


def dualize_linear_row(g, k, c, sigma, box: ScenarioBox, ne: int) -> dict:
    """Box-support dual of one robust row, as explicit LP pieces.

    With variables ordered (vec(W) row-major, w, s, lam_plus, lam_minus) the
    row ``(W^T g + k) . x + g . w + c + sigma s <= 0 for all x in box`` holds iff
    there are lam_plus, lam_minus >= 0 with::

        hi . lam_plus - lo . lam_minus + g . w + sigma s <= -c
        lam_plus - lam_minus - W^T g = k

    Returned dict holds dense coefficient blocks on each variable group.
    """
    g = np.asarray(g, dtype=float)
    k = np.asarray(k, dtype=float)
    nx = box.dim
    if g.shape != (ne,) or k.shape != (nx,):
        raise FormulationError("row dimensions do not match the rule")
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(k)) and np.isfinite(c)):
        raise FormulationError("row coefficients must be finite")
    # eq rows: one per scenario component; coefficient of W[i, t] is -g[i] on row t
    eq_W = -np.kron(g[None, :], np.eye(nx))     # (nx, ne*nx), row-major vec(W)
    return {
        "ineq": {"w": g, "s": float(sigma), "lam_plus": np.asarray(box.hi, float),
                 "lam_minus": -np.asarray(box.lo, float), "rhs": -float(c)},
        "eq": {"W": eq_W, "lam_plus": np.eye(nx), "lam_minus": -np.eye(nx), "rhs": k},
    }


def robust_rows_from_system(sys: InnerSystem) -> tuple[RobustRows, int, np.ndarray]:
    """Linear rows plus the 1-norm epigraph expansion of every SOC block.

    Returns (rows, ne, family) where ne = ny + number of SOC components.
    """
    ny = sys.layout.ny
    n_comp = len(sys.comp)
    ne = ny + n_comp
    eye_c = sp.identity(n_comp, format="csr")
    # linear rows carry the slack
    g_lin = sp.hstack([sp.csr_matrix(sys.lin.G), sp.csr_matrix((sys.n_lin, n_comp))])
    # |comp_j| <= e_j  as  comp_j - e_j <= 0  and  -comp_j - e_j <= 0
    Gc = sp.csr_matrix(sys.comp.G)
    g_abs = sp.vstack([sp.hstack([Gc, -eye_c]), sp.hstack([-Gc, -eye_c])])
    # sum_j e_j - bound + s <= 0 per block
    nb = sys.n_blocks
    rr, cc = np.nonzero(sys.blocks >= 0)
    sel = sp.csr_matrix((np.ones(len(rr)), (rr, sys.blocks[rr, cc])), shape=(nb, n_comp))
    g_sum = sp.hstack([-sp.csr_matrix(sys.bound.G), sel])
    rows = RobustRows(
        g=sp.vstack([g_lin, g_abs, g_sum]).tocsr(),
        k=np.vstack([sys.lin.K, sys.comp.K, -sys.comp.K, -sys.bound.K]),
        c=np.concatenate([sys.lin.c, sys.comp.c, -sys.comp.c, -sys.bound.c]),
        sigma=np.concatenate([np.ones(sys.n_lin), np.zeros(2 * n_comp), np.ones(nb)]),
    )
    family = np.concatenate([sys.lin_family, ["abs"] * (2 * n_comp), sys.block_family])
    return rows, ne, family


def build_robust_lp(rows: RobustRows, ne: int, box: ScenarioBox) -> LinearProgram:
    """Assemble the tractable robust counterpart (maximise s)."""
    R, nx = len(rows), box.dim
    nW = ne * nx
    o_w = nW
    o_s = o_w + ne
    o_lp = o_s + 1
    o_lm = o_lp + R * nx
    n_var = o_lm + R * nx
    G = rows.g.tocoo()
    # inequality rows
    ir = np.arange(R)
    ub_rows = [G.row, np.repeat(ir, nx), np.repeat(ir, nx), rows.sigma.nonzero()[0]]
    ub_cols = [o_w + G.col, o_lp + np.arange(R * nx), o_lm + np.arange(R * nx),
               np.full(np.count_nonzero(rows.sigma), o_s)]
    ub_vals = [G.data, np.tile(box.hi, R), -np.tile(box.lo, R), rows.sigma[rows.sigma != 0]]
    A_ub = sp.csr_matrix((np.concatenate(ub_vals), (np.concatenate(ub_rows), np.concatenate(ub_cols))),
                         shape=(R, n_var))
    b_ub = -rows.c
    # equality rows (r, t): lam+ - lam- - sum_i g[r, i] W[i, t] = k[r, t]
    t = np.arange(nx)
    eq_r = [np.arange(R * nx), np.arange(R * nx),
            (G.row[:, None] * nx + t[None, :]).ravel()]
    eq_c = [o_lp + np.arange(R * nx), o_lm + np.arange(R * nx),
            (G.col[:, None] * nx + t[None, :]).ravel()]
    eq_v = [np.ones(R * nx), -np.ones(R * nx), np.repeat(-G.data, nx)]
    A_eq = sp.csr_matrix((np.concatenate(eq_v), (np.concatenate(eq_r), np.concatenate(eq_c))),
                         shape=(R * nx, n_var))
    b_eq = rows.k.ravel()
    lb = np.full(n_var, -np.inf)
    lb[o_s:] = 0.0
    c = np.zeros(n_var)
    c[o_s] = 1.0
    return LinearProgram(c=c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq.tocsr(), b_eq=b_eq, lb=lb,
                         layout={"ne": ne, "nx": nx, "W": 0, "w": o_w, "s": o_s,
                                 "lam_plus": o_lp, "lam_minus": o_lm, "rows": R})


def worst_case(rows: RobustRows, W: np.ndarray, w: np.ndarray, box: ScenarioBox) -> np.ndarray:
    """max over the box of each row's left-hand side without the slack term."""
    a = (rows.g @ W) + rows.k
    center = 0.5 * (box.lo + box.hi)
    rad = 0.5 * (box.hi - box.lo)
    return a @ center + np.abs(a) @ rad + rows.g @ w + rows.c


def certified_slack(rows: RobustRows, W, w, box: ScenarioBox, sys: InnerSystem) -> float:
    """Slack the extended rule provably achieves, recomputed from the closed-form
    worst case so barrier-level solver residuals cannot inflate it."""
    worst = worst_case(rows, W, w, box)
    sig = rows.sigma > 0
    # an abs row violated by v lets each block sum overshoot by at most 3 v
    abs_excess = max(0.0, float(worst[~sig].max(initial=0.0)))
    return float(-worst[sig].max()) - 3.0 * abs_excess


# --------------------------------------------------------------------------- the rule
@dataclass
class AffineRule:
    W: np.ndarray            # (ny, nx)
    w: np.ndarray            # (ny,)
    s_star: float
    box: ScenarioBox
    fingerprint: str
    n_pv: int
    s_opt: float | None = None   # slack optimum before refinement

    @property
    def W_f(self):
        return self.W[:2 * self.n_pv]

    @property
    def w_f(self):
        return self.w[:2 * self.n_pv]

    def full(self, x) -> np.ndarray:
        """Interior point including the current envelope (y of the inner system)."""
        return np.asarray(x) @ self.W.T + self.w

    def check_network(self, net: NetworkData):
        if net.fingerprint != self.fingerprint:
            raise FingerprintMismatch(f"rule fitted for network {self.fingerprint}, got {net.fingerprint}")

    def to_dict(self) -> dict:
        return {
            "format": "nndispatch.affine_rule", "version": RULE_FORMAT_VERSION,
            "dims": {"ny": int(self.W.shape[0]), "nx": int(self.W.shape[1]), "n_pv": self.n_pv},
            "W": self.W.ravel().tolist(), "w": self.w.tolist(), "s_star": self.s_star,
            "s_opt": self.s_opt,
            "box": {"lo": self.box.lo.tolist(), "hi": self.box.hi.tolist()},
            "network_fingerprint": self.fingerprint,
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path, net: NetworkData | None = None) -> "AffineRule":
        d = json.loads(Path(path).read_text())
        if d.get("format") != "nndispatch.affine_rule" or d.get("version") != RULE_FORMAT_VERSION:
            raise ValueError("not a supported affine rule file")
        ny, nx = d["dims"]["ny"], d["dims"]["nx"]
        rule = cls(W=np.array(d["W"]).reshape(ny, nx), w=np.array(d["w"]), s_star=d["s_star"],
                   box=ScenarioBox(np.array(d["box"]["lo"]), np.array(d["box"]["hi"])),
                   fingerprint=d["network_fingerprint"], n_pv=d["dims"]["n_pv"], s_opt=d.get("s_opt"))
        if net is not None:
            rule.check_network(net)
        return rule


def eval_interior_point(rule: AffineRule, x) -> np.ndarray:
    """Certified interior dispatch for scenario x (one matrix-vector product)."""
    x = np.asarray(x, dtype=float)
    if not rule.box.contains(x):
        warnings.warn("scenario outside the fitted box; interior point not certified",
                      UncertifiedScenarioWarning, stacklevel=2)
    return rule.W_f @ x + rule.w_f


def _solve_stage(lp, method):
    try:
        return solve_lp(lp, method=method)
    except LPError as exc:
        raise NoInteriorRule(f"robust LP failed: {exc}") from exc


def _unpack(sol, lay, ne):
    W = sol.z[:ne * lay["nx"]].reshape(ne, lay["nx"])
    return W, sol.z[lay["w"]:lay["w"] + ne]


def fit_affine_rule(sys: InnerSystem, box: ScenarioBox, fingerprint: str = "",
                    method: str = "ipm", refine: bool = True, keep: float = 0.999,
                    box_margin: float = BOX_MARGIN, q_weight: float = Q_WEIGHT,
                    target=None) -> AffineRule:
    """Maximise the uniform slack of an affine rule over the scenario box.

    The slack-optimal rule is far from unique.  With ``refine`` a second LP
    keeps the slack at ``keep`` times the optimum and, among those rules,
    maximises the PV active power dispatched at the box centre, which moves
    the interior point away from needless curtailment.  In that second LP
    the PV bound rows only need ``box_margin`` times the kept slack: a
    uniform margin below P-bar is pure curtailment, while the network rows
    keep the full margin.  ``s_star`` is the certified uniform slack of the
    returned rule, so with ``box_margin < 1`` it is set by the PV rows.
    ``q_weight`` adds reactive absorption at the centre to the objective
    (maximise sum P - q_weight * sum Q); absorbing reactive power lowers
    voltages at no curtailment, which makes the segment toward the interior
    point cheaper for over-voltage candidates.  ``target`` replaces the box
    centre as the scenario where the objective is evaluated.
    """
    if box.dim != sys.layout.nx:
        raise ValueError("box dimension does not match the inner system")
    if not 0 < keep <= 1:
        raise ValueError("keep must lie in (0, 1]")
    if not 0 < box_margin <= 1:
        raise ValueError("box_margin must lie in (0, 1]")
    rows, ne, family = robust_rows_from_system(sys)
    lp = build_robust_lp(rows, ne, box)
    lay = lp.layout
    logger.info("robust LP: %d variables, %d inequality rows, %d equality rows, %d nonzeros",
                lp.n_vars, lp.A_ub.shape[0], lp.A_eq.shape[0], lp.A_ub.nnz + lp.A_eq.nnz)
    sol = _solve_stage(lp, method)
    W, w = _unpack(sol, lay, ne)
    s_opt = certified_slack(rows, W, w, box, sys)
    logger.info("robust LP %s: slack %.6g (solver %.6g), %d iterations",
                sol.method, s_opt, sol.z[lay["s"]], sol.iterations)
    if not s_opt > 0:
        raise NoInteriorRule(f"optimal slack {s_opt:.3g} is not positive; shrink the scenario box")
    s = s_opt
    if refine:
        nx, m = lay["nx"], sys.layout.m
        center = 0.5 * (box.lo + box.hi) if target is None else np.asarray(target, dtype=float)
        c = np.zeros(lp.n_vars)
        for i in range(m):  # rule rows 0..m-1 are PV active powers, m..2m-1 reactive
            c[i * nx:(i + 1) * nx] = center
            c[lay["w"] + i] = 1.0
            j = m + i
            c[j * nx:(j + 1) * nx] = -q_weight * center
            c[lay["w"] + j] = -q_weight
        base = lp
        if box_margin < 1:
            pv = np.isin(family, ("pv_lower", "pv_upper"))
            base = build_robust_lp(replace(rows, sigma=np.where(pv, box_margin * rows.sigma, rows.sigma)),
                                   ne, box)
        lb = base.lb.copy()
        lb[lay["s"]] = keep * s_opt
        lp2 = LinearProgram(c=c, A_ub=base.A_ub, b_ub=base.b_ub, A_eq=base.A_eq, b_eq=base.b_eq,
                            lb=lb, ub=base.ub, layout=lay)
        try:
            sol2 = _solve_stage(lp2, method)
        except NoInteriorRule as exc:
            logger.warning("refinement stage failed (%s); keeping the slack-optimal rule", exc)
        else:
            W2, w2 = _unpack(sol2, lay, ne)
            s2 = certified_slack(rows, W2, w2, box, sys)
            if s2 > 0:
                W, w, s = W2, w2, s2
            logger.info("refined rule: slack %.6g, centre PV output %.6g", s2, sol2.value)
    ny = sys.layout.ny
    return AffineRule(W=W[:ny].copy(), w=w[:ny].copy(), s_star=s, box=box,
                      fingerprint=fingerprint, n_pv=sys.layout.m, s_opt=s_opt)
