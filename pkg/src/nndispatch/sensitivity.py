"""State sensitivities of the DistFlow equations by the implicit function theorem.

The state is z = (V_1..V_n, l, P, Q) and the residual h(f, z) stacks, per
branch k feeding node k with sending node i = parent(k):

    P_k - p_k - sum_children P - r_k l_k
    Q_k - q_k - sum_children Q - x_k l_k
    V_k - V_i + 2 (r_k P_k + x_k Q_k) - |z_k|^2 l_k
    l_k V_i - P_k^2 - Q_k^2
"""
from __future__ import annotations

import numpy as np

from .network import DistFlowMatrices, NetworkData, build_matrices
from .powerflow import SystemState


class SensitivityError(RuntimeError):
    """Power-flow Jacobian is singular at the given state."""


def pf_jacobians(net: NetworkData, state: SystemState) -> tuple[np.ndarray, np.ndarray]:
    """(dh/dz, dh/df) at ``state``; shapes (4n, 4n) and (4n, 2m)."""
    n, m = net.n, net.n_pv
    A = np.zeros((n, n))
    S = np.zeros((n, n))
    for k in range(1, n + 1):
        i = net.parent[k]
        if i > 0:
            A[i - 1, k - 1] = 1.0
            S[k - 1, i - 1] = 1.0
    I = np.eye(n)
    R, X = np.diag(net.r), np.diag(net.x)
    Z2 = np.diag(net.r ** 2 + net.x ** 2)
    vs = state.v[net.parent[1:]]
    l, P, Q = state.l, state.p_flow, state.q_flow
    O = np.zeros((n, n))
    # column blocks: V, l, P, Q
    J = np.block([
        [O, -R, I - A, O],
        [O, -X, O, I - A],
        [I - S, -Z2, 2 * R, 2 * X],
        [np.diag(l) @ S, np.diag(vs), -2 * np.diag(P), -2 * np.diag(Q)],
    ])
    E = net.pv_map
    Jf = np.zeros((4 * n, 2 * m))
    Jf[:n, :m] = E          # p = P^L - E P^PV enters with a minus sign
    Jf[n:2 * n, m:] = E
    return J, Jf


def implicit_state_sensitivity(net: NetworkData, d, state: SystemState) -> np.ndarray:
    """dz/df = -(dh/dz)^{-1} dh/df, rows ordered (V_1..V_n, l, P, Q)."""
    J, Jf = pf_jacobians(net, state)
    try:
        lu_cond = np.linalg.cond(J)
    except np.linalg.LinAlgError as exc:  # pragma: no cover
        raise SensitivityError(str(exc)) from exc
    if not np.isfinite(lu_cond) or lu_cond > 1e14:
        raise SensitivityError(f"power-flow Jacobian is singular (cond={lu_cond:.3g})")
    return -np.linalg.solve(J, Jf)


class ReducedSensitivity:
    """Batched adjoint gradients through the power flow.

    Eliminates the linear equations so only the n current equations
    F(l, f) = l * V_send - P^2 - Q^2 remain; mathematically identical to
    :func:`implicit_state_sensitivity` but cheap enough for training loops.
    """

    def __init__(self, net: NetworkData, mat: DistFlowMatrices | None = None):
        self.net = net
        self.mat = mat if mat is not None else build_matrices(net)
        E = net.pv_map
        mat = self.mat
        self.CE = mat.C @ E
        self.MpE = mat.M_p @ E
        self.MqE = mat.M_q @ E
        self.SH = mat.S @ mat.H
        self.SMpE = mat.S @ self.MpE
        self.SMqE = mat.S @ self.MqE

    def vjp(self, V, l, P, Q, gV, gl) -> np.ndarray:
        """Given dL/dV (B, n) over non-root voltages and dL/dl (B, n) at
        converged states, return dL/df (B, 2m) through the power flow."""
        mat = self.mat
        vs = V @ mat.S.T + mat.v0 * mat.root
        n = self.net.n
        # dF/dl = diag(vs) - diag(l) S H - 2 diag(P) D_R - 2 diag(Q) D_X
        Jl = (np.eye(n)[None] * vs[:, :, None]
              - l[:, :, None] * self.SH[None]
              - 2 * P[:, :, None] * mat.D_R[None]
              - 2 * Q[:, :, None] * mat.D_X[None])
        # total dL/dl including the dependence of V on l (V = ... - H l)
        g_l = gl - gV @ mat.H
        try:
            mu = np.linalg.solve(np.transpose(Jl, (0, 2, 1)), g_l[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError as exc:
            raise SensitivityError(str(exc)) from exc
        # explicit dependence on f: dV/dPpv = M_p E, dP/dPpv = -C E, dVs/dPpv = S M_p E
        dF_dPpv = l[:, :, None] * self.SMpE[None] + 2 * P[:, :, None] * self.CE[None]
        dF_dQpv = l[:, :, None] * self.SMqE[None] + 2 * Q[:, :, None] * self.CE[None]
        gP = gV @ self.MpE - np.einsum("bn,bnm->bm", mu, dF_dPpv)
        gQ = gV @ self.MqE - np.einsum("bn,bnm->bm", mu, dF_dQpv)
        return np.concatenate([gP, gQ], axis=1)

    def jacobian(self, V, l, P, Q) -> tuple[np.ndarray, np.ndarray]:
        """dV/df (n, 2m) and dl/df (n, 2m) for one converged state."""
        mat = self.mat
        vs = V @ mat.S.T + mat.v0 * mat.root
        Jl = np.diag(vs) - l[:, None] * self.SH - 2 * P[:, None] * mat.D_R - 2 * Q[:, None] * mat.D_X
        dF_df = np.concatenate([l[:, None] * self.SMpE + 2 * P[:, None] * self.CE,
                                l[:, None] * self.SMqE + 2 * Q[:, None] * self.CE], axis=1)
        try:
            dl = -np.linalg.solve(Jl, dF_df)
        except np.linalg.LinAlgError as exc:
            raise SensitivityError(str(exc)) from exc
        dV = np.concatenate([self.MpE, self.MqE], axis=1) - mat.H @ dl
        return dV, dl
