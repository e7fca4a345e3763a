"""Radial feeder data and the compact DistFlow matrices.

Indexing convention used throughout the package: node 0 is the substation,
non-root nodes are ``1..n`` and the branch feeding node ``k`` is branch
``k - 1``.  Vectors over non-root nodes and vectors over branches therefore
share one index.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np


class TopologyError(ValueError):
    """Branch list does not describe a tree rooted at node 0."""


class NetworkDataError(ValueError):
    """Invalid electrical parameters or limits."""


@dataclass(frozen=True, eq=False)
class NetworkData:
    """Balanced radial feeder in per unit, squared voltages and currents.

    Arrays indexed by ``k - 1`` refer to node ``k`` (and the branch feeding it).
    PV quantities are indexed by position in ``pv_nodes``.
    """

    name: str
    base_mva: float
    v0: float
    v_min: float
    v_max: float
    parent: np.ndarray      # (n+1,), parent[0] == -1
    r: np.ndarray           # (n,)
    x: np.ndarray           # (n,)
    l_max: np.ndarray       # (n,)
    p_load: np.ndarray      # (n,)
    q_load: np.ndarray      # (n,)
    pv_nodes: np.ndarray    # (m,) node ids
    pv_avail: np.ndarray    # (m,)
    inv_cap: np.ndarray     # (m,) apparent power rating, not squared
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("r", "x", "l_max", "p_load", "q_load", "pv_avail", "inv_cap"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name in ("parent", "pv_nodes"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        self._validate()

    # ------------------------------------------------------------------ checks
    def _validate(self):
        n = self.n
        if self.parent.shape != (n + 1,) or self.parent[0] != -1:
            raise TopologyError("parent array must have length n+1 with parent[0] == -1")
        for arr_name in ("r", "x", "l_max", "p_load", "q_load"):
            if getattr(self, arr_name).shape != (n,):
                raise NetworkDataError(f"{arr_name} must have one entry per branch")
        if np.any((self.parent[1:] < 0) | (self.parent[1:] > n)):
            raise TopologyError("parent index out of range")
        # every node must reach the root without revisiting a node
        depth = np.full(n + 1, -1)
        depth[0] = 0
        for k in range(1, n + 1):
            path = []
            j = k
            while depth[j] < 0:
                if j in path:
                    raise TopologyError(f"cycle through node {j}")
                path.append(j)
                j = self.parent[j]
            d = depth[j]
            for node in reversed(path):
                d += 1
                depth[node] = d
        if self.meta.get("lossless"):
            if np.any(self.r != 0) or np.any(self.x != 0):
                raise NetworkDataError("lossless feeder must have r = x = 0")
        elif np.any(self.r <= 0):
            raise NetworkDataError("branch resistances must be positive")
        if np.any(self.x < 0):
            raise NetworkDataError("branch reactances must be nonnegative")
        if not (0 < self.v_min <= self.v_max):
            raise NetworkDataError("need 0 < v_min <= v_max")
        m = len(self.pv_nodes)
        if self.pv_avail.shape != (m,) or self.inv_cap.shape != (m,):
            raise NetworkDataError("PV arrays must match pv_nodes")
        if len(set(self.pv_nodes.tolist())) != m or np.any(self.pv_nodes < 1) or np.any(self.pv_nodes > n):
            raise NetworkDataError("pv_nodes must be distinct non-root nodes")
        if np.any(self.inv_cap < self.pv_avail):
            raise NetworkDataError("inverter capacity must cover nominal PV availability")

    def lossless(self) -> "NetworkData":
        """Copy with r = x = 0 on every branch (a degenerate check case)."""
        d = self.to_dict()
        for br in d["branches"]:
            br["r"] = br["x"] = 0.0
        d["meta"] = {**self.meta, "lossless": True}
        return NetworkData.from_dict(d)

    # ------------------------------------------------------------- dimensions
    @property
    def n(self) -> int:
        return len(self.parent) - 1

    @property
    def n_pv(self) -> int:
        return len(self.pv_nodes)

    @property
    def scenario_dim(self) -> int:
        return 2 * self.n + self.n_pv

    @property
    def dispatch_dim(self) -> int:
        return 2 * self.n_pv

    # ------------------------------------------------------------ topology
    @cached_property
    def order(self) -> np.ndarray:
        """Non-root nodes ordered so that every parent precedes its children."""
        children = self.children
        out = []
        stack = [0]
        while stack:
            j = stack.pop()
            if j:
                out.append(j)
            stack.extend(reversed(children[j]))
        return np.array(out, dtype=np.int64)

    @cached_property
    def children(self) -> list[list[int]]:
        ch: list[list[int]] = [[] for _ in range(self.n + 1)]
        for k in range(1, self.n + 1):
            ch[self.parent[k]].append(k)
        return ch

    @cached_property
    def pv_map(self) -> np.ndarray:
        """(n, m) 0/1 matrix placing PV units on non-root nodes."""
        e = np.zeros((self.n, self.n_pv))
        e[self.pv_nodes - 1, np.arange(self.n_pv)] = 1.0
        return e

    # ------------------------------------------------------------ scenarios
    def nominal_scenario(self) -> np.ndarray:
        return np.concatenate([self.p_load, self.q_load, self.pv_avail])

    def split_scenario(self, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        n = self.n
        if x.shape[-1] != self.scenario_dim:
            raise ValueError(f"scenario has {x.shape[-1]} entries, expected {self.scenario_dim}")
        return x[..., :n], x[..., n:2 * n], x[..., 2 * n:]

    def split_dispatch(self, f) -> tuple[np.ndarray, np.ndarray]:
        f = np.asarray(f, dtype=float)
        if f.shape[-1] != self.dispatch_dim:
            raise ValueError(f"dispatch has {f.shape[-1]} entries, expected {self.dispatch_dim}")
        return f[..., :self.n_pv], f[..., self.n_pv:]

    def injections(self, x, f) -> tuple[np.ndarray, np.ndarray]:
        """Net consumption p = P^L - P^PV, q = Q^L - Q^PV at non-root nodes."""
        pl, ql, _ = self.split_scenario(x)
        ppv, qpv = self.split_dispatch(f)
        return pl - ppv @ self.pv_map.T, ql - qpv @ self.pv_map.T

    # ---------------------------------------------------------- persistence
    def to_dict(self) -> dict:
        buses = [{"id": 0, "p_load": 0.0, "q_load": 0.0, "pv_avail": 0.0, "inv_cap": 0.0}]
        pv_pos = {int(k): i for i, k in enumerate(self.pv_nodes)}
        for k in range(1, self.n + 1):
            i = pv_pos.get(k)
            buses.append({
                "id": k,
                "p_load": float(self.p_load[k - 1]),
                "q_load": float(self.q_load[k - 1]),
                "pv_avail": float(self.pv_avail[i]) if i is not None else 0.0,
                "inv_cap": float(self.inv_cap[i]) if i is not None else 0.0,
            })
        branches = [
            {"from": int(self.parent[k]), "to": k, "r": float(self.r[k - 1]),
             "x": float(self.x[k - 1]), "l_max_sq": float(self.l_max[k - 1])}
            for k in range(1, self.n + 1)
        ]
        out = {
            "name": self.name, "base_mva": self.base_mva, "v0_sq": self.v0,
            "v_min_sq": self.v_min, "v_max_sq": self.v_max,
            "buses": buses, "branches": branches,
        }
        if self.meta:
            out["meta"] = self.meta
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkData":
        buses = sorted(d["buses"], key=lambda b: b["id"])
        ids = [int(b["id"]) for b in buses]
        if ids != list(range(len(ids))):
            raise TopologyError("bus ids must be 0..n")
        n = len(ids) - 1
        if len(d["branches"]) != n:
            raise TopologyError(f"a tree on {n + 1} buses has {n} branches, got {len(d['branches'])}")
        parent = np.full(n + 1, -1, dtype=np.int64)
        r = np.zeros(n)
        x = np.zeros(n)
        l_max = np.zeros(n)
        for br in d["branches"]:
            k = int(br["to"])
            if not 1 <= k <= n:
                raise TopologyError(f"branch into invalid bus {k}")
            if parent[k] != -1:
                raise TopologyError(f"bus {k} fed by more than one branch")
            parent[k] = int(br["from"])
            r[k - 1] = br["r"]
            x[k - 1] = br["x"]
            l_max[k - 1] = br["l_max_sq"]
        if buses[0]["p_load"] or buses[0]["q_load"] or buses[0].get("pv_avail", 0.0):
            raise NetworkDataError("substation bus carries no load or PV")
        pv = [b for b in buses[1:] if b.get("pv_avail", 0.0) > 0 or b.get("inv_cap", 0.0) > 0]
        return cls(
            name=d.get("name", "feeder"),
            base_mva=float(d.get("base_mva", 1.0)),
            v0=float(d["v0_sq"]), v_min=float(d["v_min_sq"]), v_max=float(d["v_max_sq"]),
            parent=parent, r=r, x=x, l_max=l_max,
            p_load=np.array([b["p_load"] for b in buses[1:]], dtype=float),
            q_load=np.array([b["q_load"] for b in buses[1:]], dtype=float),
            pv_nodes=np.array([b["id"] for b in pv], dtype=np.int64),
            pv_avail=np.array([b["pv_avail"] for b in pv], dtype=float),
            inv_cap=np.array([b["inv_cap"] for b in pv], dtype=float),
            meta=d.get("meta", {}),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @cached_property
    def fingerprint(self) -> str:
        d = self.to_dict()
        d.pop("meta", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_network(path_or_name) -> NetworkData:
    """Load a feeder JSON file, or a bundled feeder by name (``ieee33``, ``syn129``)."""
    p = Path(str(path_or_name))
    if not p.exists():
        bundled = resources.files("nndispatch.data") / f"{path_or_name}.json"
        if not bundled.is_file():
            raise FileNotFoundError(path_or_name)
        return NetworkData.from_dict(json.loads(bundled.read_text()))
    return NetworkData.from_dict(json.loads(p.read_text()))


@dataclass(frozen=True, eq=False)
class DistFlowMatrices:
    """Compact DistFlow operators for one feeder.

    With p, q the nodal net consumption and l the squared branch currents::

        P = C p + D_R l
        Q = C q + D_X l
        V = v0 - M_p p - M_q q - H l

    ``C[k, j] = 1`` when node j lies in the subtree of branch k.  ``S`` picks
    the sending-end voltage of each branch from the non-root voltages and
    ``root`` flags branches leaving the substation, so
    ``V_send = S V + v0 * root``.
    """

    C: np.ndarray
    D_R: np.ndarray
    D_X: np.ndarray
    M_p: np.ndarray
    M_q: np.ndarray
    H: np.ndarray
    S: np.ndarray
    root: np.ndarray
    v0: float

    @staticmethod
    def split(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return np.where(a > 0, a, 0.0), np.where(a < 0, a, 0.0)

    @cached_property
    def D_R_pm(self):
        return self.split(self.D_R)

    @cached_property
    def D_X_pm(self):
        return self.split(self.D_X)

    @cached_property
    def H_pm(self):
        return self.split(self.H)

    def flows(self, p, q, l):
        return p @ self.C.T + l @ self.D_R.T, q @ self.C.T + l @ self.D_X.T

    def voltages(self, p, q, l):
        return self.v0 - p @ self.M_p.T - q @ self.M_q.T - l @ self.H.T

    def sending_voltage(self, v):
        return v @ self.S.T + self.v0 * self.root


def build_matrices(net: NetworkData, r=None, x=None) -> DistFlowMatrices:
    """Assemble the compact DistFlow matrices of ``net``.

    ``r``/``x`` override the branch impedances (used for lossless checks).
    """
    n = net.n
    r = net.r if r is None else np.asarray(r, dtype=float)
    x = net.x if x is None else np.asarray(x, dtype=float)
    # C = (I - A)^{-1}, A[k, c] = 1 for c a child of k; filled by walking up the tree
    C = np.zeros((n, n))
    for j in range(1, n + 1):
        k = j
        while k > 0:
            C[k - 1, j - 1] = 1.0
            k = net.parent[k]
    A = np.zeros((n, n))
    for k in range(1, n + 1):
        if net.parent[k] > 0:
            A[net.parent[k] - 1, k - 1] = 1.0
    if not np.allclose(C @ (np.eye(n) - A), np.eye(n)):
        raise RuntimeError("path matrix is not the inverse of I - A")
    R, X = np.diag(r), np.diag(x)
    Z2 = np.diag(r ** 2 + x ** 2)
    D_R, D_X = C @ R, C @ X
    S = A.T.copy()
    root = (net.parent[1:] == 0).astype(float)
    return DistFlowMatrices(
        C=C, D_R=D_R, D_X=D_X,
        M_p=2 * C.T @ R @ C, M_q=2 * C.T @ X @ C,
        H=C.T @ (2 * R @ D_R + 2 * X @ D_X - Z2),
        S=S, root=root, v0=net.v0,
    )
