"""Regenerate the bundled feeder files in src/nndispatch/data/.

ieee33  -- Baran & Wu 33-bus feeder (12.66 kV, 10 MVA base) with seven PV units.
syn129  -- synthetic 129-bus feeder: a 33-bus trunk with three 33-bus laterals
           hung off trunk nodes, loads and PV of each lateral scaled down.

Line ratings are derived, not published: each branch gets
l_max = (RATING_FACTOR * S_ref)^2 / v_min where S_ref is the larger of the
branch's apparent flow with no PV at +25 % load and with full PV at -25 %
load, floored at RATING_FLOOR pu.
"""
from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from nndispatch.network import NetworkData  # noqa: E402
from nndispatch.powerflow import solve_power_flow  # noqa: E402

BASE_MVA = 10.0
BASE_KV = 12.66
Z_BASE = BASE_KV ** 2 / BASE_MVA

# (from bus, to bus, R ohm, X ohm), buses numbered 1..33 with bus 1 the substation
BW_BRANCHES = [
    (1, 2, 0.0922, 0.0470), (2, 3, 0.4930, 0.2511), (3, 4, 0.3660, 0.1864),
    (4, 5, 0.3811, 0.1941), (5, 6, 0.8190, 0.7070), (6, 7, 0.1872, 0.6188),
    (7, 8, 0.7114, 0.2351), (8, 9, 1.0300, 0.7400), (9, 10, 1.0440, 0.7400),
    (10, 11, 0.1966, 0.0650), (11, 12, 0.3744, 0.1238), (12, 13, 1.4680, 1.1550),
    (13, 14, 0.5416, 0.7129), (14, 15, 0.5910, 0.5260), (15, 16, 0.7463, 0.5450),
    (16, 17, 1.2890, 1.7210), (17, 18, 0.7320, 0.5740), (2, 19, 0.1640, 0.1565),
    (19, 20, 1.5042, 1.3554), (20, 21, 0.4095, 0.4784), (21, 22, 0.7089, 0.9373),
    (3, 23, 0.4512, 0.3083), (23, 24, 0.8980, 0.7091), (24, 25, 0.8960, 0.7011),
    (6, 26, 0.2030, 0.1034), (26, 27, 0.2842, 0.1447), (27, 28, 1.0590, 0.9337),
    (28, 29, 0.8042, 0.7006), (29, 30, 0.5075, 0.2585), (30, 31, 0.9744, 0.9630),
    (31, 32, 0.3105, 0.3619), (32, 33, 0.3410, 0.5302),
]

# bus: (kW, kvar)
BW_LOADS = {
    2: (100, 60), 3: (90, 40), 4: (120, 80), 5: (60, 30), 6: (60, 20), 7: (200, 100),
    8: (200, 100), 9: (60, 20), 10: (60, 20), 11: (45, 30), 12: (60, 35), 13: (60, 35),
    14: (120, 80), 15: (60, 10), 16: (60, 20), 17: (60, 20), 18: (90, 40), 19: (90, 40),
    20: (90, 40), 21: (90, 40), 22: (90, 40), 23: (90, 50), 24: (420, 200), 25: (420, 200),
    26: (60, 25), 27: (60, 25), 28: (60, 20), 29: (120, 70), 30: (200, 600), 31: (150, 70),
    32: (210, 100), 33: (60, 40),
}

# PV units: bus -> available kW at nominal
PV_33 = {10: 900, 14: 1000, 18: 800, 22: 900, 25: 1000, 30: 900, 33: 900}
INV_RATIO = 1.25          # inverter kVA / nominal kW; covers P_bar at +25 % availability
V0 = 1.0
V_MIN, V_MAX = 0.95, 1.05  # magnitudes
RATING_FACTOR = 1.6
RATING_FLOOR = 0.02


def _buses_and_branches(branches, loads, pv, scale_load=1.0, scale_pv=1.0, offset=0, attach=None):
    """Convert bus-numbered data to 0-based node ids, optionally grafting onto ``attach``."""
    def node(b):
        if b == 1:
            return attach if attach is not None else 0
        return b - 1 + offset

    br = [{"from": node(a), "to": node(b), "r": r / Z_BASE, "x": x / Z_BASE} for a, b, r, x in branches]
    buses = []
    for b in range(2, 34):
        p, q = loads[b]
        kw = pv.get(b, 0.0) * scale_pv
        buses.append({
            "id": node(b),
            "p_load": scale_load * p / 1000 / BASE_MVA,
            "q_load": scale_load * q / 1000 / BASE_MVA,
            "pv_avail": kw / 1000 / BASE_MVA,
            "inv_cap": INV_RATIO * kw / 1000 / BASE_MVA,
        })
    return buses, br


def _rate(d):
    """Fill l_max_sq from two stress states (see module docstring)."""
    for br in d["branches"]:
        br["l_max_sq"] = 1e3
    net = NetworkData.from_dict(d)
    x_nom = net.nominal_scenario()
    pl, ql, pbar = net.split_scenario(x_nom)
    s_ref = np.zeros(net.n)
    x_heavy = np.concatenate([1.25 * pl, 1.25 * ql, pbar])
    st = solve_power_flow(net, np.zeros(net.dispatch_dim), x_heavy)
    s_ref = np.maximum(s_ref, np.hypot(st.p_flow, st.q_flow))
    x_light = np.concatenate([0.75 * pl, 0.75 * ql, 1.25 * pbar])
    st = solve_power_flow(net, np.concatenate([1.25 * pbar, np.zeros(net.n_pv)]), x_light)
    s_ref = np.maximum(s_ref, np.hypot(st.p_flow, st.q_flow))
    s_ref = np.maximum(RATING_FACTOR * s_ref, RATING_FLOOR)
    for k, br in enumerate(sorted(d["branches"], key=lambda b: b["to"])):
        br["l_max_sq"] = float(round(s_ref[br["to"] - 1] ** 2 / V_MIN ** 2, 8))
    return d


def _header(name, note):
    return {
        "name": name, "base_mva": BASE_MVA, "v0_sq": V0 ** 2,
        "v_min_sq": V_MIN ** 2, "v_max_sq": V_MAX ** 2,
        "meta": {"note": note},
    }


def ieee33() -> dict:
    buses, branches = _buses_and_branches(BW_BRANCHES, BW_LOADS, PV_33)
    d = _header("ieee33", "Baran-Wu 33-bus feeder, 12.66 kV / 10 MVA base, 7 PV units; "
                "line ratings derived by scripts/make_feeders.py")
    d["buses"] = [{"id": 0, "p_load": 0.0, "q_load": 0.0, "pv_avail": 0.0, "inv_cap": 0.0}] + buses
    d["branches"] = branches
    return _rate(d)


# trunk node (0-based id of the trunk copy) each lateral hangs from
LATERAL_ATTACH = (2, 5, 25)
TRUNK_Z_SCALE = 0.25
LATERAL_LOAD_SCALE = 0.5
LATERAL_PV_SCALE = 0.5


def syn129() -> dict:
    trunk_br = [(a, b, TRUNK_Z_SCALE * r, TRUNK_Z_SCALE * x) for a, b, r, x in BW_BRANCHES]
    buses, branches = _buses_and_branches(trunk_br, BW_LOADS, PV_33, 0.5, 0.5)
    for i, attach in enumerate(LATERAL_ATTACH):
        b2, br2 = _buses_and_branches(BW_BRANCHES, BW_LOADS, PV_33, LATERAL_LOAD_SCALE,
                                      LATERAL_PV_SCALE, offset=32 * (i + 1), attach=attach)
        buses += b2
        branches += br2
    d = _header("syn129", "SYNTHETIC 129-bus feeder: Baran-Wu trunk (impedance x0.25, load/PV x0.5) "
                f"with three Baran-Wu laterals at trunk nodes {LATERAL_ATTACH} (load/PV x0.5); "
                "28 PV units; not the network of any published study")
    d["buses"] = [{"id": 0, "p_load": 0.0, "q_load": 0.0, "pv_avail": 0.0, "inv_cap": 0.0}] + buses
    d["branches"] = branches
    return _rate(d)


def main():
    out = ROOT / "src" / "nndispatch" / "data"
    for name, build in (("ieee33", ieee33), ("syn129", syn129)):
        d = build()
        (out / f"{name}.json").write_text(json.dumps(d, indent=1))
        print(f"wrote {name}: {len(d['buses'])} buses")


if __name__ == "__main__":
    main()
