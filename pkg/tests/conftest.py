"""Shared fixtures.  Expensive artifacts (fitted rule, 7000-sample dataset,
trained models) are cached under pytest's cache directory keyed by the
network fingerprint, so only the first run pays for them."""
from __future__ import annotations

import logging
import time

import numpy as np
import pytest

from nndispatch import build_matrices, load_network
from nndispatch.bench import LabeledDataset, generate_dataset
from nndispatch.inner import assemble_inner_system, make_taylor_cuts, nominal_expansion_state
from nndispatch.network import NetworkData
from nndispatch.robust import AffineRule, ScenarioBox, fit_affine_rule
from nndispatch.surrogate import TrainConfig, load_model, save_model, train

CACHE_VERSION = "v7"


def two_bus(r=0.05, x=0.05, p_load=0.1, q_load=0.05, pv=0.0, cap=None, l_max=10.0,
            v_min=0.9 ** 2, v_max=1.1 ** 2) -> NetworkData:
    cap = pv * 1.2 if cap is None else cap
    d = {
        "name": "two-bus", "base_mva": 1.0, "v0_sq": 1.0, "v_min_sq": v_min, "v_max_sq": v_max,
        "buses": [{"id": 0, "p_load": 0, "q_load": 0, "pv_avail": 0, "inv_cap": 0},
                  {"id": 1, "p_load": p_load, "q_load": q_load, "pv_avail": pv, "inv_cap": cap}],
        "branches": [{"from": 0, "to": 1, "r": r, "x": x, "l_max_sq": l_max}],
    }
    return NetworkData.from_dict(d)


def small_feeder(load_scale=1.0) -> NetworkData:
    """Five-node feeder with a lateral and two PV units; small enough for every LP route."""
    buses = [{"id": 0, "p_load": 0, "q_load": 0, "pv_avail": 0, "inv_cap": 0}]
    loads = [(0.08, 0.04, 0.0, 0.0), (0.06, 0.03, 0.12, 0.15), (0.09, 0.05, 0.0, 0.0),
             (0.05, 0.02, 0.10, 0.125), (0.07, 0.03, 0.0, 0.0)]
    for i, (pl, ql, pv, cap) in enumerate(loads, start=1):
        buses.append({"id": i, "p_load": pl * load_scale, "q_load": ql * load_scale,
                      "pv_avail": pv, "inv_cap": cap})
    edges = [(0, 1, 0.02), (1, 2, 0.03), (2, 3, 0.04), (1, 4, 0.03), (4, 5, 0.02)]
    branches = [{"from": a, "to": b, "r": r, "x": 0.8 * r, "l_max_sq": 0.6} for a, b, r in edges]
    return NetworkData.from_dict({"name": "small", "base_mva": 1.0, "v0_sq": 1.0,
                                  "v_min_sq": 0.95 ** 2, "v_max_sq": 1.05 ** 2,
                                  "buses": buses, "branches": branches})


@pytest.fixture(scope="session")
def net33():
    return load_network("ieee33")


@pytest.fixture(scope="session")
def mat33(net33):
    return build_matrices(net33)


@pytest.fixture(scope="session")
def sys33(net33, mat33):
    return assemble_inner_system(net33, mat33, make_taylor_cuts(net33, nominal_expansion_state(net33)))


@pytest.fixture(scope="session")
def box33(net33):
    return ScenarioBox.around(net33, 0.25)


@pytest.fixture(scope="session")
def cache_dir(request):
    return request.config.cache.mkdir(f"nndispatch-{CACHE_VERSION}")


@pytest.fixture(scope="session")
def rule33(net33, sys33, box33, cache_dir):
    path = cache_dir / f"rule-{net33.fingerprint}.json"
    timing = cache_dir / f"rule-{net33.fingerprint}.seconds"
    if path.exists():
        return AffineRule.load(path, net33)
    logging.getLogger(__name__).info("fitting the affine rule (a few minutes)")
    t0 = time.perf_counter()
    rule = fit_affine_rule(sys33, box33, net33.fingerprint)
    timing.write_text(f"{time.perf_counter() - t0:.3f}")
    rule.save(path)
    return rule


@pytest.fixture(scope="session")
def rule33_seconds(net33, rule33, cache_dir):
    """Wall time of the fit that produced the cached rule, or None."""
    timing = cache_dir / f"rule-{net33.fingerprint}.seconds"
    return float(timing.read_text()) if timing.exists() else None


@pytest.fixture(scope="session")
def dataset33(net33, rule33, cache_dir):
    path = cache_dir / f"data-{net33.fingerprint}.npz"
    if path.exists():
        return LabeledDataset.load(path, net33)
    ds = generate_dataset(net33, seed=0, count=7000, rule=rule33)
    ds.save(path)
    return ds


@pytest.fixture(scope="session")
def models33(net33, dataset33, box33, cache_dir):
    """(P-NN params, V-NN params, info) with info holding the training log and wall time."""
    path = cache_dir / f"model-{net33.fingerprint}.json"
    if path.exists():
        params, pre, meta = load_model(path, net33)
        return params, pre, {"log": None, **(meta.get("metrics") or {})}
    Xtr, Ftr, _ = dataset33.part("train")
    Xva, Fva, _ = dataset33.part("val")
    t0 = time.perf_counter()
    res = train(net33, Xtr, Ftr, Xva, Fva, TrainConfig(), x_lo=box33.lo, x_hi=box33.hi)
    seconds = time.perf_counter() - t0
    save_model(path, res.params, net33, res.config, pretrained=res.pretrained,
               metrics={"train_seconds": seconds})
    return res.params, res.pretrained, {"log": res.log, "train_seconds": seconds}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
