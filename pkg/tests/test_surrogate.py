import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import two_bus
from nndispatch import load_network, solve_power_flow
from nndispatch.powerflow import feasible_batch
from nndispatch.robust import ScenarioBox
from nndispatch.sensitivity import ReducedSensitivity, implicit_state_sensitivity
from nndispatch.surrogate import (
    BatchError,
    MlpParams,
    TrainConfig,
    TrainingError,
    forward,
    init_params,
    load_model,
    loss_and_grad,
    save_model,
    train,
    zero_params,
)

HEADS = [("disk", "clip"), ("disk", "sigmoid"), ("box", "clip"), ("box", "sigmoid")]


def state_vector(net, d, x=None):
    s = solve_power_flow(net, d, x, tol=1e-14)
    return np.concatenate([s.v[1:], s.l, s.p_flow, s.q_flow])


def fd_state(net, d, x=None, h=1e-6):
    cols = []
    for j in range(len(d)):
        e = np.zeros_like(d)
        e[j] = h
        cols.append((state_vector(net, d + e, x) - state_vector(net, d - e, x)) / (2 * h))
    return np.column_stack(cols)


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def fd_grad(params, X, F, net, pi, h=1e-6):
    v0 = params.flat()
    g = np.zeros_like(v0)
    for i in range(len(v0)):
        e = np.zeros_like(v0)
        e[i] = h
        lp, _, _ = loss_and_grad(params.with_flat(v0 + e), X, F, net, pi, pi, need_grad=False)
        lm, _, _ = loss_and_grad(params.with_flat(v0 - e), X, F, net, pi, pi, need_grad=False)
        g[i] = (lp - lm) / (2 * h)
    return g


def flat_grads(grads):
    return np.concatenate([g.ravel() for g in grads])


# --------------------------------------------------------------------------- heads
@pytest.mark.parametrize("q_head,p_head", HEADS)
def test_zero_params_give_midpoint(net33, box33, q_head, p_head):
    params = zero_params(net33, box33.lo, box33.hi, (8, 8), q_head, p_head)
    x = box33.sample(np.random.default_rng(0), 5)
    F = forward(params, x, net33)
    _, _, pbar = net33.split_scenario(x)
    assert np.allclose(F[:, :net33.n_pv], 0.5 * pbar, rtol=0, atol=1e-15)
    assert np.all(F[:, net33.n_pv:] == 0)


@pytest.mark.parametrize("q_head,p_head", HEADS)
def test_zero_availability_gives_zero_output(net33, box33, q_head, p_head):
    params = init_params(net33, box33.lo, box33.hi, (16, 16), seed=3, q_head=q_head, p_head=p_head)
    x = net33.nominal_scenario()
    x[2 * net33.n + 2] = 0.0
    assert forward(params, x, net33)[2] == 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.1, 30.0), st.sampled_from(HEADS))
def test_box_holds_for_any_params(seed, scale, heads):
    net = load_network("ieee33")
    box = ScenarioBox.around(net, 0.25)
    params = init_params(net, box.lo, box.hi, (8, 8), seed=seed, q_head=heads[0], p_head=heads[1])
    params = params.with_flat(params.flat() * scale)
    rng = np.random.default_rng(seed)
    x = box.sample(rng, 20) * rng.uniform(0.5, 1.5, (20, net.scenario_dim))  # also off the box
    F = forward(params, x, net)
    m = net.n_pv
    _, _, pbar = net.split_scenario(x)
    assert np.all(F[:, :m] >= 0) and np.all(F[:, :m] <= pbar)
    assert np.all(np.abs(F[:, m:]) <= net.inv_cap)
    if heads[0] == "disk":
        inside = pbar <= net.inv_cap
        disk = F[:, :m] ** 2 + F[:, m:] ** 2 - net.inv_cap ** 2
        assert np.all(disk[inside] <= 1e-12)


def test_bad_head_names(net33, box33):
    with pytest.raises(ValueError):
        init_params(net33, box33.lo, box33.hi, q_head="circle")
    with pytest.raises(ValueError):
        init_params(net33, box33.lo, box33.hi, p_head="relu")


# --------------------------------------------------------------------------- sensitivities
def test_two_bus_sensitivity_matches_fd():
    net = two_bus(pv=0.15, cap=0.2, p_load=0.2, q_load=0.1)
    d = np.array([0.08, -0.03])
    st_ = solve_power_flow(net, d, tol=1e-14)
    S = implicit_state_sensitivity(net, d, st_)
    assert S.shape == (4, 2)
    assert rel_err(S, fd_state(net, d)) <= 1e-4
    assert S[0, 0] > 0  # local generation raises the voltage


def test_33bus_sensitivity_matches_fd(net33):
    rng = np.random.default_rng(1)
    d = np.concatenate([net33.pv_avail * rng.uniform(0.2, 1, 7), net33.inv_cap * rng.uniform(-0.5, 0.5, 7)])
    st_ = solve_power_flow(net33, d, tol=1e-14)
    S = implicit_state_sensitivity(net33, d, st_)
    assert rel_err(S, fd_state(net33, d)) <= 1e-4
    # the reduced adjoint form gives the same Jacobian
    dV, dl = ReducedSensitivity(net33).jacobian(st_.v[1:], st_.l, st_.p_flow, st_.q_flow)
    n = net33.n
    assert np.allclose(dV, S[:n], atol=1e-10) and np.allclose(dl, S[n:2 * n], atol=1e-10)


def test_zero_impedance_pins_voltage(net33):
    net = net33.lossless()
    d = np.concatenate([net.pv_avail * 0.5, np.zeros(net.n_pv)])
    S = implicit_state_sensitivity(net, d, solve_power_flow(net, d))
    assert np.all(S[:net.n] == 0)


def test_vjp_matches_jacobian(net33):
    rng = np.random.default_rng(2)
    sens = ReducedSensitivity(net33)
    d = np.concatenate([net33.pv_avail * 0.6, net33.inv_cap * 0.1])
    st_ = solve_power_flow(net33, d)
    gV, gl = rng.normal(size=(2, net33.n))
    dV, dl = sens.jacobian(st_.v[1:], st_.l, st_.p_flow, st_.q_flow)
    want = gV @ dV + gl @ dl
    got = sens.vjp(st_.v[None, 1:], st_.l[None], st_.p_flow[None], st_.q_flow[None], gV[None], gl[None])[0]
    assert np.allclose(got, want, atol=1e-12)


# --------------------------------------------------------------------------- loss and gradient
@pytest.mark.parametrize("q_head,p_head", [("disk", "sigmoid"), ("box", "sigmoid"), ("disk", "clip")])
def test_loss_gradient_two_bus(q_head, p_head):
    net = two_bus(pv=0.3, cap=0.4, p_load=0.05, q_load=0.02, v_max=1.0, l_max=0.005)
    box = ScenarioBox.around(net, 0.25)
    rng = np.random.default_rng(5)
    params = init_params(net, box.lo, box.hi, (6, 6), seed=5, q_head=q_head, p_head=p_head)
    X = box.sample(rng, 12)
    F = forward(params, X, net) * rng.uniform(0.8, 1.2, (12, 2))
    loss, grads, info = loss_and_grad(params, X, F, net, 50.0, 50.0)
    assert info.penalty > 0  # the implicit term is exercised
    assert rel_err(flat_grads(grads), fd_grad(params, X, F, net, 50.0)) <= 1e-3


def test_loss_gradient_33bus(net33, box33):
    rng = np.random.default_rng(6)
    params = init_params(net33, box33.lo, box33.hi, (6, 6), seed=6, p_head="sigmoid")
    params.bs[-1][:net33.n_pv] = 3.0  # push output high so voltage limits bind
    X = box33.sample(rng, 10)
    F = forward(params, X, net33) * 0.9
    loss, grads, info = loss_and_grad(params, X, F, net33, 20.0, 20.0)
    assert info.penalty > 0
    assert rel_err(flat_grads(grads), fd_grad(params, X, F, net33, 20.0)) <= 1e-3


def test_pure_regression_has_no_implicit_term(net33, box33):
    class Boom:
        def vjp(self, *a):
            raise AssertionError("sensitivity used without penalties")

    rng = np.random.default_rng(7)
    params = init_params(net33, box33.lo, box33.hi, (8, 8), seed=7)
    X = box33.sample(rng, 16)
    F = rng.uniform(0, 0.1, (16, net33.dispatch_dim))
    loss, grads, info = loss_and_grad(params, X, F, net33, 0.0, 0.0, sens=Boom())
    assert info.penalty == 0.0
    assert loss == pytest.approx(np.mean(np.sum((forward(params, X, net33) - F) ** 2, axis=1)))


def test_exact_labels_give_zero_loss(net33, box33):
    params = zero_params(net33, box33.lo, box33.hi, (8, 8))
    x = net33.nominal_scenario()[None]
    F = forward(params, x, net33)
    assert feasible_batch(net33, x, F).all()
    loss, grads, _ = loss_and_grad(params, x, F, net33, 100.0, 100.0)
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 50), st.floats(0, 50), st.floats(0, 50), st.integers(0, 1000))
def test_penalty_monotone(pi_a, pi_b, pi_l, seed):
    net = load_network("ieee33")
    box = ScenarioBox.around(net, 0.25)
    params = init_params(net, box.lo, box.hi, (8, 8), seed=seed)
    params.bs[-1][:net.n_pv] = 3.0
    rng = np.random.default_rng(seed)
    X = box.sample(rng, 8)
    F = forward(params, X, net)
    lo, hi = sorted((pi_a, pi_b))
    l1, _, _ = loss_and_grad(params, X, F, net, lo, pi_l, need_grad=False)
    l2, _, _ = loss_and_grad(params, X, F, net, hi, pi_l, need_grad=False)
    l3, _, _ = loss_and_grad(params, X, F, net, hi, pi_l + 1.0, need_grad=False)
    assert l1 <= l2 <= l3


def test_diverged_batch_raises():
    net = two_bus(pv=0.1, p_load=3.0, q_load=3.0, r=0.5, x=0.5)
    params = zero_params(net, net.nominal_scenario() * 0.9, net.nominal_scenario() * 1.1, (4, 4))
    x = net.nominal_scenario()[None]
    with pytest.raises(BatchError):
        loss_and_grad(params, x, np.zeros((1, 2)), net, 1.0, 1.0)
    with pytest.raises(BatchError):
        loss_and_grad(params, np.zeros((0, 3)), np.zeros((0, 2)), net)


# --------------------------------------------------------------------------- training
def small_problem(net33, box33, n=60):
    rng = np.random.default_rng(9)
    X = box33.sample(rng, n)
    _, _, pbar = net33.split_scenario(X)
    F = np.concatenate([0.9 * pbar, np.zeros_like(pbar)], axis=1)
    return X[:40], F[:40], X[40:], F[40:]


def test_zero_epochs_returns_init(net33, box33):
    Xtr, Ftr, Xva, Fva = small_problem(net33, box33)
    init = init_params(net33, box33.lo, box33.hi, (8, 8), seed=1)
    res = train(net33, Xtr, Ftr, Xva, Fva, TrainConfig(hidden=(8, 8), pretrain_epochs=0, epochs=0),
                box33.lo, box33.hi, init=init)
    assert np.array_equal(res.params.flat(), init.flat())
    assert np.array_equal(res.pretrained.flat(), init.flat())
    assert res.log == []


def test_training_is_deterministic(net33, box33):
    Xtr, Ftr, Xva, Fva = small_problem(net33, box33)
    cfg = TrainConfig(hidden=(8, 8), pretrain_epochs=4, epochs=3, batch_size=16, pi_v=10, pi_l=10, seed=4)
    a = train(net33, Xtr, Ftr, Xva, Fva, cfg, box33.lo, box33.hi)
    b = train(net33, Xtr, Ftr, Xva, Fva, cfg, box33.lo, box33.hi)
    assert a.log == b.log
    assert np.array_equal(a.params.flat(), b.params.flat())
    assert {r.phase for r in a.log} == {1, 2}


def test_nonfinite_loss_reports_epoch(net33, box33):
    Xtr, Ftr, Xva, Fva = small_problem(net33, box33)
    Ftr = Ftr.copy()
    Ftr[0, 0] = np.inf
    with pytest.raises(TrainingError) as err:
        train(net33, Xtr, Ftr, Xva, Fva, TrainConfig(hidden=(4, 4), pretrain_epochs=2, epochs=0),
              box33.lo, box33.hi)
    assert err.value.epoch == 0


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(pi_v=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_model_roundtrip(tmp_path, net33, box33):
    params = init_params(net33, box33.lo, box33.hi, (8, 8), seed=2)
    path = tmp_path / "m.json"
    save_model(path, params, net33, TrainConfig(), metrics={"gap": 1.0}, pretrained=params)
    back, pre, meta = load_model(path, net33)
    x = box33.sample(np.random.default_rng(0), 4)
    assert np.array_equal(forward(back, x, net33), forward(params, x, net33))
    assert meta["metrics"] == {"gap": 1.0} and pre is not None
    with pytest.raises(ValueError):
        load_model(path, load_network("syn129"))
    legacy = params.to_dict()
    del legacy["q_head"], legacy["p_head"]
    old = MlpParams.from_dict(legacy)
    assert (old.q_head, old.p_head) == ("box", "sigmoid")


def test_penalty_phase_raises_validation_feasibility(net33, dataset33, models33):
    params, pre, _ = models33
    Xva, _, _ = dataset33.part("val")
    before = feasible_batch(net33, Xva, forward(pre, Xva, net33)).mean()
    after = feasible_batch(net33, Xva, forward(params, Xva, net33)).mean()
    print(f"validation feasibility: supervised {before:.3f}, penalised {after:.3f}")
    assert after > before
