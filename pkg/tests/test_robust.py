import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from conftest import small_feeder
from nndispatch import build_matrices, check_feasibility, load_network
from nndispatch.inner import Affine, InnerSystem, Layout, assemble_inner_system, make_taylor_cuts, nominal_expansion_state
from nndispatch.lp import simplex, solve_lp
from nndispatch.robust import (
    AffineRule,
    FingerprintMismatch,
    FormulationError,
    NoInteriorRule,
    RobustRows,
    ScenarioBox,
    UncertifiedScenarioWarning,
    build_robust_lp,
    dualize_linear_row,
    eval_interior_point,
    fit_affine_rule,
    robust_rows_from_system,
    worst_case,
)


def small_system(scale=1.0):
    net = small_feeder(scale)
    mat = build_matrices(net)
    return net, assemble_inner_system(net, mat, make_taylor_cuts(net, nominal_expansion_state(net)))


@pytest.fixture(scope="module")
def small():
    net, sys = small_system()
    rules = {r: fit_affine_rule(sys, ScenarioBox.around(net, r), net.fingerprint, method="highs", refine=False)
             for r in (0.0, 0.05, 0.25)}
    return net, sys, rules


def brute_box_max(a, const, box):
    return float((box.vertices() @ a).max() + const)


def dual_certificate(g, k, c, W, w, box):
    """Solve the emitted dual rows for a fixed rule: min hi.lp - lo.lm subject to the equalities."""
    ne, nx = W.shape
    d = dualize_linear_row(g, k, c, 0.0, box, ne)
    A_eq = np.hstack([d["eq"]["lam_plus"], d["eq"]["lam_minus"]])
    b_eq = d["eq"]["rhs"] - d["eq"]["W"] @ W.ravel()
    obj = np.concatenate([d["ineq"]["lam_plus"], d["ineq"]["lam_minus"]])
    sol = simplex(-obj, A_eq=A_eq, b_eq=b_eq)  # lam >= 0 by default
    return -sol.value + d["ineq"]["w"] @ w - d["ineq"]["rhs"]


# --------------------------------------------------------------------------- dualization
def test_trivial_row_x_le_5():
    box = ScenarioBox(np.zeros(1), np.ones(1))
    rows = RobustRows(sp.csr_matrix((1, 1)), np.array([[1.0]]), np.array([-5.0]), np.array([1.0]))
    for method in ("highs", "simplex"):
        sol = solve_lp(build_robust_lp(rows, 1, box), method)
        assert sol.value == pytest.approx(4.0, abs=1e-9)


def test_zero_coefficient_row_is_box_independent():
    rows = RobustRows(sp.csr_matrix((1, 1)), np.zeros((1, 2)), np.array([-2.5]), np.array([1.0]))
    vals = []
    for lo, hi in ((np.zeros(2), np.ones(2)), (-10 * np.ones(2), 7 * np.ones(2))):
        lp = build_robust_lp(rows, 1, ScenarioBox(lo, hi))
        sol = solve_lp(lp, "highs")
        lay = lp.layout
        lp_, lm_ = sol.z[lay["lam_plus"]:lay["lam_minus"]], sol.z[lay["lam_minus"]:]
        assert np.allclose(lp_, lm_, atol=1e-9)
        vals.append(sol.value)
    assert vals[0] == pytest.approx(2.5) and vals[1] == pytest.approx(2.5)


def test_dual_certificate_equals_box_maximum():
    rng = np.random.default_rng(17)
    ne, nx = 5, 8
    for _ in range(100):
        box = ScenarioBox(rng.uniform(-2, 0, nx), rng.uniform(0, 2, nx))
        W, w = rng.normal(size=(ne, nx)), rng.normal(size=ne)
        g, k, c = rng.normal(size=ne), rng.normal(size=nx), rng.normal()
        ref = brute_box_max(W.T @ g + k, g @ w + c, box)
        assert dual_certificate(g, k, c, W, w, box) == pytest.approx(ref, abs=1e-9)
        rows = RobustRows(sp.csr_matrix(g[None, :]), k[None, :], np.array([c]), np.array([1.0]))
        assert worst_case(rows, W, w, box)[0] == pytest.approx(ref, abs=1e-9)


def test_dualize_rejects_bad_rows():
    box = ScenarioBox(np.zeros(2), np.ones(2))
    with pytest.raises(FormulationError):
        dualize_linear_row(np.ones(3), np.ones(2), 0.0, 1.0, box, ne=2)
    with pytest.raises(FormulationError):
        dualize_linear_row(np.ones(2), np.array([1.0, np.nan]), 0.0, 1.0, box, ne=2)


# --------------------------------------------------------------------------- 1-norm rows
def toy_system(comp: Affine, bound: Affine) -> InnerSystem:
    """ny = 2 (P, Q), nx = 1, one loose linear row and one SOC block."""
    L = Layout(n=0, m=1)
    lin = Affine(np.array([[-1.0, 0.0]]), np.zeros((1, 1)), np.array([-10.0]))
    k = len(comp)
    blocks = np.full((1, 3), -1)
    blocks[0, :k] = np.arange(k)
    return InnerSystem(layout=L, lin=lin, lin_family=np.array(["pv_lower"]), comp=comp, bound=bound,
                       blocks=blocks, block_family=np.array(["inverter"]), soc_scale=np.ones(0),
                       pairing="sound")


def test_one_dimensional_block_is_exact():
    comp = Affine(np.array([[1.0, 0.0]]), np.array([[-1.0]]), np.zeros(1))   # P - x
    bound = Affine(np.zeros((1, 2)), np.zeros((1, 1)), np.ones(1))
    sys = toy_system(comp, bound)
    rule = fit_affine_rule(sys, ScenarioBox(np.zeros(1), np.ones(1)), method="highs", refine=False)
    assert rule.s_star == pytest.approx(1.0, abs=1e-9)  # 2-norm optimum is 1 as well


def test_zero_vector_block_reduces_to_bound():
    comp = Affine(np.zeros((1, 2)), np.zeros((1, 1)), np.zeros(1))
    bound = Affine(np.zeros((1, 2)), np.array([[-1.0]]), np.array([2.0]))  # 2 - x
    rule = fit_affine_rule(toy_system(comp, bound), ScenarioBox(np.zeros(1), np.ones(1)),
                           method="highs", refine=False)
    assert rule.s_star == pytest.approx(1.0, abs=1e-9)


def test_one_norm_rows_imply_soc(small):
    """Every rule point accepted by the 1-norm rows satisfies the 2-norm blocks with margin s*."""
    net, sys, rules = small
    rule = rules[0.25]
    rng = np.random.default_rng(4)
    X = np.vstack([rule.box.sample(rng, 10_000), rule.box.vertices()])
    Y = X @ rule.W.T + rule.w
    assert sys.soc_values(Y, X).max() <= -rule.s_star + 1e-9
    assert sys.lin(Y, X).max() <= -rule.s_star + 1e-9


def test_inverter_disk_sampled_33(net33, sys33, rule33, box33):
    rng = np.random.default_rng(8)
    X = box33.sample(rng, 10_000)
    soc = sys33.soc_values(X @ rule33.W.T + rule33.w, X)
    inv = sys33.block_family == "inverter"
    assert soc[:, inv].max() <= -rule33.s_star + 1e-9


# --------------------------------------------------------------------------- fitting
def direct_margin_oracle(sys, x):
    """max s for one scenario, written straight from the inner-system matrices."""
    ny, nc = sys.layout.ny, len(sys.comp)
    nb = sys.n_blocks
    nv = ny + nc + 1
    rows, rhs = [], []
    add = lambda a, b: (rows.append(a), rhs.append(b))  # noqa: E731
    for i in range(sys.n_lin):
        a = np.zeros(nv); a[:ny] = sys.lin.G[i]; a[-1] = 1.0
        add(a, -(sys.lin.K[i] @ x + sys.lin.c[i]))
    for j in range(nc):
        v = sys.comp.K[j] @ x + sys.comp.c[j]
        for sgn in (1.0, -1.0):
            a = np.zeros(nv); a[:ny] = sgn * sys.comp.G[j]; a[ny + j] = -1.0
            add(a, -sgn * v)
    for b in range(nb):
        a = np.zeros(nv)
        for j in sys.blocks[b]:
            if j >= 0:
                a[ny + j] = 1.0
        a[:ny] = -sys.bound.G[b]; a[-1] = 1.0
        add(a, sys.bound.K[b] @ x + sys.bound.c[b])
    c = np.zeros(nv); c[-1] = -1.0
    res = linprog(c, A_ub=np.array(rows), b_ub=np.array(rhs), bounds=[(None, None)] * nv, method="highs")
    assert res.status == 0
    return -res.fun


def test_degenerate_box_matches_direct_margin(small):
    net, sys, rules = small
    x0 = net.nominal_scenario()
    assert rules[0.0].s_star == pytest.approx(direct_margin_oracle(sys, x0), abs=1e-8)
    # the rule collapses to one interior point
    assert np.allclose(eval_interior_point(rules[0.0], x0), rules[0.0].full(x0)[:4])


def test_conservatism_ordering(small):
    _, _, rules = small
    assert rules[0.0].s_star >= rules[0.05].s_star - 1e-9
    assert rules[0.05].s_star >= rules[0.25].s_star - 1e-9
    assert rules[0.25].s_star > 0


def test_methods_agree(small):
    net, sys, rules = small
    box = ScenarioBox.around(net, 0.25)
    ipm = fit_affine_rule(sys, box, net.fingerprint, method="ipm", refine=False)
    assert ipm.s_star == pytest.approx(rules[0.25].s_star, abs=1e-7)


def test_every_vertex_certified(small):
    net, sys, rules = small
    rule = rules[0.25]
    V = rule.box.vertices()
    assert len(V) == 2 ** net.scenario_dim
    for x in V:
        assert check_feasibility(net, eval_interior_point(rule, x), x, tol=1e-6).feasible


def test_refinement_keeps_slack_and_raises_output(small):
    net, sys, rules = small
    box = ScenarioBox.around(net, 0.25)
    ref = fit_affine_rule(sys, box, net.fingerprint, method="highs", refine=True, keep=0.9, box_margin=1.0)
    base = rules[0.25]
    assert ref.s_opt == pytest.approx(base.s_star, abs=1e-9)
    assert ref.s_star >= 0.9 * ref.s_opt - 1e-9
    c = 0.5 * (box.lo + box.hi)
    m = net.n_pv
    assert eval_interior_point(ref, c)[:m].sum() >= eval_interior_point(base, c)[:m].sum() - 1e-9


def test_box_margin_relaxes_only_pv_rows(small):
    net, sys, rules = small
    box = ScenarioBox.around(net, 0.25)
    ref = fit_affine_rule(sys, box, net.fingerprint, method="highs", keep=0.9, box_margin=0.1)
    rows, ne, family = robust_rows_from_system(sys)
    W, w = ref.W, ref.w
    # network rows keep the full kept slack; the PV rows at least the relaxed share
    ext_W = np.vstack([W, np.zeros((ne - len(w), W.shape[1]))])
    ext_w = np.concatenate([w, np.zeros(ne - len(w))])
    lin = rows.sigma > 0
    pv = np.isin(family, ("pv_lower", "pv_upper"))
    # the epigraph variables are not stored in the rule, so check the linear families only
    worst = worst_case(rows, ext_W, ext_w, box)
    fam_lin = lin & (np.arange(len(rows)) < sys.n_lin)
    assert -worst[fam_lin & ~pv].max() >= 0.9 * ref.s_opt - 1e-7
    assert -worst[fam_lin & pv].max() >= 0.1 * 0.9 * ref.s_opt - 1e-7
    assert ref.s_star > 0
    c = 0.5 * (box.lo + box.hi)
    m = net.n_pv
    full = fit_affine_rule(sys, box, net.fingerprint, method="highs", keep=0.9, box_margin=1.0)
    assert eval_interior_point(ref, c)[:m].sum() >= eval_interior_point(full, c)[:m].sum() - 1e-9
    for x in box.vertices()[:256]:
        assert check_feasibility(net, eval_interior_point(ref, x), x, tol=1e-6).feasible
    with pytest.raises(ValueError):
        fit_affine_rule(sys, box, method="highs", box_margin=0.0)


def test_no_interior_rule_for_overloaded_feeder():
    net, sys = small_system(3.0)
    with pytest.raises(NoInteriorRule):
        fit_affine_rule(sys, ScenarioBox.around(net, 0.25), method="highs")


def test_box_dimension_checked(small):
    net, sys, _ = small
    with pytest.raises(ValueError):
        fit_affine_rule(sys, ScenarioBox(np.zeros(3), np.ones(3)))


def test_rows_census(small):
    net, sys, _ = small
    rows, ne, fam = robust_rows_from_system(sys)
    nc = len(sys.comp)
    assert ne == sys.layout.ny + nc
    assert len(rows) == sys.n_lin + 2 * nc + sys.n_blocks
    assert np.count_nonzero(rows.sigma) == sys.n_lin + sys.n_blocks
    assert list(fam).count("abs") == 2 * nc


# --------------------------------------------------------------------------- the rule object
@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.integers(0, 2 ** 31))
def test_interior_point_is_affine(alpha, seed):
    net = load_network("ieee33")
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(4 * net.n_pv, net.scenario_dim))
    rule = AffineRule(W, rng.normal(size=4 * net.n_pv), 0.1, ScenarioBox.around(net), net.fingerprint, net.n_pv)
    x1, x2 = rule.box.sample(rng, 2)
    lhs = eval_interior_point(rule, alpha * x1 + (1 - alpha) * x2)
    rhs = alpha * eval_interior_point(rule, x1) + (1 - alpha) * eval_interior_point(rule, x2)
    assert np.allclose(lhs, rhs, atol=1e-12, rtol=0)


def test_outside_box_warns(rule33, net33):
    x = net33.nominal_scenario() * 1.5
    with pytest.warns(UncertifiedScenarioWarning):
        f = eval_interior_point(rule33, x)
    assert f.shape == (net33.dispatch_dim,)


def test_save_load_roundtrip(tmp_path, small, net33):
    net, _, rules = small
    path = tmp_path / "rule.json"
    rules[0.25].save(path)
    back = AffineRule.load(path, net)
    assert np.array_equal(back.W, rules[0.25].W) and back.s_star == rules[0.25].s_star
    with pytest.raises(FingerprintMismatch):
        AffineRule.load(path, net33)
    path.write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        AffineRule.load(path)


def test_rule_margin_on_33bus_vertices(sys33, rule33, box33):
    """Invariant of the rule: margin at least s* on sampled vertices and interior points."""
    rng = np.random.default_rng(21)
    X = np.vstack([box33.vertices(rng, size=2000), box33.sample(rng, 2000)])
    Y = X @ rule33.W.T + rule33.w
    assert sys33.lin(Y, X).max() <= -rule33.s_star + 1e-8
    assert sys33.soc_values(Y, X).max() <= -rule33.s_star + 1e-8
