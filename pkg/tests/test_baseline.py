import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import minimize as sp_minimize, minimize_scalar

from rdml import baseline, graph, sim
from rdml.baseline import (ConsensusParams, DegenerateGeometryError, DmlLocalFit, center, cmle_objective,
                           cmle_solve, dml_alpha_hat, dml_consensus, dml_p0_hat, dml_position_update,
                           dml_profile_objective, dml_residual_objective, dml_self_localize, run_dml)
from rdml.channel import ChannelParams, MeasurementSet, Mode, sample_network
from rdml.robust import IncompatibleNetworkError, LocalInformation, PreconditionError

from conftest import NOISELESS, TYPICAL, exact_rss

X_TRUE = np.array([30.123, 40.456])
FOUR_ANCHORS = np.array([[0.0, 0.0], [100.0, 0.0], [0.0, 100.0], [70.0, 90.0]])
ANCHORS = np.array(graph.DEFAULT_ANCHORS)


def logd(x, refs):
    return 10 * np.log10(np.linalg.norm(np.asarray(refs) - x, axis=1))


def random_instance(rng, n=None):
    n = n or int(rng.integers(3, 12))
    refs = rng.uniform(0, 100, (n, 2))
    x = rng.uniform(0, 100, 2)
    r = rng.uniform(-30, 0) - rng.uniform(2, 5) * logd(x, refs) + rng.normal(0, 3, n)
    return x, refs, r


# -- closed-form sub-estimators ----------------------------------------------

def test_p0_hat_alpha_zero_is_mean():
    assert dml_p0_hat(0.0, [5, 5], FOUR_ANCHORS, [-1.0, -2.0, -3.0, -6.0]) == pytest.approx(-3.0)


def test_p0_hat_single_anchor_at_unit_distance():
    assert dml_p0_hat(3.7, [1.0, 0.0], [[0.0, 0.0]], [-42.5]) == pytest.approx(-42.5, abs=1e-12)


def test_p0_hat_empty():
    with pytest.raises(ValueError):
        dml_p0_hat(3.0, [0, 0], np.zeros((0, 2)), [])


def test_noiseless_closed_forms_recover_truth():
    r = exact_rss(NOISELESS, Mode.LOS, FOUR_ANCHORS, X_TRUE)
    r = -20.0 - 3.0 * logd(X_TRUE, FOUR_ANCHORS)  # exactly noise-free
    assert dml_alpha_hat(X_TRUE, FOUR_ANCHORS, r) == pytest.approx(3.0, abs=1e-9)
    assert dml_p0_hat(3.0, X_TRUE, FOUR_ANCHORS, r) == pytest.approx(-20.0, abs=1e-9)


def test_alpha_hat_matches_golden_section(rng):
    for _ in range(50):
        x, refs, r = random_instance(rng)
        s = logd(x, refs)
        f = lambda a: np.sum(center(r + a * s) ** 2)  # noqa: E731
        oracle = minimize_scalar(f, bracket=(-20, 20), method="golden", tol=1e-12).x
        assert dml_alpha_hat(x, refs, r) == pytest.approx(oracle, abs=1e-6)


def test_alpha_hat_equidistant_anchors():
    refs = [[10.0, 0.0], [0.0, 10.0], [-10.0, 0.0]]
    with pytest.raises(DegenerateGeometryError):
        dml_alpha_hat([0.0, 0.0], refs, [-40.0, -41.0, -39.0])


def test_closed_forms_match_normal_equations(rng):
    for _ in range(200):
        x, refs, r = random_instance(rng)
        s = logd(x, refs)
        A = np.column_stack([np.ones_like(s), -s])
        p0, alpha = np.linalg.solve(A.T @ A, A.T @ r)
        a_hat = dml_alpha_hat(x, refs, r)
        assert a_hat == pytest.approx(alpha, rel=1e-9, abs=1e-9)
        assert dml_p0_hat(a_hat, x, refs, r) == pytest.approx(p0, rel=1e-9, abs=1e-9)


def test_closed_forms_beat_perturbed_candidates(rng):
    x, refs, r = random_instance(rng, 8)
    s = logd(x, refs)
    a_hat = dml_alpha_hat(x, refs, r)
    p_hat = dml_p0_hat(a_hat, x, refs, r)
    best = np.sum((r - p_hat + a_hat * s) ** 2)
    cand = np.column_stack([p_hat + rng.normal(0, 1, 10_000), a_hat + rng.normal(0, 0.2, 10_000)])
    cost = np.sum((r[None] - cand[:, :1] + cand[:, 1:] * s[None]) ** 2, axis=1)
    assert np.all(cost >= best)
    # p0 alone at fixed alpha
    p_cand = p_hat + rng.normal(0, 1, 10_000)
    cost_p = np.sum((r[None] - p_cand[:, None] + a_hat * s[None]) ** 2, axis=1)
    assert np.all(cost_p >= best)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30))
def test_centering_is_an_orthogonal_projection(v):
    v = np.array(v)
    once = center(v)
    assert np.allclose(center(once), once, atol=1e-12 * max(1.0, np.abs(v).max()))
    assert abs(once.sum()) <= 1e-12 * max(1.0, np.abs(v).max()) * len(v)


@given(st.floats(-50, 50), st.floats(-5, 5), st.integers(0, 2**31))
def test_profile_objective_invariances(c, beta, seed):
    rng = np.random.default_rng(seed)
    x, refs, r = random_instance(rng, 6)
    pts = rng.uniform(0, 100, (5, 2))
    base = dml_profile_objective(pts, refs, r)
    shifted = dml_profile_objective(pts, refs, r + c)
    # adding beta * s at a candidate point leaves that point's objective unchanged
    tilted = np.array([dml_profile_objective(p[None], refs, r + beta * logd(p, refs))[0] for p in pts])
    assert np.allclose(base, shifted, atol=1e-9 * max(1, np.abs(base).max()))
    assert np.allclose(base, tilted, atol=1e-9 * max(1, np.abs(base).max()))


# -- self-localization and updates ---------------------------------------------

def test_self_localize_noiseless():
    r = -20.0 - 3.0 * logd(X_TRUE, FOUR_ANCHORS)
    fit = dml_self_localize(FOUR_ANCHORS, r)
    assert np.all(np.abs(fit.x_hat - X_TRUE) <= 0.01)
    assert fit.alpha_hat == pytest.approx(3.0, abs=1e-3)
    assert fit.p0_hat == pytest.approx(-20.0, abs=1e-3 * 20)


def test_self_localize_not_worse_than_truth(rng):
    r = -20.0 - 3.0 * logd(X_TRUE, ANCHORS) + rng.normal(0, 2, len(ANCHORS))
    fit = dml_self_localize(ANCHORS, r)
    assert fit.objective <= dml_profile_objective(X_TRUE[None], ANCHORS, r)[0]


def test_self_localize_needs_three_anchors():
    with pytest.raises(PreconditionError):
        dml_self_localize(FOUR_ANCHORS[:2], [-40.0, -50.0])


def test_consensus_examples():
    f = lambda p, a: DmlLocalFit(0, p, a, np.zeros(2))  # noqa: E731
    assert dml_consensus([f(-12.0, 2.5)]) == ConsensusParams(-12.0, 2.5)
    assert dml_consensus([f(-10.0, 2.0), f(-20.0, 4.0)]) == ConsensusParams(-15.0, 3.0)
    assert dml_consensus([f(-20.0, 4.0), f(-10.0, 2.0)]) == ConsensusParams(-15.0, 3.0)
    with pytest.raises(ValueError):
        dml_consensus([])


def test_position_update_noiseless():
    refs = np.vstack([FOUR_ANCHORS[:2], [[50.0, 50.0], [90.0, 10.0]]])
    r = -20.0 - 3.0 * logd(X_TRUE, refs)
    info = LocalInformation(refs[:2], r[:2], refs[2:], r[2:])
    x = dml_position_update(None, ConsensusParams(-20.0, 3.0), info)
    assert np.all(np.abs(x - X_TRUE) <= 0.01)


def test_position_update_anchor_only_matches_profile_and_oracle(rng):
    r = -20.0 - 3.0 * logd(X_TRUE, ANCHORS) + rng.normal(0, 1, len(ANCHORS))
    info = LocalInformation(ANCHORS, r)
    for p in rng.uniform(0, 100, (5, 2)):
        a = dml_alpha_hat(p, ANCHORS, r)
        c = ConsensusParams(dml_p0_hat(a, p, ANCHORS, r), a)
        assert dml_residual_objective(p[None], c, info)[0] == pytest.approx(
            dml_profile_objective(p[None], ANCHORS, r)[0], rel=1e-9)
    c = ConsensusParams(-20.0, 3.0)
    x = dml_position_update(None, c, info)
    f = lambda z: np.sum((r + 20.0 - 3.0 * -logd(z, ANCHORS)) ** 2)  # noqa: E731
    oracle = sp_minimize(f, X_TRUE, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-12}).x
    assert np.linalg.norm(x - oracle) < 1e-6


def test_position_update_permutation_invariant():
    info = LocalInformation(FOUR_ANCHORS, [-40.0, -55.0, -60.0, -62.0], [[50.0, 50.0]], [-45.0])
    perm = LocalInformation(FOUR_ANCHORS[::-1], [-62.0, -60.0, -55.0, -40.0], [[50.0, 50.0]], [-45.0])
    pts = np.array([[10.0, 20.0], [55.5, 70.1]])
    c = ConsensusParams(-15.0, 3.0)
    assert np.allclose(dml_residual_objective(pts, c, info), dml_residual_objective(pts, c, perm), rtol=1e-12)


def test_position_update_guard():
    with pytest.raises(PreconditionError):
        dml_position_update(None, ConsensusParams(0, 3), LocalInformation(FOUR_ANCHORS[:2], [-1.0, -2.0]))


# -- network runs ---------------------------------------------------------------

def complete_instance(nu, seed=0, params=TYPICAL, K=40):
    rng = np.random.default_rng(seed)
    agents = rng.uniform(0, 100, (nu, 2))
    net = graph.complete_network(nu, ANCHORS)
    m = sample_network(net, np.vstack([agents, ANCHORS]), params, K, rng=rng)
    return net, agents, m


def test_run_dml_complete_graph_message_count():
    net, agents, m = complete_instance(10)
    res = run_dml(net, m)
    assert res.messages == 360 == 4 * 10 * 9
    assert res.rounds == 1 and len(res.fits) == 10


def test_run_dml_single_agent():
    net, agents, m = complete_instance(1)
    assert run_dml(net, m).messages == 0


def test_run_dml_refuses_incompatible():
    obs = np.zeros((4, 4), bool)
    net = graph.DirectedNetwork(1, np.zeros((3, 2)), obs, np.ones((4, 4), bool))
    with pytest.raises(IncompatibleNetworkError):
        run_dml(net, MeasurementSet(40, np.full((4, 4), np.nan)))


def test_run_dml_noiseless():
    net, agents, m = complete_instance(4, params=NOISELESS)
    res = run_dml(net, m)
    assert np.all(np.linalg.norm(res.positions() - agents, axis=1) < 0.05)
    assert res.consensus.alpha == pytest.approx(3.0, abs=1e-3)


# -- centralized benchmark -----------------------------------------------------

def test_cmle_noiseless():
    net, agents, m = complete_instance(4, params=NOISELESS)
    pos = np.vstack([agents, ANCHORS])
    exact = np.full_like(m.rbar, np.nan)
    for j, i in zip(*np.nonzero(np.isfinite(m.rbar))):
        exact[j, i] = -20.0 - 3.0 * 10 * np.log10(np.linalg.norm(pos[j] - pos[i]))
    assert cmle_objective(agents, net, MeasurementSet(40, exact), net.los, NOISELESS) == pytest.approx(0.0, abs=1e-12)
    x = cmle_solve(net, m, net.los, NOISELESS)
    assert np.all(np.linalg.norm(x - agents, axis=1) < 1e-2)


def test_cmle_unique_on_small_instance():
    # 4 anchors, 2 agents: a coarse 4-D grid finds no other zero of the objective
    anchors = FOUR_ANCHORS
    agents = np.array([[30.0, 40.0], [75.0, 20.0]])
    net = graph.complete_network(2, anchors)
    m = sample_network(net, np.vstack([agents, anchors]), NOISELESS, 5, rng=np.random.default_rng(0))
    g = np.arange(2.5, 100, 5.0)
    best = np.inf
    for a in g:
        for b in g:
            pts = np.array([(c, d) for c in g for d in g])
            vals = [cmle_objective(np.array([[a, b], p]), net, m, net.los, NOISELESS) for p in pts]
            k = int(np.argmin(vals))
            if vals[k] < best:
                best, arg = vals[k], np.array([[a, b], pts[k]])
    assert np.all(np.linalg.norm(arg - agents, axis=1) < 5.0)
    x = cmle_solve(net, m, net.los, NOISELESS)
    assert np.all(np.linalg.norm(x - agents, axis=1) < 1e-2)


def test_cmle_invariant_to_common_variance_scale():
    net, agents, m = complete_instance(3, seed=4)
    a = cmle_solve(net, m, net.los, TYPICAL)
    scaled = ChannelParams(TYPICAL.p0_los, TYPICAL.alpha_los, 4 * TYPICAL.var_los,
                           TYPICAL.p0_nlos, TYPICAL.alpha_nlos, 4 * TYPICAL.var_nlos)
    b = cmle_solve(net, m, net.los, scaled)
    assert np.allclose(a, b, atol=1e-6)


def test_cmle_single_agent_matches_weighted_nls_oracle(rng):
    anchors = FOUR_ANCHORS[:3]
    x_true = np.array([40.0, 35.0])
    net = graph.complete_network(1, anchors)
    m = sample_network(net, np.vstack([x_true, anchors]), TYPICAL, 40, rng=rng)
    r = m.rbar[1:, 0]
    f = lambda z: np.sum((r - TYPICAL.p0_los + TYPICAL.alpha_los * logd(z, anchors)) ** 2)  # noqa: E731
    g = np.arange(0.5, 100, 1.0)
    start = min(((a, b) for a in g for b in g), key=lambda p: f(np.array(p)))
    oracle = sp_minimize(f, start, method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-14}).x
    x = cmle_solve(net, m, net.los, TYPICAL)[0]
    assert np.linalg.norm(x - oracle) < 1e-6


def test_cmle_refuses_unlocalizable():
    obs = np.zeros((4, 4), bool)
    net = graph.DirectedNetwork(1, np.zeros((3, 2)), obs, np.ones((4, 4), bool))
    with pytest.raises(ValueError, match="not localizable"):
        cmle_solve(net, MeasurementSet(40, np.full((4, 4), np.nan)), net.los, TYPICAL)


def test_cmle_error_non_increasing_in_k():
    meds = []
    for K in (1, 10, 40, 160):
        scn = sim.Scenario(K=K, trials=8, algorithms=("cmle",), seed=11)
        meds.append(sim.median_error(sim.stacked_errors(sim.run_trials(scn), "cmle")))
    assert all(b <= a for a, b in zip(meds, meds[1:])), meds
