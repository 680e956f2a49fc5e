import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rdml import graph, robust, sim
from rdml.channel import sample_network
from rdml.sim import Ecdf, Scenario, count_messages, ecdf, median_error

from conftest import TYPICAL

NOISELESS_SCN = dict(sigma_los=1e-6, sigma_nlos=2e-6, nlos_fraction=0.0)


# -- scenario ------------------------------------------------------------------

def test_scenario_defaults():
    s = Scenario()
    assert (s.num_agents, s.K, s.trials, len(s.anchor_positions), s.radius) == (10, 40, 100, 11, None)
    assert s.sigma_los == 6.0 and s.sigma_nlos == 12.0 and s.p0_nlos_sd == 5.0


@pytest.mark.parametrize("bad", [dict(trials=0), dict(K=0), dict(sigma_los=12, sigma_nlos=6),
                                 dict(alpha_los=(4, 2)), dict(nlos_fraction=1.5), dict(radius=0.0),
                                 dict(algorithms=("magic",)), dict(noise="cauchy")])
def test_scenario_validation(bad):
    with pytest.raises(ValueError):
        Scenario(**bad)


def test_scenario_file_roundtrip(tmp_path):
    p = tmp_path / "s.yaml"
    p.write_text("num_agents: 4\nK: 10\nnoise: {kind: student_t, nu: 5}\nradius: 70\n")
    s = Scenario.load(p)
    assert (s.num_agents, s.K, s.noise, s.nu, s.radius) == (4, 10, "student_t", 5, 70)
    assert Scenario.from_dict(s.as_dict()) == s
    with pytest.raises(ValueError):
        Scenario.from_dict({"bogus": 1})


def test_channel_draw_ranges():
    s = Scenario()
    rng = np.random.default_rng(0)
    for _ in range(200):
        eta = sim.draw_channel(s, rng)
        assert -30 <= eta.p0_los <= 0 and 2 <= eta.alpha_los <= 4 and 3 <= eta.alpha_nlos <= 6
        assert eta.var_los == 36.0 and eta.var_nlos == 144.0


# -- trials --------------------------------------------------------------------

def test_noiseless_single_trial_all_algorithms():
    s = Scenario(trials=1, algorithms=("rdml", "dml", "cmle"), **NOISELESS_SCN)
    (res,) = sim.run_trials(s)
    for algo in s.algorithms:
        assert np.all(res.errors[algo] < 0.05), algo


def test_trials_are_reproducible():
    s = Scenario(trials=2, num_agents=3, algorithms=("rdml", "dml"), seed=5)
    a, b = sim.run_trials(s), sim.run_trials(s)
    assert a == b
    # trial i does not depend on how many trials run
    assert sim.run_trials(s, trials=1, start=1)[0] == a[1]


def test_two_anchors_never_initializable():
    s = Scenario(trials=1, anchors=[[0, 0], [100, 100]], algorithms=("noncoop",))
    with pytest.raises(RuntimeError, match="no compatible network"):
        sim.run_trials(s)


def test_radius_rejection_limit():
    s = Scenario(trials=1, radius=5.0, max_rejections=20, algorithms=("noncoop",))
    with pytest.raises(RuntimeError, match="20 placements"):
        sim.run_trials(s)


def test_radius_trials_compatible_and_within_cost_bounds():
    s = Scenario(trials=3, num_agents=6, radius=40.0, algorithms=("rdml", "dml"), seed=2)
    for r in sim.run_trials(s):
        inst = sim.generate_trial(s, r.trial)
        assert graph.compatibility_test(inst.net).compatible
        assert r.messages["rdml"] <= 2 * 6 * 5 and r.messages["dml"] <= 4 * 6 * 5
        assert inst.meas.digest() == r.digest


def test_same_data_for_every_algorithm(monkeypatch):
    seen = []
    real = sim.MeasurementSet.digest

    def spy(self):
        d = real(self)
        seen.append(d)
        return d

    monkeypatch.setattr(sim.MeasurementSet, "digest", spy)
    sim.run_trials(Scenario(trials=1, num_agents=2, algorithms=("rdml", "dml", "cmle")))
    assert len(set(seen)) == 1 and len(seen) >= 3


def test_student_t_noise_runs():
    (r,) = sim.run_trials(Scenario(trials=1, num_agents=3, noise="student_t", algorithms=("dml",)))
    assert np.all(np.isfinite(r.errors["dml"]))


def test_parallel_matches_serial():
    s = Scenario(trials=2, num_agents=2, algorithms=("dml",), seed=9)
    assert sim.run_trials(s, parallel=2) == sim.run_trials(s)


# -- metrics ---------------------------------------------------------------------

def test_ecdf_single():
    e = ecdf([5.0])
    assert list(e.values) == [5.0] and list(e.probs) == [1.0]


def test_ecdf_evaluation():
    assert ecdf([1, 2, 3, 4])(2.5) == 0.5


def test_ecdf_empty():
    with pytest.raises(ValueError):
        ecdf([])


@given(st.lists(st.floats(0, 100), min_size=1, max_size=30), st.lists(st.floats(0, 100), min_size=1, max_size=30),
       st.floats(0, 100))
def test_ecdf_of_concatenation_is_weighted_merge(a, b, x):
    merged = ecdf(a + b)(x)
    weighted = (len(a) * ecdf(a)(x) + len(b) * ecdf(b)(x)) / (len(a) + len(b))
    assert merged == pytest.approx(weighted)


@given(st.lists(st.floats(0, 100), min_size=1, max_size=50))
def test_ecdf_shape(v):
    e = ecdf(v)
    assert np.all(np.diff(e.values) >= 0) and np.all(np.diff(e.probs) > 0)
    assert e.probs[0] == pytest.approx(1 / len(v)) and e.probs[-1] == 1.0


@pytest.mark.parametrize("v,m", [([1, 2, 3], 2), ([1, 2, 3, 4], 2.5)])
def test_median_examples(v, m):
    assert median_error(v) == m


@given(st.lists(st.floats(0, 1e3), min_size=1, max_size=40))
def test_median_bounded(v):
    assert min(v) <= median_error(v) <= max(v)


def test_median_empty():
    with pytest.raises(ValueError):
        median_error([])


def test_stacked_ecdf_equals_concatenation():
    res = sim.run_trials(Scenario(trials=2, num_agents=3, algorithms=("dml",)))
    stacked = sim.stacked_errors(res, "dml")
    assert np.array_equal(ecdf(stacked).values, np.sort(np.concatenate([r.errors["dml"] for r in res])))


def test_ecdf_quantiles():
    e = ecdf([4.0, 1.0, 3.0, 2.0])
    assert e.quantile(0.5) == 2.0 and e.quantile(0.51) == 3.0 and e.quantile(0.0) == 1.0
    assert len(e.knots()) == 101


# -- message counting ------------------------------------------------------------

def fake_log(net, first_round):
    return [robust.RoundLogEntry(r, i, 0.0, 0, True) for i, r in first_round.items()]


def test_count_messages_complete_graph():
    net = graph.complete_network(10, graph.DEFAULT_ANCHORS)
    log = fake_log(net, {i: 0 for i in range(10)})
    assert count_messages(log, "rdml", net) == 180
    assert count_messages(log, "dml", net) == 360


def test_count_messages_single_agent():
    net = graph.complete_network(1, graph.DEFAULT_ANCHORS)
    for algo in ("rdml", "dml"):
        assert count_messages(fake_log(net, {0: 0}), algo, net) == 0


def test_count_messages_matches_run_log():
    from test_robust import chain_setup, measured
    net, agents = chain_setup()
    res = robust.run_rdml(net, measured(net, agents))
    assert count_messages(res.log, "rdml", net) == res.messages == 2 * (2 + 1 + 0)


# -- non-cooperative baseline ---------------------------------------------------

def anchorless_network():
    """Three anchor-rich agents around agent X (index 0), which hears no anchor."""
    anchors = np.array([[0.0, 0.0], [100.0, 0.0], [0.0, 100.0], [100.0, 100.0]])
    agents = np.array([[50.0, 50.0], [30.0, 30.0], [70.0, 35.0], [50.0, 75.0]])
    n = 8
    obs = np.zeros((n, n), bool)
    for i in (1, 2, 3):
        for a in range(4, 8):
            obs[a, i] = True
        obs[i, 0] = True
    return graph.DirectedNetwork(4, anchors, obs, np.ones((n, n), bool)), agents


def test_noncoop_leaves_anchorless_agent_unlocalized():
    net, agents = anchorless_network()
    m = sample_network(net, np.vstack([agents, net.anchor_positions]), TYPICAL, 40, rng=np.random.default_rng(1))
    nc = sim.noncooperative_baseline(net, m)
    assert not nc[0].localized and all(e.localized for e in nc[1:])
    rd = robust.run_rdml(net, m)
    # three references leave X's fit unidentified; only reachability is checked
    assert rd.estimates[0].localized and rd.estimates[0].round == 1
    assert np.all((rd.estimates[0].position >= 0) & (rd.estimates[0].position <= 100))


def test_noncoop_matches_round_zero_on_complete_graph():
    net = graph.complete_network(3, graph.DEFAULT_ANCHORS)
    agents = np.array([[20.0, 30.0], [70.0, 60.0], [40.0, 80.0]])
    m = sample_network(net, np.vstack([agents, net.anchor_positions]), TYPICAL, 40, rng=np.random.default_rng(2))
    nc = sim.noncooperative_baseline(net, m)
    rd = robust.run_rdml(net, m)
    assert [e.localized for e in nc] == [True] * 3
    for i in range(3):
        assert np.array_equal(nc[i].position, rd.history[0][i])


def test_noncoop_error_vector_excludes_unlocalized():
    s = Scenario(trials=2, num_agents=5, radius=45.0, algorithms=("noncoop",), seed=3)
    res = sim.run_trials(s)
    assert all(len(r.errors["noncoop"]) == 5 for r in res)
    assert len(sim.stacked_errors(res, "noncoop")) <= 10


# -- outputs ---------------------------------------------------------------------

def test_write_outputs(tmp_path):
    s = Scenario(trials=2, num_agents=2, algorithms=("dml",))
    res = sim.run_trials(s)
    summary = sim.write_outputs(res, tmp_path, s)
    lines = (tmp_path / "trials.csv").read_text().splitlines()
    assert lines[0] == "trial,agent,algo,error_m,messages" and len(lines) == 5
    stored = json.loads((tmp_path / "summary.json").read_text())
    assert stored["dml"]["median_error_m"] == summary["dml"]["median_error_m"]
    assert len(stored["dml"]["ecdf"]) == 101
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["trials"][1]["seed"] == [0, 1]
    assert manifest["trials"][0]["digest"] == res[0].digest


def test_replay_from_manifest(tmp_path):
    s = Scenario(trials=2, num_agents=2, algorithms=("dml",), seed=21)
    res = sim.run_trials(s)
    sim.write_outputs(res, tmp_path, s)
    m = json.loads((tmp_path / "manifest.json").read_text())
    again = Scenario.from_dict(m["scenario"])
    for t in m["trials"]:
        assert sim.generate_trial(again, t["trial"]).meas.digest() == t["digest"]


@pytest.mark.parametrize("spec,name,values", [("K=1,10,40", "K", [1, 10, 40]),
                                               ("nlos_fraction=0:0.25:1", "nlos_fraction", [0, 0.25, 0.5, 0.75, 1.0])])
def test_parse_sweep(spec, name, values):
    assert sim.parse_sweep(spec) == (name, values)


def test_sweep_rows():
    rows = sim.sweep(Scenario(trials=1, num_agents=2, algorithms=("dml",)), "K", [5, 20])
    assert [(r["value"], r["algo"]) for r in rows] == [(5, "dml"), (20, "dml")]


def test_load_network_variants(tmp_path):
    p = tmp_path / "n.yaml"
    p.write_text("anchors: [[0,0],[10,0],[0,10]]\nnum_agents: 2\nedges: [[2,0],[3,0],[4,0],[0,1]]\n")
    net = sim.load_network(p)
    assert net.num_agents == 2 and net.observation[0, 1] and not net.observation[1, 0]
    net = sim.load_network({"agents": [[1, 1]], "anchors": [[0, 0], [3, 0], [0, 4]], "radius": 3.0,
                            "nlos_pairs": [[0, 1]], "drop_edges": [[1, 0]]})
    assert not net.observation[1, 0] and not net.los[1, 0] and not net.los[0, 1]
    with pytest.raises(ValueError):
        sim.load_network({"num_agents": 1})
