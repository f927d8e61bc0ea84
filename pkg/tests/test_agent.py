import csv

import numpy as np
import pytest

from samsfleet import agent as ag
from samsfleet import diffnet as dn
from samsfleet import scenarios
from samsfleet.mdp import RewardWeights, ZoneGraph
from samsfleet.metrics import compute_metrics
from samsfleet.sim import NoRepositioning

TINY_TRAIN = {"episodes": 4, "workers": 2, "hidden": 8, "eval_every": 1, "eval_seeds": 2,
              "calibration_episodes": 2, "checkpoint_every": 1}


def tiny_scenario(name="toy2", **train):
    return scenarios.load(name, {"window": [0.0, 1800.0], "train": {**TINY_TRAIN, **train}})


class StubActor:
    def __init__(self, conc):
        self.conc = np.asarray(conc, float)

    def concentrations(self, state):
        return self.conc


def _states(sc, seed=0):
    tr = sc.run(NoRepositioning(), seed, log_events=False)
    return [r.state for r in tr.mdp]


def test_act_mean_mode_examples():
    a, lp = ag.act(StubActor([[1.0, 1.0], [1.0, 3.0]]), None, "mean")
    assert np.allclose(a, [[0.5, 0.5], [0.25, 0.75]])
    assert lp == pytest.approx(dn.dirichlet_logpdf_value([[1.0, 1.0], [1.0, 3.0]], a))
    a, _ = ag.act(StubActor([[5.0, 5.0, 5.0]]), None, "mean")
    assert np.allclose(a, 1 / 3)
    with pytest.raises(ValueError):
        ag.act(StubActor([[1.0, 1.0]]), None, "argmax")


def test_act_sample_mean_within_three_sigma():
    conc = np.array([[2.0, 1.0, 1.0], [0.5, 0.5, 3.0]])
    rng = np.random.default_rng(0)
    xs = np.array([ag.act(StubActor(conc), None, "sample", rng)[0] for _ in range(10000)])
    mu = dn.dirichlet_mean(conc)
    a0 = conc.sum(axis=1, keepdims=True)
    sd = np.sqrt(mu * (1 - mu) / (a0 + 1)) / np.sqrt(len(xs))
    assert np.all(np.abs(xs.mean(axis=0) - mu) <= 3 * sd)


def test_joint_logp_is_sum_of_rows_and_mean_scale_invariant():
    conc = np.array([[2.0, 3.0], [1.5, 0.7]])
    x = np.array([[0.4, 0.6], [0.9, 0.1]])
    rows = [dn.dirichlet_logpdf_value(conc[i:i + 1], x[i:i + 1]) for i in range(2)]
    assert dn.dirichlet_logpdf_value(conc, x) == pytest.approx(sum(rows), abs=1e-12)
    a1, _ = ag.act(StubActor(conc), None, "mean")
    a2, _ = ag.act(StubActor(conc * 7.0), None, "mean")
    assert np.allclose(a1, a2, atol=1e-12)


def test_returns_and_advantages_examples():
    g, adv = ag.returns_and_advantages([1, 2, 3], [2, 0, 0], 1.0)
    assert g.tolist() == [6, 5, 3] and adv[0] == 4
    g, adv = ag.returns_and_advantages([1, 2, 3], [2, 0, 0], 0.5)
    assert g[0] == pytest.approx(2.75) and adv[0] == pytest.approx(0.75)
    g, adv = ag.returns_and_advantages([1, -1, 4], [0, 0, 0], 0.9)
    _, adv2 = ag.returns_and_advantages([1, -1, 4], g, 0.9)
    assert np.allclose(adv2, 0)
    with pytest.raises(ValueError):
        ag.returns_and_advantages([1, 2], [0], 1.0)


def test_returns_match_bruteforce_sum():
    rng = np.random.default_rng(1)
    r = rng.standard_normal(12)
    g, _ = ag.returns_and_advantages(r, np.zeros(12), 0.93)
    for t in range(12):
        assert g[t] == pytest.approx(sum(0.93 ** (k - t) * r[k] for k in range(t, 12)), abs=1e-12)


def _net(sc, seed=0):
    cfg = ag.net_config_for(sc, sc.train)
    return cfg, ag.ActorNet(cfg, seed), ag.CriticNet(cfg, seed + 1, offset=-3.0, scale=2.0)


def _samples(sc, actor, adv, n=3, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for t, s in enumerate(_states(sc)[:n]):
        a, _ = ag.act(actor, s, "sample", rng)
        out.append(ag.Sample(s, a, adv[t], 0.99 ** t, float(rng.normal()), t / n))
    return out


def test_zero_advantage_gives_zero_actor_gradient():
    sc = tiny_scenario()
    _, actor, _ = _net(sc)
    samples = _samples(sc, actor, [0.0, 0.0, 0.0])
    with dn.Tape() as tape:
        obj = ag.actor_objective(actor, samples, 1)
    tape.backward(obj)
    assert all(np.all(g == 0) for g in actor.params.grads().values())


def test_actor_objective_finite_difference():
    sc = tiny_scenario()
    _, actor, _ = _net(sc)
    samples = _samples(sc, actor, [1.3, -0.4, 2.0])
    errs = dn.check_gradients(lambda: ag.actor_objective(actor, samples, 2, 0.01), actor.params)
    assert max(errs.values()) < 1e-4


def test_critic_loss_finite_difference_and_descent():
    sc = tiny_scenario()
    _, actor, critic = _net(sc)
    samples = _samples(sc, actor, [0.0] * 6, n=6)
    errs = dn.check_gradients(lambda: ag.critic_loss(critic, samples), critic.params)
    assert max(errs.values()) < 1e-4
    # plain gradient descent with a small step on a fixed batch
    losses = []
    for _ in range(100):
        critic.params.zero_grad()
        with dn.Tape() as tape:
            loss = ag.critic_loss(critic, samples)
        tape.backward(loss)
        losses.append(loss.item())
        for k, t in critic.params.params.items():
            t.data = t.data - 1e-3 * t.grad
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_critic_value_uses_normalization():
    sc = tiny_scenario()
    _, _, critic = _net(sc)
    s = _states(sc)[0]
    raw = critic.forward(s, 0.3).item()
    assert critic.value(s, 0.3) == pytest.approx(-3.0 + 2.0 * raw)


def test_input_scaling():
    feats = np.array([[8.0, 0, 0], [0, 4, 0]])
    adj = np.array([[0, 300.0], [300.0, 0]])
    x, m = ag.graph_inputs(ZoneGraph(feats, adj, 0), 8)
    assert x.tolist() == [[1, 0, 0], [0, 0.5, 0]] and m.tolist() == [[0, 1], [1, 0]]


def test_isr_has_no_forecast_and_egr_does():
    isr = scenarios.load("toy2")
    egr = scenarios.load("toy2", {"agent": "egr"})
    assert ag.net_config_for(isr, isr.train).n_features == 3 + isr.sim.q
    assert ag.net_config_for(egr, egr.train).n_features == 3 + egr.sim.q + 18
    s = _states(scenarios.load("toy2", {"agent": "egr", "window": [0.0, 900.0]}))[0]
    assert s.node_features.shape == (2, 3 + egr.sim.q + 18)


def test_shape_mismatch_raises():
    sc = tiny_scenario()
    _, actor, _ = _net(sc)
    s = _states(sc)[0]
    bad = ZoneGraph(np.zeros((3, s.node_features.shape[1])), np.zeros((3, 3)), s.q)
    with pytest.raises(dn.ShapeError):
        actor.concentrations(bad)


def test_single_zone_city_matches_baseline():
    doc = {"region": {"width": 2000.0, "height": 2000.0, "n_cols": 1, "n_rows": 1},
           "demand": {"source": "synthetic", "rates": [40.0]}, "window": [0.0, 1800.0],
           "sim": {"fleet_size": 5}}
    sc = scenarios.build(doc)
    _, actor, _ = _net(sc)
    for seed in range(3):
        a = compute_metrics(sc.run(ag.ActorPolicy(actor, "sample"), seed, log_events=False))
        b = compute_metrics(sc.run(NoRepositioning(), seed, log_events=False))
        assert a.row() == b.row()


def test_calibration_identity():
    sc = tiny_scenario()
    w, off, scale = ag.calibrate(sc, sc.train)
    assert 0 < w.omega < 1 and scale > 0
    seeds = [ag.CALIBRATION_BASE + i for i in range(2)]
    tallies = np.mean([sc.run(NoRepositioning(), s, log_events=False).reward_tallies()
                       for s in seeds], axis=0)
    W, S, n = tallies
    assert -w.omega * W + w.sigma * S == pytest.approx(-W / n, rel=1e-9)


def test_fixed_weights_are_respected():
    sc = scenarios.load("toy2", {"window": [0.0, 1800.0], "weights": [0.2, 0.8],
                                 "train": TINY_TRAIN})
    w, _, _ = ag.calibrate(sc, sc.train)
    assert (w.omega, w.sigma) == (0.2, 0.8)


def _curve(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_training_is_deterministic(tmp_path):
    a = ag.train(tiny_scenario(), out_dir=tmp_path / "a")
    b = ag.train(tiny_scenario(), out_dir=tmp_path / "b")
    assert _curve(tmp_path / "a/learning_curve.csv") == _curve(tmp_path / "b/learning_curve.csv")
    rows = _curve(tmp_path / "a/learning_curve.csv")
    assert tuple(rows[0]) == ag.CURVE_COLUMNS and len(rows) == 3
    assert all(np.array_equal(a.actor.params[k].data, b.actor.params[k].data) for k in a.actor.params)
    assert (tmp_path / "a/run_manifest.json").exists()


def test_resume_continues_identically(tmp_path):
    full = ag.train(tiny_scenario(), out_dir=tmp_path / "full")
    ag.train(tiny_scenario(episodes=2), out_dir=tmp_path / "half")
    resumed = ag.train(tiny_scenario(), out_dir=tmp_path / "res",
                       resume=tmp_path / "half/checkpoint.ckpt")
    assert resumed.episodes == 4
    assert _curve(tmp_path / "full/learning_curve.csv") == _curve(tmp_path / "res/learning_curve.csv")
    for k in full.actor.params:
        assert np.array_equal(full.actor.params[k].data, resumed.actor.params[k].data)
    actor, meta = ag.load_actor(tmp_path / "res/checkpoint.ckpt")
    assert meta["episode"] == 4
    s = _states(tiny_scenario())[0]
    assert np.array_equal(actor.concentrations(s), resumed.actor.concentrations(s))


def test_nan_parameters_raise_training_fault(tmp_path):
    sc = tiny_scenario()
    cfg, actor, critic = _net(sc)
    traces = [sc.run(ag.ActorPolicy(actor), 0, RewardWeights(0.5, 0.5), log_events=False)]
    actor.params["mlp2.b"].data[:] = np.nan
    with pytest.raises(ag.TrainingFault):
        ag.act(actor, _states(sc)[0], "mean")
    opt_a, opt_c = dn.Adam.for_store(actor.params), dn.Adam.for_store(critic.params)
    with pytest.raises(ag.TrainingFault) as exc:
        ag.update(actor, critic, traces, sc.train, opt_a, opt_c, tmp_path)
    assert exc.value.dump is not None and exc.value.dump.exists()


def test_update_reports_stats_and_changes_parameters():
    sc = tiny_scenario()
    cfg, actor, critic = _net(sc)
    traces = [sc.run(ag.ActorPolicy(actor), s, RewardWeights(0.5, 0.5), log_events=False)
              for s in range(2)]
    before = actor.params.values()
    opt_a, opt_c = dn.Adam.for_store(actor.params), dn.Adam.for_store(critic.params)
    st = ag.update(actor, critic, traces, sc.train, opt_a, opt_c)
    assert set(st) == {"actor_loss", "critic_loss", "actor_grad_norm", "critic_grad_norm",
                       "mean_reward"}
    assert all(np.isfinite(v) for v in st.values())
    assert any(not np.array_equal(before[k], actor.params[k].data) for k in before)


def test_seed_schemes_disjoint():
    tr = {ag.train_seed(s, e) for s in range(3) for e in range(5000)}
    ev = set(ag.eval_seeds(0, 50)) | set(ag.eval_seeds(2, 50))
    ho = set(ag.heldout_seeds(100))
    assert not (tr & ev) and not (tr & ho) and not (ev & ho)


def test_forward_finite_for_bounded_parameters():
    sc = tiny_scenario()
    _, actor, critic = _net(sc)
    rng = np.random.default_rng(5)
    states = _states(sc)
    for _ in range(20):
        for net in (actor, critic):
            net.params.load({k: rng.uniform(-10, 10, t.shape) for k, t in net.params.params.items()})
        for s in states[:3]:
            conc = actor.concentrations(s)
            assert np.all(np.isfinite(conc)) and np.all(conc >= dn.EPS_CONC)
            assert np.isfinite(critic.value(s, 0.5))
            a, lp = ag.act(actor, s, "sample", rng)
            assert np.all(np.isfinite(a)) and np.isfinite(lp)
