"""Graph actor-critic for idle-vehicle repositioning.

The actor maps a zone graph to one Dirichlet row per origin zone; the critic
maps the same graph to a scalar state value. Training is synchronous A2C with
full-episode Monte-Carlo returns.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import diffnet as dn
from . import mdp
from .diffnet import tensor as T
from .metrics import ServiceMetrics, compute_metrics
from .sim import EpisodeTrace, NoRepositioning

# Seed bases; training episode e of run seed s uses s * TRAIN_STRIDE + e.
TRAIN_STRIDE = 1_000_000
CALIBRATION_BASE = 500_000_000
EVAL_BASE = 900_000_000
HELDOUT_BASE = 2_000_000_000

CURVE_COLUMNS = ("episode", "mean_reward", "eval_mean_wait", "actor_grad_norm",
                 "critic_grad_norm", "actor_loss", "critic_loss")


class TrainingFault(RuntimeError):
    """Non-finite values during a forward pass or an update."""

    def __init__(self, msg: str, dump: Optional[Path] = None):
        super().__init__(msg if dump is None else f"{msg} (batch dumped to {dump})")
        self.dump = dump


@dataclass
class NetConfig:
    n_zones: int
    n_features: int
    fleet_size: int
    hidden: int = 32
    tau: float = 0.5
    n_gcn: int = 4
    time_feature: bool = True
    eps_conc: float = dn.EPS_CONC


def graph_inputs(state: mdp.ZoneGraph, fleet_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Node features scaled by fleet size and travel times scaled by their max."""
    x = np.asarray(state.node_features, float) / max(fleet_size, 1)
    m = np.asarray(state.adjacency, float)
    mx = m.max() if m.size else 0.0
    return x, (m / mx if mx > 0 else np.zeros_like(m))


class _GraphNet:
    """GAT layer followed by residual GCN layers; subclasses add the heads."""

    def __init__(self, cfg: NetConfig, seed: int = 0):
        self.cfg = cfg
        self.params = dn.ParamStore(seed)
        h = cfg.hidden
        dn.add_gat(self.params, "gat", cfg.n_features, h)
        for k in range(cfg.n_gcn):
            dn.add_gcn(self.params, f"gcn{k}", h)
        self._cache = None

    def _graph(self, state):
        x, m_norm = graph_inputs(state, self.cfg.fleet_size)
        if x.shape != (self.cfg.n_zones, self.cfg.n_features):
            raise dn.ShapeError(f"state features {x.shape} do not match network input "
                                f"({self.cfg.n_zones}, {self.cfg.n_features})")
        key = m_norm.tobytes()
        if self._cache is None or self._cache[0] != key:
            self._cache = (key, dn.normalized_adjacency(m_norm, self.cfg.tau))
        return x, m_norm, self._cache[1]

    def trunk(self, state) -> T.Tensor:
        x, m_norm, a_hat = self._graph(state)
        h = dn.gat_forward(x, m_norm, self.params, "gat")
        for k in range(self.cfg.n_gcn):
            h = dn.gcn_forward(h, a_hat, self.params, f"gcn{k}")
        return h


class ActorNet(_GraphNet):
    def __init__(self, cfg: NetConfig, seed: int = 0):
        super().__init__(cfg, seed)
        h = cfg.hidden
        dn.add_dense(self.params, "mlp0", 2 * h, h)
        dn.add_dense(self.params, "mlp1", h, h)
        dn.add_dense(self.params, "mlp2", h, cfg.n_zones)

    def forward(self, state) -> T.Tensor:
        """n x n concentrations; row i parametrizes the distribution out of zone i."""
        z = dn.sum_pool(self.trunk(state), "per_node")
        z = T.relu(dn.dense_forward(z, self.params, "mlp0"))
        z = T.relu(dn.dense_forward(z, self.params, "mlp1"))
        z = dn.dense_forward(z, self.params, "mlp2")
        return T.softplus(z) + self.cfg.eps_conc

    def concentrations(self, state) -> np.ndarray:
        with T.no_grad():
            return self.forward(state).data


class CriticNet(_GraphNet):
    """State value in normalized units: V = offset + scale * net(S)."""

    def __init__(self, cfg: NetConfig, seed: int = 0, offset: float = 0.0, scale: float = 1.0):
        super().__init__(cfg, seed)
        h = cfg.hidden
        extra = 1 if cfg.time_feature else 0
        dn.add_dense(self.params, "mlp0", h + extra, h)
        dn.add_dense(self.params, "mlp1", h, h)
        dn.add_dense(self.params, "mlp2", h, 1)
        self.offset, self.scale = float(offset), float(scale)

    def forward(self, state, t_frac: float = 0.0) -> T.Tensor:
        g = dn.sum_pool(self.trunk(state), "global")
        if self.cfg.time_feature:
            g = T.concat([g, np.array([[t_frac]])], axis=1)
        z = T.relu(dn.dense_forward(g, self.params, "mlp0"))
        z = T.relu(dn.dense_forward(z, self.params, "mlp1"))
        return dn.dense_forward(z, self.params, "mlp2")

    def value(self, state, t_frac: float = 0.0) -> float:
        with T.no_grad():
            return self.offset + self.scale * self.forward(state, t_frac).item()


def act(actor: ActorNet, state, mode: str = "sample", rng=None) -> tuple[np.ndarray, float]:
    """Row-stochastic action and its joint log-density (sum over rows)."""
    with np.errstate(invalid="ignore", over="ignore"):
        conc = actor.concentrations(state)
    if not np.all(np.isfinite(conc)):
        raise TrainingFault("non-finite concentrations in actor forward pass")
    if mode == "mean":
        a = dn.clamp_simplex(dn.dirichlet_mean(conc))
    elif mode == "sample":
        a = dn.dirichlet_sample(conc, rng if rng is not None else np.random.default_rng())
    else:
        raise ValueError(f"unknown action mode {mode!r}")
    return a, dn.dirichlet_logpdf_value(conc, a)


class ActorPolicy:
    """Adapter exposing the simulator's ``decide(state, rng)`` protocol."""
    needs_state = True

    def __init__(self, actor: ActorNet, mode: str = "sample"):
        self.actor, self.mode = actor, mode

    def decide(self, state, rng):
        return act(self.actor, state, self.mode, rng)


def returns_and_advantages(rewards: Sequence[float], values: Sequence[float],
                           gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Discounted returns-to-go (zero terminal bootstrap) and G_t - b_t."""
    r = np.asarray(rewards, float)
    b = np.asarray(values, float)
    if r.shape != b.shape:
        raise ValueError("rewards and values must have equal length")
    g = np.zeros_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + gamma * acc
        g[t] = acc
    return g, g - b


@dataclass
class Sample:
    state: mdp.ZoneGraph
    action: np.ndarray
    advantage: float
    weight: float        # gamma^t on the score term, or 1
    ret: float
    t_frac: float


def trace_samples(trace: EpisodeTrace, critic: CriticNet, gamma: float,
                  discount_score: bool = True) -> list[Sample]:
    start, end = trace.window
    span = max(end - start, 1e-9)
    recs = [r for r in trace.mdp if r.action is not None]
    tf = [(r.time - start) / span for r in recs]
    vals = [critic.value(r.state, f) for r, f in zip(recs, tf)]
    g, adv = returns_and_advantages([r.reward for r in recs], vals, gamma)
    return [Sample(r.state, np.asarray(r.action), float(a), gamma ** t if discount_score else 1.0,
                   float(G), f) for t, (r, a, G, f) in enumerate(zip(recs, adv, g, tf))]


def actor_objective(actor: ActorNet, samples: Sequence[Sample], n_episodes: int = 1,
                    entropy_coef: float = 0.0) -> T.Tensor:
    """Sum of weight * log pi(A|S) * advantage (+ entropy bonus), per episode."""
    total = None
    for s in samples:
        conc = actor.forward(s.state)
        term = T.sum(dn.dirichlet_logpdf(conc, s.action)) * (s.weight * s.advantage)
        if entropy_coef:
            term = term + T.sum(dn.dirichlet_entropy(conc)) * entropy_coef
        total = term if total is None else total + term
    if total is None:
        return T.Tensor(np.zeros((1, 1)))
    return total * (1.0 / max(n_episodes, 1))


def critic_loss(critic: CriticNet, samples: Sequence[Sample]) -> T.Tensor:
    """Mean squared error to the empirical returns, in normalized units."""
    total = None
    for s in samples:
        target = (s.ret - critic.offset) / critic.scale
        d = critic.forward(s.state, s.t_frac) - target
        total = T.square(d) if total is None else total + T.square(d)
    if total is None:
        return T.Tensor(np.zeros((1, 1)))
    return total * (1.0 / len(samples))


def _grad_norm(grads: dict) -> float:
    return float(math.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def update(actor: ActorNet, critic: CriticNet, traces: Sequence[EpisodeTrace], config,
           opt_actor: dn.Adam, opt_critic: dn.Adam, dump_dir: Optional[Path] = None) -> dict:
    """One synchronous actor (ascent) and critic (descent) step over a batch of episodes."""
    samples = []
    for tr in traces:
        samples.extend(trace_samples(tr, critic, config.gamma, config.discount_score))

    actor.params.zero_grad()
    c_loss_val = None
    try:
        with dn.Tape() as tape, np.errstate(invalid="ignore", over="ignore"):
            try:
                loss_a = -actor_objective(actor, samples, len(traces), config.entropy_coef)
            except dn.DistributionError as exc:
                raise TrainingFault(f"actor forward pass: {exc}") from None
        _check_finite(loss_a.item(), "actor objective")
        tape.backward(loss_a)
        ga = actor.params.grads()
        na = _grad_norm(ga)
        _check_finite(na, "actor gradient")
        if config.grad_clip and na > config.grad_clip:
            ga = {k: g * (config.grad_clip / na) for k, g in ga.items()}
        opt_actor.step(actor.params.params, ga)

        critic.params.zero_grad()
        with dn.Tape() as tape:
            loss_c = critic_loss(critic, samples)
        c_loss_val = loss_c.item()
        _check_finite(c_loss_val, "critic loss")
        tape.backward(loss_c)
        gc = critic.params.grads()
        nc = _grad_norm(gc)
        _check_finite(nc, "critic gradient")
        if config.grad_clip and nc > config.grad_clip:
            gc = {k: g * (config.grad_clip / nc) for k, g in gc.items()}
        opt_critic.step(critic.params.params, gc)
    except TrainingFault as exc:
        raise TrainingFault(str(exc), _dump_batch(samples, dump_dir)) from None
    return {"actor_loss": loss_a.item(), "critic_loss": c_loss_val,
            "actor_grad_norm": na, "critic_grad_norm": nc,
            "mean_reward": float(np.mean([sum(tr.rewards) for tr in traces]))}


def _check_finite(x: float, what: str) -> None:
    if not math.isfinite(x):
        raise TrainingFault(f"non-finite {what}")


def _dump_batch(samples, dump_dir) -> Optional[Path]:
    if dump_dir is None:
        return None
    path = Path(dump_dir) / "fault_batch.npz"
    np.savez(path, features=np.array([s.state.node_features for s in samples]),
             actions=np.array([s.action for s in samples]),
             advantages=np.array([s.advantage for s in samples]),
             returns=np.array([s.ret for s in samples]))
    return path


# -- training loop -----------------------------------------------------------

def net_config_for(scenario, tcfg) -> NetConfig:
    n = scenario.region.n_zones
    width = 3 + scenario.sim.q + scenario.sim.forecast_horizon
    return NetConfig(n_zones=n, n_features=width, fleet_size=scenario.sim.fleet_size,
                     hidden=tcfg.hidden, tau=tcfg.tau, time_feature=tcfg.time_feature)


def train_seed(run_seed: int, episode: int) -> int:
    return run_seed * TRAIN_STRIDE + episode


def eval_seeds(run_seed: int, k: int) -> list[int]:
    return [EVAL_BASE + run_seed * 1000 + i for i in range(k)]


def heldout_seeds(k: int) -> list[int]:
    return [HELDOUT_BASE + i for i in range(k)]


def calibrate(scenario, tcfg) -> tuple[mdp.RewardWeights, float, float]:
    """Reward weights (unless fixed by the scenario) plus critic normalization.

    Weights come from the averaged (W, S, n) tallies of no-repositioning
    rollouts; the normalization is the mean and spread of their returns-to-go.
    """
    seeds = [CALIBRATION_BASE + tcfg.seed * 1000 + i for i in range(max(tcfg.calibration_episodes, 1))]
    traces = [scenario.run(NoRepositioning(), s, log_events=False) for s in seeds]
    if scenario.weights is not None:
        weights = scenario.weights
    else:
        tallies = np.array([tr.reward_tallies() for tr in traces], float)
        W, S, n = tallies.mean(axis=0)
        weights = mdp.calibrate_weights(W, S, n)
    rets = []
    for tr in traces:
        r = [mdp.reward((rec.waiting, rec.served), weights, tr.step_seconds) for rec in tr.mdp]
        rets.extend(returns_and_advantages(r, np.zeros(len(r)), tcfg.gamma)[0])
    rets = np.asarray(rets)
    offset = float(rets.mean()) if rets.size else 0.0
    scale = float(rets.std()) if rets.size and rets.std() > 1e-8 else 1.0
    return weights, offset, scale


def evaluate_policy(scenario, policy, seeds: Sequence[int],
                    weights: Optional[mdp.RewardWeights] = None) -> list[ServiceMetrics]:
    return [compute_metrics(scenario.run(policy, s, weights, log_events=False)) for s in seeds]


def mean_wait(metrics: Sequence[ServiceMetrics]) -> Optional[float]:
    vals = [m.mean_wait for m in metrics if m.mean_wait is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class TrainResult:
    actor: ActorNet
    critic: CriticNet
    weights: mdp.RewardWeights
    curve: list = field(default_factory=list)
    episodes: int = 0
    out_dir: Optional[Path] = None


def _rollout_job(args):
    scenario, values, cfg, weights, seed = args
    actor = ActorNet(cfg)
    actor.params.load(values)
    return scenario.run(ActorPolicy(actor, "sample"), seed, weights, log_events=False)


def save_training_checkpoint(path, result: TrainResult, opt_a: dn.Adam, opt_c: dn.Adam,
                             tcfg, scenario_manifest: Optional[dict] = None) -> None:
    tensors = {}
    for prefix, store in (("actor", result.actor.params), ("critic", result.critic.params)):
        for k, v in store.values().items():
            tensors[f"{prefix}/{k}"] = v
    for prefix, opt in (("opt_actor", opt_a), ("opt_critic", opt_c)):
        for k in opt.m:
            tensors[f"{prefix}/m/{k}"] = opt.m[k]
            tensors[f"{prefix}/v/{k}"] = opt.v[k]
    meta = {"episode": result.episodes, "net": asdict(result.actor.cfg),
            "value_offset": result.critic.offset, "value_scale": result.critic.scale,
            "weights": [result.weights.omega, result.weights.sigma],
            "opt_t": [opt_a.t, opt_c.t], "train": asdict(tcfg), "curve": result.curve,
            # rollouts draw from seeds derived from (run seed, episode index)
            "rng": {"scheme": "train_seed", "run_seed": tcfg.seed, "next_episode": result.episodes},
            "scenario": scenario_manifest}
    dn.save_checkpoint(path, tensors, meta)


def _split(tensors: dict, prefix: str) -> dict:
    p = prefix + "/"
    return {k[len(p):]: v for k, v in tensors.items() if k.startswith(p)}


def load_actor(path) -> tuple[ActorNet, dict]:
    tensors, meta = dn.load_checkpoint(path)
    actor = ActorNet(NetConfig(**meta["net"]))
    actor.params.load(_split(tensors, "actor"))
    return actor, meta


def _write_curve(path: Path, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for r in rows:
            w.writerow(["" if r.get(c) is None else repr(r[c]) if isinstance(r[c], float) else r[c]
                        for c in CURVE_COLUMNS])


def train(scenario, tcfg=None, out_dir=None, resume=None,
          log: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Synchronous A2C: ``workers`` sampled rollouts per update, evaluated in
    ``eval_mode`` on held-out seeds every ``eval_every`` updates.

    With ``out_dir`` set, writes ``checkpoint.ckpt``, ``learning_curve.csv``
    and ``run_manifest.json``. ``resume`` is a checkpoint path to continue from.
    """
    tcfg = tcfg or scenario.train
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    cfg = net_config_for(scenario, tcfg)
    if resume:
        tensors, meta = dn.load_checkpoint(resume)
        cfg = NetConfig(**meta["net"])
        weights = mdp.RewardWeights(*meta["weights"])
        offset, scale = meta["value_offset"], meta["value_scale"]
    else:
        weights, offset, scale = calibrate(scenario, tcfg)
    actor = ActorNet(cfg, seed=tcfg.seed)
    critic = CriticNet(cfg, seed=tcfg.seed + 1, offset=offset, scale=scale)
    opt_a = dn.Adam.for_store(actor.params, lr=tcfg.actor_lr)
    opt_c = dn.Adam.for_store(critic.params, lr=tcfg.critic_lr)
    result = TrainResult(actor, critic, weights, out_dir=out)
    if resume:
        actor.params.load(_split(tensors, "actor"))
        critic.params.load(_split(tensors, "critic"))
        for name, opt, t in (("opt_actor", opt_a, meta["opt_t"][0]),
                             ("opt_critic", opt_c, meta["opt_t"][1])):
            opt.load_state(t, _split(tensors, f"{name}/m"), _split(tensors, f"{name}/v"))
        result.episodes = int(meta["episode"])
        result.curve = list(meta["curve"])
    if out:
        manifest = {"train": asdict(tcfg), "net": asdict(cfg),
                    "weights": [weights.omega, weights.sigma],
                    "value_offset": offset, "value_scale": scale,
                    "scenario": scenario.manifest(),
                    "seeds": {"train": f"{tcfg.seed} * {TRAIN_STRIDE} + episode",
                              "eval": eval_seeds(tcfg.seed, tcfg.eval_seeds)}}
        (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    pool = ProcessPoolExecutor(tcfg.processes) if tcfg.processes > 1 else None
    ev_seeds = eval_seeds(tcfg.seed, tcfg.eval_seeds)
    n_updates = len(result.curve)
    try:
        while result.episodes < tcfg.episodes:
            k = min(tcfg.workers, tcfg.episodes - result.episodes)
            seeds = [train_seed(tcfg.seed, result.episodes + i) for i in range(k)]
            if pool:
                values = actor.params.values()
                traces = list(pool.map(_rollout_job,
                                       [(scenario, values, cfg, weights, s) for s in seeds]))
            else:
                pol = ActorPolicy(actor, "sample")
                traces = [scenario.run(pol, s, weights, log_events=False) for s in seeds]
            stats = update(actor, critic, traces, tcfg, opt_a, opt_c, out)
            result.episodes += k
            n_updates += 1
            row = {"episode": result.episodes, **stats, "eval_mean_wait": None}
            last = result.episodes >= tcfg.episodes
            if tcfg.eval_every and (n_updates % tcfg.eval_every == 0 or last):
                pol = ActorPolicy(actor, tcfg.eval_mode)
                row["eval_mean_wait"] = mean_wait(evaluate_policy(scenario, pol, ev_seeds, weights))
            result.curve.append(row)
            if log:
                ew = row["eval_mean_wait"]
                log(f"episode {result.episodes}: reward {stats['mean_reward']:.3f}"
                    + ("" if ew is None else f" eval wait {ew:.1f}s"))
            if out:
                _write_curve(out / "learning_curve.csv", result.curve)
                if n_updates % max(tcfg.checkpoint_every, 1) == 0 or last:
                    save_training_checkpoint(out / "checkpoint.ckpt", result, opt_a, opt_c,
                                             tcfg, scenario.manifest())
    finally:
        if pool:
            pool.shutdown()
    return result
