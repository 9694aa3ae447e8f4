"""Synchronous advantage actor-critic training.

Each iteration draws an episode length from the curriculum and a single
arrival sequence, runs ``num_agents`` sampled episodes on it under one
parameter snapshot, scores every decision with GAE advantages from the
critic and applies one aggregated update. Episodes advance in lockstep so
that every decision instant costs one batched forward pass; the sampled
actions match a one-episode-at-a-time replay with the same worker streams.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import diffcore
from .agent import (PolicyParameters, action_indices, actor_objective, critic_input, init_policy_params,
                    list_entropy, policy_forward, priority_lists, select_action)
from .diffcore import Adam, Tape
from .gnn import EncodedObs, FeatureScaler, embed_dags, embed_globals, embed_nodes, encode_observation, make_batch
from .simcore import Episode, EpisodeTrace, Server, total_executors
from .trace import ApplicationDag, WorkloadSpec, generate_workload

REPORT_COLUMNS = ("iteration", "mean_return", "mean_jct", "entropy", "grad_norm")


class TrainingDiverged(RuntimeError):
    """The divergence guard rejected too many consecutive iterations."""


@dataclass(frozen=True)
class TrainConfig:
    num_agents: int = 16
    mu_mean_init: float = 60.0
    mu_step: float = 0.5
    gamma: float = 0.99
    gae_lambda: float = 1.0
    lr_actor: float = 0.001
    lr_critic: float = 0.01
    iterations: int = 200
    seed: int = 0
    max_episode_length: int = 2000
    reward_scale: float = 1.0
    entropy_weight: float = 0.0
    optimizer: str = "adam"
    normalize_advantages: bool = True
    grad_ceiling: float = 1e3
    max_rejections: int = 5
    hidden: tuple = (32, 16, 8, 1)
    gnn_hidden: int = 16
    max_depth: int = 8
    discount: str = "time"  # "time": gamma per simulated second; "decision": gamma per action
    episode_unit: str = "time"  # episode length counted in simulated seconds or in actions

    def validate(self) -> "TrainConfig":
        def need(ok, field_name, msg):
            if not ok:
                raise ValueError(f"train.{field_name}: {msg}")
        need(isinstance(self.num_agents, int) and self.num_agents >= 1, "num_agents", "must be a positive integer")
        need(self.mu_mean_init > 0, "mu_mean_init", "must be positive")
        need(self.mu_step > 0, "mu_step", "must be positive")
        need(0 < self.gamma <= 1, "gamma", "must lie in (0, 1]")
        need(0 <= self.gae_lambda <= 1, "gae_lambda", "must lie in [0, 1]")
        need(self.lr_actor >= 0, "lr_actor", "must be non-negative")
        need(self.lr_critic >= 0, "lr_critic", "must be non-negative")
        need(isinstance(self.iterations, int) and self.iterations >= 0, "iterations", "must be a non-negative integer")
        need(self.max_episode_length >= 1, "max_episode_length", "must be >= 1")
        need(self.reward_scale > 0, "reward_scale", "must be positive")
        need(self.entropy_weight >= 0, "entropy_weight", "must be non-negative")
        need(self.optimizer in ("adam", "sgd"), "optimizer", "must be 'adam' or 'sgd'")
        need(self.grad_ceiling > 0, "grad_ceiling", "must be positive")
        need(self.max_rejections >= 1, "max_rejections", "must be >= 1")
        need(len(self.hidden) >= 1 and self.hidden[-1] == 1, "hidden", "must end in 1")
        need(self.max_depth >= 1, "max_depth", "must be >= 1")
        need(self.discount in ("time", "decision"), "discount", "must be 'time' or 'decision'")
        need(self.episode_unit in ("time", "actions"), "episode_unit", "must be 'time' or 'actions'")
        return self

    def mu_mean(self, iteration: int) -> float:
        """Curriculum mean after `iteration` completed iterations."""
        return self.mu_mean_init + iteration * self.mu_step


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    rejected: list = field(default_factory=list)  # iteration indices refused by the guard

    def add(self, iteration, mean_return, mean_jct, entropy, grad_norm):
        if self.rows and iteration <= self.rows[-1][0]:
            raise ValueError("report iterations must increase")
        self.rows.append((int(iteration), float(mean_return), float(mean_jct), float(entropy), float(grad_norm)))

    def column(self, name: str) -> np.ndarray:
        return np.array([r[REPORT_COLUMNS.index(name)] for r in self.rows])

    def to_csv(self) -> str:
        lines = [",".join(REPORT_COLUMNS)]
        lines += [f"{r[0]},{r[1]!r},{r[2]!r},{r[3]!r},{r[4]!r}" for r in self.rows]
        return "\n".join(lines) + "\n"


def compute_gae(rewards, values, gamma: float, lam: float, dt=None) -> np.ndarray:
    """A_k = sum_j (gamma*lam)^j delta_{k+j}; `values` carries the bootstrap as its last entry.

    With `dt` (seconds from each decision to the next) the discount of step k
    is ``gamma ** dt[k]``, so decisions taken at the same instant do not
    discount each other.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if v.shape != (r.size + 1,):
        raise ValueError(f"need len(values) == len(rewards) + 1, got {v.size} and {r.size}")
    if dt is None:
        disc = np.full(r.size, float(gamma))
    else:
        dt = np.asarray(dt, dtype=np.float64)
        if dt.shape != r.shape or np.any(dt < 0):
            raise ValueError("dt must be non-negative with one entry per reward")
        disc = float(gamma) ** dt
    adv = np.empty(r.size)
    acc = 0.0
    for k in range(r.size - 1, -1, -1):
        acc = r[k] + disc[k] * v[k + 1] - v[k] + disc[k] * lam * acc
        adv[k] = acc
    return adv


def step_durations(trace: EpisodeTrace) -> np.ndarray:
    """Seconds from each decision to the next one (or to the episode end)."""
    t = np.array([s.time for s in trace.steps] + [trace.end_time])
    return np.diff(t)


def sample_episode_length(mu_mean: float, rng: np.random.Generator, max_length: int = 2000) -> int:
    if not mu_mean > 0:
        raise ValueError("mu_mean must be positive")
    return int(min(max(math.ceil(rng.exponential(mu_mean)), 1), max_length))


@dataclass
class WorkerGradient:
    snapshot: tuple
    grads: dict
    steps: int


def aggregate_gradients(contributions: Sequence[WorkerGradient]) -> dict[str, list[np.ndarray]]:
    """Sum of worker contributions divided by the total decision count."""
    if not contributions:
        raise ValueError("no worker contributions")
    snap = contributions[0].snapshot
    if any(c.snapshot != snap for c in contributions):
        raise ValueError("workers ran different parameter snapshots")
    total = sum(c.steps for c in contributions)
    out = {}
    for name in contributions[0].grads:
        out[name] = [sum(c.grads[name][i] for c in contributions) / max(total, 1)
                     for i in range(len(contributions[0].grads[name]))]
    return out


def snapshot_id(params: PolicyParameters) -> tuple:
    return tuple((name, net.version, id(net)) for name, net in sorted(params.nets().items()))


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class WorkerEpisode:
    encs: list
    cands: list
    lims: list
    entropies: list
    trace: EpisodeTrace

    @property
    def rewards(self) -> np.ndarray:
        return np.array(self.trace.rewards)


def rollout(params: PolicyParameters, workload: Sequence[ApplicationDag], servers: Sequence[Server],
            rngs: Sequence[np.random.Generator], *, horizon: Optional[float] = None,
            max_actions: Optional[int] = None, mode: str = "sample") -> list[WorkerEpisode]:
    """One episode per rng, advanced in lockstep on a shared workload."""
    episodes = [Episode(workload, servers, horizon=horizon, max_actions=max_actions, max_limit=params.l_max)
                for _ in rngs]
    out = [WorkerEpisode([], [], [], [], None) for _ in rngs]
    pending = [ep.next_decision() for ep in episodes]
    while True:
        live = [i for i, obs in enumerate(pending) if obs is not None]
        if not live:
            break
        encs = [encode_observation(pending[i], params.scaler) for i in live]
        for i, enc, plist in zip(live, encs, priority_lists(encs, params)):
            action = select_action(plist, mode, rngs[i])
            c, l = action_indices(enc, action, params)
            rec = out[i]
            rec.encs.append(enc)
            rec.cands.append(c)
            rec.lims.append(l)
            rec.entropies.append(list_entropy(plist))
            episodes[i].act(action, pending[i])
            pending[i] = episodes[i].next_decision()
    for rec, ep in zip(out, episodes):
        rec.trace = ep.trace()
        assert len(rec.trace.steps) == len(rec.encs)
    return out


def values_for(encs: Sequence[EncodedObs], params: PolicyParameters) -> np.ndarray:
    if not encs:
        return np.zeros(0)
    batch = make_batch(encs)
    tape = Tape(enabled=False)
    z = embed_globals(embed_dags(embed_nodes(batch, params.gnn, tape), batch, params.gnn, tape),
                      batch, params.gnn, tape)
    return params.critic.predict(critic_input(z.value, batch.summary))[:, 0]


def _named(grads_by_net: dict, nets: dict) -> dict[str, list[np.ndarray]]:
    names = {id(net): name for name, net in nets.items()}
    out = {name: [np.zeros_like(p) for p in net.params] for name, net in nets.items()}
    for net, g in grads_by_net.items():
        if id(net) in names:
            out[names[id(net)]] = g
    return out


def worker_gradient(params: PolicyParameters, encs, cands, lims, coef) -> dict[str, list[np.ndarray]]:
    """Gradient of sum_k coef_k * log pi(a_k | s_k) over the actor networks."""
    nets = params.actor_nets()
    if not encs:
        return {name: [np.zeros_like(p) for p in net.params] for name, net in nets.items()}
    tape = Tape()
    _, logp = actor_objective(encs, cands, lims, params, tape)
    obj = tape.weighted_sum(logp, np.asarray(coef, dtype=np.float64).reshape(-1, 1))
    return _named(tape.backward(obj, 1.0), nets)


def critic_gradient(params: PolicyParameters, encs, targets) -> tuple[dict[str, list[np.ndarray]], float]:
    """Gradient of the summed squared error between V(s_k) and its target."""
    batch = make_batch(encs)
    off = Tape(enabled=False)
    z = embed_globals(embed_dags(embed_nodes(batch, params.gnn, off), batch, params.gnn, off),
                      batch, params.gnn, off)
    tape = Tape()
    v = params.critic(tape.constant(critic_input(z.value, batch.summary)), tape)
    n = max(len(encs), 1)
    loss = tape.squared_error(v, np.asarray(targets, dtype=np.float64).reshape(-1, 1))
    grads = _named(tape.backward(loss, 1.0), {"critic": params.critic})
    return grads, float(loss.value) / n


def entropy_gradient(params: PolicyParameters, encs) -> dict[str, list[np.ndarray]]:
    """Gradient of the summed task-head entropy (used only with entropy_weight > 0)."""
    tape = Tape()
    fw = policy_forward(make_batch(encs), params, tape)
    p = np.exp(fw.task_logp.value)
    # dH = -sum p (1 + log p) d(log p)
    obj = tape.weighted_sum(fw.task_logp, -p * (1.0 + fw.task_logp.value))
    return _named(tape.backward(obj, 1.0), params.actor_nets())


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainState:
    params: PolicyParameters
    actor_opt: Optional[Adam]
    critic_opt: Optional[Adam]
    iteration: int = 0  # completed iterations
    consecutive_rejections: int = 0

    def save(self, path, config: TrainConfig, extra: Optional[dict] = None) -> None:
        meta = {"iteration": self.iteration, "train": _config_dict(config)}
        if self.actor_opt is not None:
            meta["actor_opt"] = self.actor_opt.state_dict()
            meta["critic_opt"] = self.critic_opt.state_dict()
        meta.update(extra or {})
        self.params.save(path, meta)

    @classmethod
    def load(cls, path) -> tuple["TrainState", dict]:
        params, meta = PolicyParameters.load(path)
        actor = Adam.from_state(meta["actor_opt"]) if "actor_opt" in meta else None
        critic = Adam.from_state(meta["critic_opt"]) if "critic_opt" in meta else None
        return cls(params, actor, critic, int(meta.get("iteration", 0))), meta


def _config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["hidden"] = list(config.hidden)
    return d


def init_state(config: TrainConfig, servers: Sequence[Server], scaler: FeatureScaler = FeatureScaler()) -> TrainState:
    limits = tuple(range(1, total_executors(servers) + 1))
    params = init_policy_params(config.seed, limits, scaler, hidden=config.hidden,
                                gnn_hidden=config.gnn_hidden, max_depth=config.max_depth)
    if config.optimizer == "adam":
        return TrainState(params, Adam(config.lr_actor), Adam(config.lr_critic))
    return TrainState(params, None, None)


def iteration_workloads(spec: WorkloadSpec, seed: int) -> Callable[[int], list[ApplicationDag]]:
    """A fresh arrival sequence per iteration, fixed by (seed, iteration)."""
    def draw(iteration: int) -> list[ApplicationDag]:
        sub = int(np.random.SeedSequence([seed, iteration, 1]).generate_state(1, np.uint64)[0])
        return generate_workload(replace(spec, seed=sub))
    return draw


def worker_rngs(seed: int, iteration: int, n: int) -> list[np.random.Generator]:
    children = np.random.SeedSequence([seed, iteration, 2]).spawn(n)
    return [np.random.default_rng(c) for c in children]


def mean_residence(trace: EpisodeTrace) -> float:
    """Mean completion time, counting unfinished apps up to the episode end."""
    if not trace.apps:
        return 0.0
    return math.fsum((a.completion if a.completion is not None else trace.end_time) - a.arrival
                     for a in trace.apps) / len(trace.apps)


def train_iteration(state: TrainState, config: TrainConfig, workload: Sequence[ApplicationDag],
                    servers: Sequence[Server], report: TrainReport) -> bool:
    """Run one iteration in place; returns False when the guard rejected it."""
    k = state.iteration
    params = state.params
    mu = sample_episode_length(config.mu_mean(k), np.random.default_rng([config.seed, k, 0]),
                               config.max_episode_length)
    cut = {"horizon": float(mu)} if config.episode_unit == "time" else {"max_actions": mu}
    eps = rollout(params, workload, servers, worker_rngs(config.seed, k, config.num_agents), **cut)

    total = sum(len(w.encs) for w in eps)
    advs, targets = [], []
    for w in eps:
        v = np.append(values_for(w.encs, params), 0.0)
        dt = step_durations(w.trace) if config.discount == "time" else None
        a = compute_gae(w.rewards * config.reward_scale, v, config.gamma, config.gae_lambda, dt)
        advs.append(a)
        targets.append(a + v[:-1])
    if config.normalize_advantages and total > 1:
        flat = np.concatenate(advs)
        centre, sd = flat.mean(), flat.std() + 1e-8
        advs = [(a - centre) / sd for a in advs]

    entropy = float(np.mean([h for w in eps for h in w.entropies])) if total else 0.0
    mean_return = float(np.mean([w.trace.total_reward for w in eps]))
    mean_jct = float(np.mean([mean_residence(w.trace) for w in eps]))

    if total == 0:
        report.add(k, mean_return, mean_jct, entropy, 0.0)
        state.iteration += 1
        return True

    # per-worker backward passes keep the tape small; contributions are summed
    snap = snapshot_id(params)
    parts, cparts = [], []
    for w, a, tgt in zip(eps, advs, targets):
        if not w.encs:
            continue
        g = worker_gradient(params, w.encs, w.cands, w.lims, a)
        if config.entropy_weight > 0:
            e = entropy_gradient(params, w.encs)
            g = {name: [gi + config.entropy_weight * ei for gi, ei in zip(g[name], e[name])] for name in g}
        parts.append(WorkerGradient(snap, g, len(w.encs)))
        cg, _ = critic_gradient(params, w.encs, tgt)
        cparts.append(WorkerGradient(snap, cg, len(w.encs)))
    actor = aggregate_gradients(parts)
    critic = aggregate_gradients(cparts)
    norm = diffcore.global_norm(actor)
    count = sum(g.size for gs in actor.values() for g in gs)
    mean_abs = sum(float(np.abs(g).sum()) for gs in actor.values() for g in gs) / max(count, 1)
    ok = math.isfinite(norm) and mean_abs <= config.grad_ceiling and all(
        np.all(np.isfinite(g)) for gs in critic.values() for g in gs)
    if ok:
        if state.actor_opt is not None:
            state.actor_opt.step(params.actor_nets(), actor, ascent=True)
            state.critic_opt.step({"critic": params.critic}, critic, ascent=False)
        else:
            diffcore.sgd_step(params.actor_nets(), actor, config.lr_actor, ascent=True)
            diffcore.sgd_step({"critic": params.critic}, critic, config.lr_critic, ascent=False)
        state.consecutive_rejections = 0
    else:
        report.rejected.append(k)
        state.consecutive_rejections += 1
    report.add(k, mean_return, mean_jct, entropy, norm if math.isfinite(norm) else float("inf"))
    state.iteration += 1
    for net in params.nets().values():
        for p in net.params:
            if not np.all(np.isfinite(p)):
                raise FloatingPointError("non-finite parameter after update")
    return ok


def train(config: TrainConfig, workload_fn: Callable[[int], Sequence[ApplicationDag]], servers: Sequence[Server], *,
          state: Optional[TrainState] = None, scaler: FeatureScaler = FeatureScaler(),
          callback: Optional[Callable[[TrainState, TrainReport], None]] = None) -> tuple[TrainState, TrainReport]:
    """Train until ``config.iterations`` iterations have completed (resuming `state` if given)."""
    config.validate()
    if state is None:
        state = init_state(config, servers, scaler)
    report = TrainReport()
    while state.iteration < config.iterations:
        train_iteration(state, config, workload_fn(state.iteration), servers, report)
        if state.consecutive_rejections >= config.max_rejections:
            raise TrainingDiverged(
                f"divergence guard rejected {state.consecutive_rejections} consecutive iterations "
                f"(last at {state.iteration - 1}, grad_norm {report.rows[-1][4]:.3g})")
        if callback is not None:
            callback(state, report)
    return state, report
