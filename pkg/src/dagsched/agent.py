"""Actor-critic scheduling agent.

Two heads read the embeddings: the task scorer ``q(H_t, y, z)`` rates each
schedulable stage and the parallelism scorer ``w(y, z, l / l_max)`` rates
each allowed limit for an application. Softmaxes turn both into
probabilities and their product over (stage, limit) pairs is the priority
list the action is drawn from. The critic reads ``z`` together with a few
queue statistics; its input is detached from the embedding networks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import diffcore
from .diffcore import DenseNet, Tape, Var
from .gnn import (FeatureScaler, EncodedObs, GnnParams, GraphBatch, SUMMARY_DIM, embed_dags,
                  embed_globals, embed_nodes, encode_observation, init_gnn_params, make_batch)
from .simcore import Observation, SchedAction

DEFAULT_HIDDEN = (32, 16, 8, 1)


@dataclass
class PolicyParameters:
    gnn: GnnParams
    q: DenseNet
    w: DenseNet
    critic: DenseNet
    limits: tuple[int, ...]
    scaler: FeatureScaler = field(default_factory=FeatureScaler)

    def __post_init__(self):
        self.limits = tuple(int(l) for l in self.limits)
        if not self.limits or list(self.limits) != sorted(set(self.limits)) or self.limits[0] < 1:
            raise ValueError("limits must be a non-empty ascending list of positive integers")
        d = self.gnn.width
        for name, net, width in (("q", self.q, 3 * d), ("w", self.w, 2 * d + 1),
                                 ("critic", self.critic, d + SUMMARY_DIM)):
            if net.in_dim != width or net.out_dim != 1:
                raise ValueError(f"{name} must map width {width} to a scalar")

    @property
    def l_max(self) -> int:
        return self.limits[-1]

    def nets(self) -> dict[str, DenseNet]:
        out = {f"gnn.{k}": v for k, v in self.gnn.nets().items()}
        out.update(q=self.q, w=self.w, critic=self.critic)
        return out

    def actor_nets(self) -> dict[str, DenseNet]:
        return {k: v for k, v in self.nets().items() if k != "critic"}

    def snapshot(self) -> "PolicyParameters":
        nets = {k: v.copy() for k, v in self.nets().items()}
        return PolicyParameters.from_nets(nets, self.limits, self.scaler, self.gnn.max_depth)

    @classmethod
    def from_nets(cls, nets: dict[str, DenseNet], limits, scaler: FeatureScaler, max_depth: int) -> "PolicyParameters":
        gnn = GnnParams(**{k: nets[f"gnn.{k}"] for k in GnnParams.NAMES}, max_depth=max_depth)
        return cls(gnn=gnn, q=nets["q"], w=nets["w"], critic=nets["critic"], limits=tuple(limits), scaler=scaler)

    def save(self, path, meta: Optional[dict] = None) -> None:
        info = {"limits": list(self.limits), "max_depth": self.gnn.max_depth, "scaler": self.scaler.to_dict()}
        info.update(meta or {})
        diffcore.save_checkpoint(path, self.nets(), info)

    @classmethod
    def load(cls, path) -> tuple["PolicyParameters", dict]:
        nets, meta = diffcore.load_checkpoint(path)
        params = cls.from_nets(nets, meta["limits"], FeatureScaler(**meta["scaler"]), meta["max_depth"])
        return params, meta


def init_policy_params(seed: int, limits: Sequence[int], scaler: FeatureScaler = FeatureScaler(), *,
                       hidden: Sequence[int] = DEFAULT_HIDDEN, gnn_hidden: int = 16,
                       max_depth: int = 8) -> PolicyParameters:
    """Seeded initialization; `hidden` is the scorer stack ending in the scalar output."""
    hidden = tuple(hidden)
    if hidden[-1] != 1:
        raise ValueError("scorer stacks end in a scalar output")
    rng = np.random.default_rng(seed)
    gnn = init_gnn_params(rng, gnn_hidden, max_depth)
    d = gnn.width
    return PolicyParameters(
        gnn=gnn,
        q=DenseNet.init((3 * d,) + hidden, rng),
        w=DenseNet.init((2 * d + 1,) + hidden, rng),
        critic=DenseNet.init((d + SUMMARY_DIM,) + hidden, rng),
        limits=tuple(limits), scaler=scaler,
    )


# ---------------------------------------------------------------------------
# forward passes


@dataclass
class Forward:
    batch: GraphBatch
    tape: Tape
    h: Var
    y: Var
    z: Var
    task_logp: Var  # (n_cand, 1), log-softmax within each graph
    lim_apps: np.ndarray
    lim_logp: Optional[Var]  # (len(lim_apps) * L, 1), log-softmax per app


def policy_forward(batch: GraphBatch, params: PolicyParameters, tape: Tape,
                   lim_apps: Optional[np.ndarray] = None) -> Forward:
    """Task log-probabilities for every candidate and limit log-probabilities
    for the applications in `lim_apps` (global app indices of the batch)."""
    h = embed_nodes(batch, params.gnn, tape)
    y = embed_dags(h, batch, params.gnn, tape)
    z = embed_globals(y, batch, params.gnn, tape)
    if batch.cand_node.size == 0:
        raise ValueError("no schedulable stage to score")
    q_in = tape.concat([tape.gather(h, batch.cand_node), tape.gather(y, batch.cand_app),
                        tape.gather(z, batch.cand_graph)])
    q = params.q(q_in, tape)
    task_logp = tape.segment_log_softmax(q, batch.cand_graph, batch.n_graphs)
    lim_logp = None
    if lim_apps is None:
        lim_apps = np.unique(batch.cand_app)
    if lim_apps.size:
        L = len(params.limits)
        rows_app = np.repeat(lim_apps, L)
        frac = np.tile(np.asarray(params.limits, dtype=np.float64) / params.l_max, lim_apps.size)[:, None]
        w_in = tape.concat([tape.gather(y, rows_app), tape.gather(z, batch.app_graph[rows_app]),
                            tape.constant(frac)])
        w = params.w(w_in, tape)
        lim_logp = tape.segment_log_softmax(w, np.repeat(np.arange(lim_apps.size), L), lim_apps.size)
    return Forward(batch, tape, h, y, z, task_logp, lim_apps, lim_logp)


def _encoded(obs: Union[Observation, EncodedObs], params: PolicyParameters) -> EncodedObs:
    return obs if isinstance(obs, EncodedObs) else encode_observation(obs, params.scaler)


def score_tasks(obs, params: PolicyParameters) -> dict[tuple[int, int], float]:
    """Raw task score q for each schedulable stage."""
    enc = _encoded(obs, params)
    batch = make_batch([enc])
    tape = Tape(enabled=False)
    h = embed_nodes(batch, params.gnn, tape)
    y = embed_dags(h, batch, params.gnn, tape)
    z = embed_globals(y, batch, params.gnn, tape)
    q_in = np.concatenate([h.value[batch.cand_node], y.value[batch.cand_app], z.value[batch.cand_graph]], axis=1)
    q = params.q.predict(q_in)[:, 0]
    return {ref: float(v) for ref, v in zip(enc.cand_refs, q)}


def score_parallelism(obs, app_id: int, params: PolicyParameters) -> dict[int, float]:
    """Raw parallelism score w for each allowed limit of one application."""
    enc = _encoded(obs, params)
    if app_id not in enc.app_ids:
        raise KeyError(f"application {app_id} is not active")
    batch = make_batch([enc])
    tape = Tape(enabled=False)
    y = embed_dags(embed_nodes(batch, params.gnn, tape), batch, params.gnn, tape)
    z = embed_globals(y, batch, params.gnn, tape)
    k = enc.app_ids.index(app_id)
    frac = np.asarray(params.limits, dtype=np.float64)[:, None] / params.l_max
    L = len(params.limits)
    w_in = np.concatenate([np.repeat(y.value[k:k + 1], L, 0), np.repeat(z.value, L, 0), frac], axis=1)
    return {l: float(v) for l, v in zip(params.limits, params.w.predict(w_in)[:, 0])}


@dataclass
class PriorityList:
    """Joint (stage, limit) distribution sorted by descending probability."""

    stage_refs: list[tuple[int, int]]
    limits: np.ndarray
    probs: np.ndarray
    task_probs: dict[tuple[int, int], float]

    def __len__(self):
        return len(self.stage_refs)

    @property
    def entries(self) -> list[tuple[tuple[int, int], int, float]]:
        return [(r, int(l), float(p)) for r, l, p in zip(self.stage_refs, self.limits, self.probs)]


def _priority_from_forward(fw: Forward, enc: EncodedObs, params: PolicyParameters, graph: int = 0) -> PriorityList:
    lo, hi = fw.batch.cand_offsets[graph], fw.batch.cand_offsets[graph + 1]
    p_task = np.exp(fw.task_logp.value[lo:hi, 0])
    L = len(params.limits)
    p_lim = np.exp(fw.lim_logp.value[:, 0]).reshape(-1, L)
    rows = np.searchsorted(fw.lim_apps, fw.batch.cand_app[lo:hi])
    joint = p_task[:, None] * p_lim[rows]
    apps = np.repeat([r[0] for r in enc.cand_refs], L)
    stages = np.repeat([r[1] for r in enc.cand_refs], L)
    lims = np.tile(np.asarray(params.limits), len(p_task))
    flat = joint.ravel()
    order = np.lexsort((lims, stages, apps, -flat))
    return PriorityList(
        stage_refs=[(int(apps[i]), int(stages[i])) for i in order],
        limits=lims[order],
        probs=flat[order],
        task_probs={ref: float(p) for ref, p in zip(enc.cand_refs, p_task)},
    )


def priority_lists(encs: Sequence[EncodedObs], params: PolicyParameters) -> list[PriorityList]:
    """Priority lists for several observations from one batched forward pass."""
    fw = policy_forward(make_batch(encs), params, Tape(enabled=False))
    return [_priority_from_forward(fw, enc, params, g) for g, enc in enumerate(encs)]


def list_entropy(plist: PriorityList) -> float:
    p = plist.probs[plist.probs > 0]
    return float(-(p * np.log(p)).sum())


def build_priority_list(obs, params: PolicyParameters) -> PriorityList:
    enc = _encoded(obs, params)
    if not enc.cand_refs:
        raise ValueError("empty schedulable set")
    fw = policy_forward(make_batch([enc]), params, Tape(enabled=False))
    return _priority_from_forward(fw, enc, params)


def select_action(plist: PriorityList, mode: str = "greedy", rng: Optional[np.random.Generator] = None) -> SchedAction:
    """Greedy takes the top entry; sample draws an entry with probability P."""
    if mode == "greedy":
        i = 0
    elif mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs an rng")
        cdf = np.cumsum(plist.probs)
        i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        i = min(i, len(plist) - 1)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return SchedAction(plist.stage_refs[i], int(plist.limits[i]))


def critic_input(z: np.ndarray, summary: np.ndarray) -> np.ndarray:
    return np.concatenate([np.atleast_2d(z), np.atleast_2d(summary)], axis=1)


def value(obs, params: PolicyParameters) -> float:
    """Critic estimate V(s)."""
    enc = _encoded(obs, params)
    batch = make_batch([enc])
    tape = Tape(enabled=False)
    z = embed_globals(embed_dags(embed_nodes(batch, params.gnn, tape), batch, params.gnn, tape),
                      batch, params.gnn, tape)
    return float(params.critic.predict(critic_input(z.value, batch.summary))[0, 0])


def action_indices(enc: EncodedObs, action: SchedAction, params: PolicyParameters) -> tuple[int, int]:
    ref = tuple(action.stage_ref)
    if ref not in enc.cand_refs:
        raise ValueError(f"stage {ref} is not schedulable in this observation")
    if action.new_limit not in params.limits:
        raise ValueError(f"limit {action.new_limit} is not an allowed limit")
    return enc.cand_refs.index(ref), params.limits.index(action.new_limit)


def actor_objective(encs: Sequence[EncodedObs], cands: Sequence[int], lims: Sequence[int],
                    params: PolicyParameters, tape: Tape) -> tuple[Forward, Var]:
    """Forward pass over a batch of decisions; returns per-decision log π(a|s) as a (G, 1) Var."""
    batch = make_batch(encs)
    cands = np.asarray(cands, dtype=np.int64)
    lims = np.asarray(lims, dtype=np.int64)
    chosen = batch.cand_offsets[:-1] + cands
    fw = policy_forward(batch, params, tape, lim_apps=batch.cand_app[chosen])
    L = len(params.limits)
    logp = tape.add(tape.gather(fw.task_logp, chosen),
                    tape.gather(fw.lim_logp, np.arange(len(encs)) * L + lims))
    return fw, logp


def log_prob_and_grad(obs, action: SchedAction, params: PolicyParameters) -> tuple[float, dict[str, list[np.ndarray]]]:
    """log π(a|s) = log P(task) + log P(limit | task's app) and its gradient
    with respect to every actor network (GNN included)."""
    enc = _encoded(obs, params)
    c, l = action_indices(enc, action, params)
    tape = Tape()
    _, logp = actor_objective([enc], [c], [l], params, tape)
    grads = tape.backward(logp, 1.0)
    names = {id(net): name for name, net in params.actor_nets().items()}
    out = {name: [np.zeros_like(p) for p in net.params] for name, net in params.actor_nets().items()}
    for net, g in grads.items():
        out[names[id(net)]] = g
    return float(logp.value[0, 0]), out


class LearnedPolicy:
    """Decision callback backed by :class:`PolicyParameters`.

    With a ``recorder`` list, each decision appends
    ``(encoded_obs, cand_index, limit_index, entropy)`` for training.
    """

    def __init__(self, params: PolicyParameters, mode: str = "greedy", seed: Optional[int] = None,
                 rng: Optional[np.random.Generator] = None, recorder: Optional[list] = None):
        self.params = params
        self.mode = mode
        self.rng = rng if rng is not None else np.random.default_rng(seed)
        self.recorder = recorder

    def __call__(self, obs: Observation) -> SchedAction:
        enc = encode_observation(obs, self.params.scaler)
        plist = priority_lists([enc], self.params)[0]
        action = select_action(plist, self.mode, self.rng)
        if self.recorder is not None:
            c, l = action_indices(enc, action, self.params)
            self.recorder.append((enc, c, l, list_entropy(plist)))
        return action
