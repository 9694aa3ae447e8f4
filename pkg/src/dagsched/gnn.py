"""Attention-weighted message passing over application DAGs.

Each stage ``j`` gets an embedding built from its children (successors)::

    H_j = g( sum_{u in children(j)} alpha_uj * f(H_u) ) + x_j

where ``alpha_uj`` is a softmax over the children of ``j`` of a learned
score of ``(x_j, x_u, task_count_u)``. Leaves see an empty sum. Running the
update ``max_depth`` times from ``H = g(0) + x`` gives every node the
information of descendants up to ``max_depth`` hops away and nothing beyond;
for DAGs no deeper than ``max_depth`` this is the same as a single
leaves-first sweep.

Application embeddings ``y`` and the global embedding ``z`` reuse the
pattern one level up: attention over the nodes of an application (resp.
over applications) followed by their own ``f``/``g`` pair.

Everything is computed on a :class:`GraphBatch`, the disjoint union of one
or more observations, so one pass serves a single decision or a whole
training iteration.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .diffcore import DenseNet, Tape, Var
from .simcore import AppRuntime, Observation, Server, total_executors
from .trace import ApplicationDag, WorkloadSpec, expected_app_work

FEATURES = ("remaining_tasks", "task_work", "app_executors", "ready", "data_volume")
FEATURE_DIM = len(FEATURES)
ATTENTION_DIM = 2 * FEATURE_DIM + 1
SUMMARY_DIM = 3


@dataclass(frozen=True)
class FeatureScaler:
    """Divisors that bring raw stage features to O(1)."""

    task_count: float = 1.0
    task_work: float = 1.0
    executors: float = 1.0
    data_volume: float = 1.0
    app_work: float = 1.0

    @classmethod
    def for_workload(cls, spec: WorkloadSpec, servers: Sequence[Server]) -> "FeatureScaler":
        tasks = 0.5 * (spec.task_count_range[0] + spec.task_count_range[1])
        dist = spec.task_work_distribution
        if dist["name"] == "constant":
            work = float(dist["value"])
        else:
            work = math.exp(dist.get("mu", 0.0) + 0.5 * dist.get("sigma", 1.0) ** 2)
        work *= spec.scale_factor
        return cls(task_count=tasks, task_work=work, executors=float(total_executors(servers)),
                   data_volume=max(work * spec.data_per_work, 1e-12), app_work=expected_app_work(spec))

    @classmethod
    def from_dags(cls, dags: Sequence[ApplicationDag], servers: Sequence[Server]) -> "FeatureScaler":
        """Empirical divisors for a fixed trace."""
        stages = [s for d in dags for s in d.stages]
        if not stages:
            return cls(executors=float(total_executors(servers)))
        mean = lambda xs: max(float(np.mean(xs)), 1e-12)
        return cls(task_count=mean([s.task_count for s in stages]), task_work=mean([s.task_work for s in stages]),
                   executors=float(total_executors(servers)), data_volume=mean([s.data_volume for s in stages]),
                   app_work=mean([sum(s.total_work for s in d.stages) for d in dags]))

    @property
    def divisors(self) -> np.ndarray:
        return np.array([self.task_count, self.task_work, self.executors, 1.0, self.data_volume])

    def to_dict(self) -> dict:
        return {"task_count": self.task_count, "task_work": self.task_work, "executors": self.executors,
                "data_volume": self.data_volume, "app_work": self.app_work}


def _heights(n: int, children: list[list[int]]) -> np.ndarray:
    h = np.zeros(n, dtype=np.int64)
    order = []
    seen = [False] * n
    for root in range(n):
        stack = [(root, False)]
        while stack:
            v, done = stack.pop()
            if done:
                order.append(v)
                continue
            if seen[v]:
                continue
            seen[v] = True
            stack.append((v, True))
            stack.extend((c, False) for c in children[v] if not seen[c])
    for v in order:  # post-order: children first
        if children[v]:
            h[v] = 1 + max(h[c] for c in children[v])
    return h


def _static(app: AppRuntime, scaler: FeatureScaler) -> dict:
    st = app.cache.get("gnn")
    if st is None or st["scaler"] is not scaler:
        dag = app.dag
        edges = np.array(dag.edges(), dtype=np.int64).reshape(-1, 2)
        st = {
            "scaler": scaler,
            "parent": edges[:, 0],
            "child": edges[:, 1],
            "work": np.array([s.task_work for s in dag.stages]) / scaler.task_work,
            "data": np.array([s.data_volume for s in dag.stages]) / scaler.data_volume,
            "tc": np.array([s.task_count for s in dag.stages], dtype=np.float64) / scaler.task_count,
            "height": _heights(len(dag.stages), app.children),
            "refs": [(dag.app_id, sid) for sid in range(len(dag.stages))],
        }
        app.cache["gnn"] = st
    return st


@dataclass
class EncodedObs:
    """Numeric form of one observation (one graph in a batch)."""

    x: np.ndarray  # (n, FEATURE_DIM)
    tc: np.ndarray  # (n,) normalized task counts
    parent: np.ndarray  # (E,) local node index of each edge's parent
    child: np.ndarray  # (E,)
    node_app: np.ndarray  # (n,) local app index
    height: int
    app_ids: list[int]
    node_refs: list[tuple[int, int]]
    cand_node: np.ndarray  # schedulable stages as local node indices
    cand_app: np.ndarray
    cand_refs: list[tuple[int, int]]
    summary: np.ndarray  # (SUMMARY_DIM,) critic inputs


def encode_observation(obs: Observation, scaler: FeatureScaler) -> EncodedObs:
    """Stage features for every stage of every active application."""
    xs, tcs, parents, children, node_app, refs = [], [], [], [], [], []
    app_ids = sorted(obs.apps)
    offset = 0
    height = 0
    first = {}
    remaining_work = 0.0
    for k, app_id in enumerate(app_ids):
        app = obs.apps[app_id]
        st = _static(app, scaler)
        n = len(app.stage_state)
        remaining = np.array([s.remaining_tasks for s in app.stage_state], dtype=np.float64)
        ready = np.array([1.0 if s.ready_flag else 0.0 for s in app.stage_state])
        x = np.empty((n, FEATURE_DIM))
        x[:, 0] = remaining / scaler.task_count
        x[:, 1] = st["work"]
        x[:, 2] = app.held / scaler.executors
        x[:, 3] = ready
        x[:, 4] = st["data"]
        remaining_work += float(remaining @ st["work"]) * scaler.task_work
        xs.append(x)
        tcs.append(st["tc"])
        parents.append(st["parent"] + offset)
        children.append(st["child"] + offset)
        node_app.append(np.full(n, k, dtype=np.int64))
        first[app_id] = offset
        refs.extend(st["refs"])
        height = max(height, int(st["height"].max()))
        offset += n
    app_pos = {a: k for k, a in enumerate(app_ids)}
    cand_refs = list(obs.schedulable)
    summary = np.array([
        len(app_ids) / 10.0,
        math.log1p(remaining_work / scaler.app_work),
        obs.idle_executors / max(obs.total_executors, 1),
    ])
    cat = np.concatenate
    return EncodedObs(
        x=cat(xs) if xs else np.zeros((0, FEATURE_DIM)),
        tc=cat(tcs) if tcs else np.zeros(0),
        parent=cat(parents) if parents else np.zeros(0, np.int64),
        child=cat(children) if children else np.zeros(0, np.int64),
        node_app=cat(node_app) if node_app else np.zeros(0, np.int64),
        height=height,
        app_ids=app_ids,
        node_refs=refs,
        cand_node=np.array([first[a] + sid for a, sid in cand_refs], dtype=np.int64),
        cand_app=np.array([app_pos[r[0]] for r in cand_refs], dtype=np.int64),
        cand_refs=cand_refs,
        summary=summary,
    )


@dataclass
class GraphBatch:
    """Disjoint union of encoded observations with global indices."""

    x: np.ndarray
    tc: np.ndarray
    parent: np.ndarray
    child: np.ndarray
    node_app: np.ndarray  # node -> global app index
    app_graph: np.ndarray  # app -> graph index
    n_apps: int
    n_graphs: int
    height: int
    cand_node: np.ndarray
    cand_app: np.ndarray  # global app index per candidate
    cand_graph: np.ndarray
    summary: np.ndarray  # (n_graphs, SUMMARY_DIM)
    node_offsets: np.ndarray
    app_offsets: np.ndarray
    cand_offsets: np.ndarray
    _attn_in: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.x.shape[0]

    @property
    def attention_input(self) -> np.ndarray:
        if self._attn_in is None:
            self._attn_in = np.concatenate(
                [self.x[self.parent], self.x[self.child], self.tc[self.child, None]], axis=1)
        return self._attn_in


def make_batch(encoded: Sequence[EncodedObs]) -> GraphBatch:
    nodes = np.cumsum([0] + [e.x.shape[0] for e in encoded])
    apps = np.cumsum([0] + [len(e.app_ids) for e in encoded])
    cands = np.cumsum([0] + [len(e.cand_node) for e in encoded])
    cat = np.concatenate
    return GraphBatch(
        x=cat([e.x for e in encoded]),
        tc=cat([e.tc for e in encoded]),
        parent=cat([e.parent + nodes[i] for i, e in enumerate(encoded)]),
        child=cat([e.child + nodes[i] for i, e in enumerate(encoded)]),
        node_app=cat([e.node_app + apps[i] for i, e in enumerate(encoded)]),
        app_graph=cat([np.full(len(e.app_ids), i, dtype=np.int64) for i, e in enumerate(encoded)]),
        n_apps=int(apps[-1]),
        n_graphs=len(encoded),
        height=max((e.height for e in encoded), default=0),
        cand_node=cat([e.cand_node + nodes[i] for i, e in enumerate(encoded)]),
        cand_app=cat([e.cand_app + apps[i] for i, e in enumerate(encoded)]),
        cand_graph=cat([np.full(len(e.cand_node), i, dtype=np.int64) for i, e in enumerate(encoded)]),
        summary=np.stack([e.summary for e in encoded]) if encoded else np.zeros((0, SUMMARY_DIM)),
        node_offsets=nodes, app_offsets=apps, cand_offsets=cands,
    )


@dataclass
class GnnParams:
    f: DenseNet
    g: DenseNet
    attention: DenseNet
    dag_f: DenseNet
    dag_g: DenseNet
    dag_attention: DenseNet
    global_f: DenseNet
    global_g: DenseNet
    global_attention: DenseNet
    max_depth: int = 8

    NAMES = ("f", "g", "attention", "dag_f", "dag_g", "dag_attention",
             "global_f", "global_g", "global_attention")

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.f.layer_dims != self.g.layer_dims:
            raise ValueError("f and g must share one architecture")
        d = self.f.in_dim
        for name in ("f", "g", "dag_f", "dag_g", "global_f", "global_g"):
            net = getattr(self, name)
            if net.in_dim != d or net.out_dim != d:
                raise ValueError(f"{name} must map width {d} to width {d}")
        if self.attention.in_dim != 2 * d + 1 or self.attention.out_dim != 1:
            raise ValueError("attention scorer must map (x_j, x_u, task_count_u) to a scalar")

    @property
    def width(self) -> int:
        return self.f.in_dim

    def nets(self) -> dict[str, DenseNet]:
        return {name: getattr(self, name) for name in self.NAMES}


def init_gnn_params(rng: np.random.Generator, hidden: int = 16, max_depth: int = 8,
                    width: int = FEATURE_DIM) -> GnnParams:
    def pair():
        return DenseNet.init([width, hidden, width], rng)
    return GnnParams(
        f=pair(), g=pair(), attention=DenseNet.init([2 * width + 1, hidden, 1], rng),
        dag_f=pair(), dag_g=pair(), dag_attention=DenseNet.init([width, hidden, 1], rng),
        global_f=pair(), global_g=pair(), global_attention=DenseNet.init([width, hidden, 1], rng),
        max_depth=max_depth,
    )


def embed_nodes(batch: GraphBatch, params: GnnParams, tape: Tape) -> Var:
    """Per-stage embeddings H, one row per node of the batch."""
    x = tape.constant(batch.x)
    n = batch.n_nodes
    zero = tape.constant(np.zeros((1, params.width)))
    h = tape.add(x, params.g(zero, tape))
    rounds = min(params.max_depth, batch.height)
    if rounds == 0 or batch.parent.size == 0:
        return h
    score = params.attention(tape.constant(batch.attention_input), tape)
    alpha = tape.segment_softmax(score, batch.parent, n)
    for _ in range(rounds):
        msg = tape.mul(tape.gather(params.f(h, tape), batch.child), alpha)
        h = tape.add(params.g(tape.segment_sum(msg, batch.parent, n), tape), x)
    return h


def _attend(items: Var, seg: np.ndarray, n: int, f: DenseNet, g: DenseNet, attention: DenseNet, tape: Tape) -> Var:
    weight = tape.segment_softmax(attention(items, tape), seg, n)
    return g(tape.segment_sum(tape.mul(f(items, tape), weight), seg, n), tape)


def embed_dags(h: Var, batch: GraphBatch, params: GnnParams, tape: Tape) -> Var:
    """Application embeddings y, one row per app of the batch."""
    return _attend(h, batch.node_app, batch.n_apps, params.dag_f, params.dag_g, params.dag_attention, tape)


def embed_globals(y: Var, batch: GraphBatch, params: GnnParams, tape: Tape) -> Var:
    """Global embedding z per graph; a graph without applications gets zeros."""
    z = _attend(y, batch.app_graph, batch.n_graphs, params.global_f, params.global_g,
                params.global_attention, tape)
    has_apps = np.bincount(batch.app_graph, minlength=batch.n_graphs) > 0
    if not has_apps.all():
        z = tape.mul(z, tape.constant(has_apps[:, None].astype(np.float64)))
    return z


@dataclass
class EmbeddingSet:
    per_node: dict[tuple[int, int], np.ndarray]
    per_dag: dict[int, np.ndarray]
    global_: np.ndarray


def embed(enc: EncodedObs, params: GnnParams, tape: Optional[Tape] = None) -> EmbeddingSet:
    """Embeddings of one encoded observation as dictionaries keyed by app/stage."""
    tape = tape or Tape(enabled=False)
    batch = make_batch([enc])
    h = embed_nodes(batch, params, tape)
    y = embed_dags(h, batch, params, tape)
    z = embed_globals(y, batch, params, tape)
    return EmbeddingSet(
        per_node={ref: h.value[i] for i, ref in enumerate(enc.node_refs)},
        per_dag={a: y.value[k] for k, a in enumerate(enc.app_ids)},
        global_=z.value[0],
    )


def embed_dag(per_node: np.ndarray, params: GnnParams) -> np.ndarray:
    """y for one application from its node embeddings (rows in any order)."""
    per_node = np.atleast_2d(np.asarray(per_node, dtype=np.float64))
    if per_node.shape[0] == 0:
        raise ValueError("application has no stages")
    tape = Tape(enabled=False)
    seg = np.zeros(per_node.shape[0], dtype=np.int64)
    return _attend(tape.constant(per_node), seg, 1, params.dag_f, params.dag_g, params.dag_attention, tape).value[0]


def embed_global(per_dag: np.ndarray, params: GnnParams) -> np.ndarray:
    """z from application embeddings; zeros when there are none."""
    per_dag = np.asarray(per_dag, dtype=np.float64).reshape(-1, params.width)
    if per_dag.shape[0] == 0:
        return np.zeros(params.width)
    tape = Tape(enabled=False)
    seg = np.zeros(per_dag.shape[0], dtype=np.int64)
    return _attend(tape.constant(per_dag), seg, 1, params.global_f, params.global_g,
                   params.global_attention, tape).value[0]


def gradients_through_embedding(tape: Tape, loss: Var, params: GnnParams, loss_grad=1.0) -> dict[str, list[np.ndarray]]:
    """Backpropagate `loss` and return gradients of the GNN networks by name."""
    grads = tape.backward(loss, loss_grad)
    if params.g not in grads:
        raise RuntimeError("tape holds no embedding pass for these parameters")
    # networks a pass did not reach (f and attention on edge-free graphs) get zeros
    return {name: grads.get(net, [np.zeros_like(p) for p in net.params])
            for name, net in params.nets().items()}
