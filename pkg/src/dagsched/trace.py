"""Streaming workloads: application DAGs, a synthetic generator and the
newline-delimited trace format.

One trace line holds one application::

    {"app_id": 0, "arrival_time": 1.25, "stages": [
        {"id": 0, "task_count": 3, "task_work": 4.0, "data_volume": 1.0, "parents": []}, ...]}
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class TraceError(ValueError):
    """Raised for invalid workload specs and malformed trace files."""


@dataclass(frozen=True)
class StageSpec:
    stage_id: int
    task_count: int
    task_work: float
    data_volume: float = 0.0
    parent_ids: tuple[int, ...] = ()

    @property
    def total_work(self) -> float:
        return self.task_count * self.task_work


@dataclass(frozen=True)
class ApplicationDag:
    app_id: int
    arrival_time: float
    stages: tuple[StageSpec, ...]

    def __post_init__(self):
        # stages are kept in stage_id order so that stages[i].stage_id == i once valid
        object.__setattr__(self, "stages", tuple(sorted(self.stages, key=lambda s: s.stage_id)))

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    @property
    def total_work(self) -> float:
        return sum(s.total_work for s in self.stages)

    def children(self) -> list[list[int]]:
        kids: list[list[int]] = [[] for _ in self.stages]
        for s in self.stages:
            for p in s.parent_ids:
                kids[p].append(s.stage_id)
        return kids

    def edges(self) -> list[tuple[int, int]]:
        """(parent, child) pairs in stage order."""
        return [(p, s.stage_id) for s in self.stages for p in s.parent_ids]

    def topological_order(self) -> list[int]:
        order = _toposort(len(self.stages), self.edges())
        if order is None:
            raise TraceError(f"application {self.app_id} has a dependency cycle")
        return order


def _toposort(n: int, edges: Iterable[tuple[int, int]]) -> list[int] | None:
    indeg = [0] * n
    kids: list[list[int]] = [[] for _ in range(n)]
    for p, c in edges:
        kids[p].append(c)
        indeg[c] += 1
    ready = [i for i in range(n) if indeg[i] == 0]
    order = []
    while ready:
        ready.sort()
        i = ready.pop(0)
        order.append(i)
        for c in kids[i]:
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
    return order if len(order) == n else None


def validate_dag(dag: ApplicationDag) -> list[str]:
    """Return every invariant violation of `dag`; an empty list means ok."""
    problems = []
    n = len(dag.stages)
    if not n:
        problems.append(f"app {dag.app_id}: no stages")
    if not (dag.arrival_time >= 0 and math.isfinite(dag.arrival_time)):
        problems.append(f"app {dag.app_id}: bad arrival_time {dag.arrival_time!r}")
    ids = [s.stage_id for s in dag.stages]
    seen = set()
    for sid in ids:
        if sid in seen:
            problems.append(f"app {dag.app_id}: duplicate id {sid}")
        seen.add(sid)
    if sorted(seen) != list(range(len(seen))) or len(seen) != n:
        problems.append(f"app {dag.app_id}: stage ids not dense in [0, {n})")
    for s in dag.stages:
        if s.task_count < 1:
            problems.append(f"app {dag.app_id}: stage {s.stage_id} task_count {s.task_count} < 1")
        if not (s.task_work > 0 and math.isfinite(s.task_work)):
            problems.append(f"app {dag.app_id}: stage {s.stage_id} task_work {s.task_work!r} not positive")
        if not (s.data_volume >= 0 and math.isfinite(s.data_volume)):
            problems.append(f"app {dag.app_id}: stage {s.stage_id} data_volume {s.data_volume!r} negative")
        for p in s.parent_ids:
            if p == s.stage_id:
                problems.append(f"app {dag.app_id}: stage {s.stage_id} self-reference")
            elif p not in seen:
                problems.append(f"app {dag.app_id}: stage {s.stage_id} dangling parent {p}")
        if len(set(s.parent_ids)) != len(s.parent_ids):
            problems.append(f"app {dag.app_id}: stage {s.stage_id} repeated parent")
    if not problems:
        if _toposort(n, dag.edges()) is None:
            problems.append(f"app {dag.app_id}: dependency cycle")
    return problems


# ---------------------------------------------------------------------------
# synthetic workloads


@dataclass(frozen=True)
class WorkloadSpec:
    """Recipe for a synthetic workload.

    ``task_work_distribution`` is ``{"name": "lognormal", "mu": .., "sigma": ..}``
    or ``{"name": "constant", "value": ..}``. ``scale_factor`` multiplies every
    task's work (the data scale knob). ``target_load`` is informational unless
    the arrival rate is derived with :func:`calibrate_arrival_rate`.
    """

    app_count: int = 20
    arrival_rate: float = 0.25
    stage_count_range: tuple[int, int] = (2, 6)
    task_count_range: tuple[int, int] = (1, 6)
    task_work_distribution: dict = field(
        default_factory=lambda: {"name": "lognormal", "mu": 0.0, "sigma": 1.0})
    target_load: float = 0.4
    seed: int = 0
    scale_factor: float = 1.0
    data_per_work: float = 1.0

    def validate(self) -> None:
        if not isinstance(self.app_count, (int, np.integer)) or self.app_count < 1:
            raise TraceError(f"app_count must be a positive integer, got {self.app_count!r}")
        if not (self.arrival_rate > 0 and math.isfinite(self.arrival_rate)):
            raise TraceError(f"arrival_rate must be positive, got {self.arrival_rate!r}")
        for name in ("stage_count_range", "task_count_range"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise TraceError(f"{name} must be a non-empty range of positive integers, got {(lo, hi)}")
        if not (0 < self.target_load <= 1):
            raise TraceError(f"target_load must lie in (0, 1], got {self.target_load!r}")
        if not (self.scale_factor > 0):
            raise TraceError(f"scale_factor must be positive, got {self.scale_factor!r}")
        if not (0 <= self.seed < 2**64):
            raise TraceError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        dist = self.task_work_distribution
        name = dist.get("name")
        if name == "lognormal":
            if not dist.get("sigma", 0) >= 0:
                raise TraceError("task_work_distribution: sigma must be non-negative")
        elif name == "constant":
            if not dist.get("value", 0) > 0:
                raise TraceError("task_work_distribution: value must be positive")
        else:
            raise TraceError(f"task_work_distribution: unknown distribution {name!r}")

    def with_load(self, target_load: float, capacity: float) -> "WorkloadSpec":
        """Copy with ``target_load`` set and the arrival rate calibrated to it."""
        spec = replace(self, target_load=target_load)
        return replace(spec, arrival_rate=calibrate_arrival_rate(spec, capacity))


def _draw_work(dist: dict, rng: np.random.Generator, size: int) -> np.ndarray:
    if dist["name"] == "constant":
        return np.full(size, float(dist["value"]))
    return rng.lognormal(dist.get("mu", 0.0), dist.get("sigma", 1.0), size)


def _mean_work(dist: dict) -> float:
    if dist["name"] == "constant":
        return float(dist["value"])
    return math.exp(dist.get("mu", 0.0) + 0.5 * dist.get("sigma", 1.0) ** 2)


def expected_app_work(spec: WorkloadSpec) -> float:
    """E[total work of one application] under `spec` (stages, tasks, work independent)."""
    stages = 0.5 * (spec.stage_count_range[0] + spec.stage_count_range[1])
    tasks = 0.5 * (spec.task_count_range[0] + spec.task_count_range[1])
    return stages * tasks * _mean_work(spec.task_work_distribution) * spec.scale_factor


def calibrate_arrival_rate(spec: WorkloadSpec, cluster_capacity: float) -> float:
    """Arrival rate at which offered work equals ``target_load * cluster_capacity``."""
    if not cluster_capacity > 0:
        raise TraceError(f"cluster_capacity must be positive, got {cluster_capacity!r}")
    work = expected_app_work(spec)
    if not work > 0:
        raise TraceError("expected work per application is zero")
    return spec.target_load * cluster_capacity / work


def generate_workload(spec: WorkloadSpec) -> list[ApplicationDag]:
    """Draw ``spec.app_count`` random DAG applications with Poisson arrivals.

    Shapes and inter-arrival gaps come from two independent streams of the
    seed, so changing only the arrival rate rescales the arrival times of an
    otherwise identical workload.
    """
    spec.validate()
    shape_seq, arrival_seq = np.random.SeedSequence(spec.seed).spawn(2)
    rng = np.random.default_rng(shape_seq)
    gaps = np.random.default_rng(arrival_seq).standard_exponential(spec.app_count)
    arrivals = np.cumsum(gaps) / spec.arrival_rate

    apps = []
    s_lo, s_hi = spec.stage_count_range
    t_lo, t_hi = spec.task_count_range
    for app_id in range(spec.app_count):
        n = int(rng.integers(s_lo, s_hi + 1))
        # one parent per non-root stage, drawn from the earlier stages
        parents = [None] + [int(rng.integers(0, i)) for i in range(1, n)]
        counts = rng.integers(t_lo, t_hi + 1, size=n)
        works = _draw_work(spec.task_work_distribution, rng, n) * spec.scale_factor
        stages = tuple(
            StageSpec(
                stage_id=i,
                task_count=int(counts[i]),
                task_work=float(works[i]),
                data_volume=float(works[i] * spec.data_per_work),
                parent_ids=() if parents[i] is None else (parents[i],),
            )
            for i in range(n)
        )
        apps.append(ApplicationDag(app_id, float(arrivals[app_id]), stages))
    return apps


# ---------------------------------------------------------------------------
# trace files


def dag_to_record(dag: ApplicationDag) -> dict:
    return {
        "app_id": dag.app_id,
        "arrival_time": dag.arrival_time,
        "stages": [
            {"id": s.stage_id, "task_count": s.task_count, "task_work": s.task_work,
             "data_volume": s.data_volume, "parents": list(s.parent_ids)}
            for s in dag.stages
        ],
    }


def dumps_trace(dags: Sequence[ApplicationDag]) -> str:
    return "".join(json.dumps(dag_to_record(d)) + "\n" for d in dags)


def save_trace(dags: Sequence[ApplicationDag], path) -> None:
    Path(path).write_text(dumps_trace(dags), encoding="utf-8")


def _as_int(value, what: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise TraceError(f"{what} must be a non-negative integer, got {value!r}")
    return value


def _as_float(value, what: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise TraceError(f"{what} must be a number, got {value!r}")
    return float(value)


def record_to_dag(rec) -> ApplicationDag:
    if not isinstance(rec, dict):
        raise TraceError("record is not a JSON object")
    missing = {"app_id", "arrival_time", "stages"} - rec.keys()
    if missing:
        raise TraceError(f"missing field(s) {sorted(missing)}")
    if not isinstance(rec["stages"], list):
        raise TraceError("stages must be a list")
    stages = []
    for st in rec["stages"]:
        if not isinstance(st, dict):
            raise TraceError("stage is not a JSON object")
        miss = {"id", "task_count", "task_work", "data_volume", "parents"} - st.keys()
        if miss:
            raise TraceError(f"stage missing field(s) {sorted(miss)}")
        if not isinstance(st["parents"], list):
            raise TraceError("parents must be a list")
        stages.append(StageSpec(
            stage_id=_as_int(st["id"], "id"),
            task_count=_as_int(st["task_count"], "task_count"),
            task_work=_as_float(st["task_work"], "task_work"),
            data_volume=_as_float(st["data_volume"], "data_volume"),
            parent_ids=tuple(_as_int(p, "parent id") for p in st["parents"]),
        ))
    return ApplicationDag(
        _as_int(rec["app_id"], "app_id"), _as_float(rec["arrival_time"], "arrival_time"), tuple(stages))


def load_trace(path) -> list[ApplicationDag]:
    """Read and validate a trace file; any bad line rejects the whole file."""
    path = Path(path)
    if not path.is_file():
        raise TraceError(f"trace file not found: {path}")
    dags = []
    ids = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                dag = record_to_dag(json.loads(line))
            except (json.JSONDecodeError, TraceError) as exc:
                raise TraceError(f"{path}:{lineno}: malformed record: {exc}") from None
            problems = validate_dag(dag)
            if problems:
                kind = "cyclic DAG" if any("cycle" in p for p in problems) else "invalid DAG"
                raise TraceError(f"{path}:{lineno}: {kind} (app_id {dag.app_id}): {'; '.join(problems)}")
            if dag.app_id in ids:
                raise TraceError(f"{path}:{lineno}: duplicate app_id {dag.app_id}")
            ids.add(dag.app_id)
            dags.append(dag)
    dags.sort(key=lambda d: (d.arrival_time, d.app_id))
    return dags
