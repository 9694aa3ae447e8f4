"""Reference schedulers and an exhaustive optimum for tiny instances."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .simcore import Observation, SchedAction, Server, TaskRun
from .trace import ApplicationDag

KINDS = ("round_robin", "fair_share", "critical_path", "random")


def _clamp(limit: int, obs: Observation) -> int:
    return max(1, min(int(limit), obs.max_limit))


def _first_stage(obs: Observation, app_id: int) -> tuple[int, int]:
    return min(ref for ref in obs.schedulable if ref[0] == app_id)


class RoundRobin:
    """Serve applications in turn, in arrival order, each time taking the
    app's lowest-id schedulable stage at a fixed limit."""

    def __init__(self, limit: Optional[int] = None):
        self.limit = limit
        self._last = None

    def __call__(self, obs: Observation) -> SchedAction:
        keys = sorted({(obs.apps[a].arrival_time, a) for a, _ in obs.schedulable})
        nxt = keys[0]
        if self._last is not None:
            later = [k for k in keys if k > self._last]
            if later:
                nxt = later[0]
        self._last = nxt
        return SchedAction(_first_stage(obs, nxt[1]), _clamp(self.limit or obs.max_limit, obs))


class FairShare:
    """Favour the application holding the fewest executors; cap every
    application at an equal share of the cluster."""

    def __init__(self, limit: Optional[int] = None):
        self.limit = limit

    def __call__(self, obs: Observation) -> SchedAction:
        app_id = min({a for a, _ in obs.schedulable}, key=lambda a: (obs.holdings[a], a))
        share = math.ceil(obs.total_executors / max(len(obs.apps), 1))
        return SchedAction(_first_stage(obs, app_id), _clamp(self.limit or share, obs))


def critical_path_lengths(app, mean_speed: float) -> list[float]:
    """Longest remaining-work path from each stage down to a leaf, in seconds at `mean_speed`."""
    dag = app.dag
    n = len(dag.stages)
    kids = app.children
    cp = [0.0] * n
    for sid in reversed(dag.topological_order()):
        st = app.stage_state[sid]
        own = st.remaining_tasks * dag.stages[sid].task_work / mean_speed
        cp[sid] = own + max((cp[c] for c in kids[sid]), default=0.0)
    return cp


class CriticalPath:
    """Pick the schedulable stage heading the longest remaining path."""

    def __init__(self, limit: Optional[int] = None):
        self.limit = limit

    def __call__(self, obs: Observation) -> SchedAction:
        best, best_ref = -1.0, None
        cache = {}
        for ref in obs.schedulable:
            a, s = ref
            if a not in cache:
                cache[a] = critical_path_lengths(obs.apps[a], obs.mean_speed)
            v = cache[a][s]
            if v > best:  # strict: earlier (app_id, stage_id) wins ties
                best, best_ref = v, ref
        return SchedAction(best_ref, _clamp(self.limit or obs.max_limit, obs))


class RandomPolicy:
    def __init__(self, seed: int = 0, limit: Optional[int] = None):
        self.rng = np.random.default_rng(seed)
        self.limit = limit

    def __call__(self, obs: Observation) -> SchedAction:
        ref = obs.schedulable[int(self.rng.integers(len(obs.schedulable)))]
        return SchedAction(ref, _clamp(self.limit or obs.max_limit, obs))


@dataclass(frozen=True)
class HeuristicPolicy:
    kind: str
    seed: int = 0
    limit: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown heuristic {self.kind!r}; expected one of {KINDS}")
        if self.limit is not None and self.limit < 1:
            raise ValueError("limit must be >= 1")

    def build(self):
        """Fresh callback; round robin and random carry per-episode state."""
        if self.kind == "round_robin":
            return RoundRobin(self.limit)
        if self.kind == "fair_share":
            return FairShare(self.limit)
        if self.kind == "critical_path":
            return CriticalPath(self.limit)
        return RandomPolicy(self.seed, self.limit)


def round_robin(obs: Observation) -> SchedAction:
    """Stateless single call: the first app in arrival order."""
    return RoundRobin()(obs)


def fair_share(obs: Observation) -> SchedAction:
    return FairShare()(obs)


def critical_path(obs: Observation) -> SchedAction:
    return CriticalPath()(obs)


# ---------------------------------------------------------------------------
# exhaustive optimum

MAX_STAGES = 6
MAX_TASKS = 8
MAX_EXECUTORS = 3


class InstanceTooLarge(ValueError):
    pass


def brute_force_oracle(workload: Sequence[ApplicationDag], servers: Sequence[Server]) -> tuple[float, list[TaskRun]]:
    """Minimum total completion time ``sum(C_j - A_j)`` over all non-preemptive
    schedules, with one optimal schedule.

    Every feasible schedule can be shifted left into one where each task
    starts as soon as its executor is free, its parent stages are done and
    its application has arrived, without raising any completion time. The
    search places tasks one at a time in start order onto an executor,
    which enumerates exactly those schedules; interchangeable executors
    and sibling tasks are tried once, and partial costs prune the tree.
    """
    n_stages = sum(len(d.stages) for d in workload)
    n_tasks = sum(s.task_count for d in workload for s in d.stages)
    n_exec = sum(s.executor_count for s in servers)
    if n_stages > MAX_STAGES or n_tasks > MAX_TASKS or n_exec > MAX_EXECUTORS:
        raise InstanceTooLarge(
            f"oracle handles at most {MAX_STAGES} stages, {MAX_TASKS} tasks and {MAX_EXECUTORS} executors "
            f"(got {n_stages}, {n_tasks}, {n_exec})")

    stages = []  # (app index, stage_id, work, parent stage indices, task_count)
    app_index = {}
    for a, dag in enumerate(workload):
        app_index[dag.app_id] = a
        base = len(stages)
        for s in dag.stages:
            stages.append((a, s.stage_id, s.task_work, [base + p for p in s.parent_ids], s.task_count))
    arrivals = [d.arrival_time for d in workload]
    executors = [(srv.server_id, srv.speed) for srv in servers for _ in range(srv.executor_count)]

    placed = [0] * len(stages)  # tasks placed per stage
    stage_finish = [-math.inf] * len(stages)  # latest finish among placed tasks
    free = [0.0] * len(executors)
    app_done = [0.0] * len(workload)  # latest finish per app so far (0 before any task)
    best = [math.inf, None]
    chosen: list[tuple] = []

    def partial_cost():
        return sum(max(app_done[a], arrivals[a]) - arrivals[a] for a in range(len(workload)))

    def dfs(remaining):
        cost = partial_cost()
        if cost >= best[0] - 1e-12:
            return
        if remaining == 0:
            best[0] = cost
            best[1] = list(chosen)
            return
        for k, (a, sid, work, parents, count) in enumerate(stages):
            if placed[k] == count or any(placed[p] < stages[p][4] for p in parents):
                continue
            ready = max([arrivals[a]] + [stage_finish[p] for p in parents])
            tried = set()
            for e, (server_id, speed) in enumerate(executors):
                key = (server_id, free[e])
                if key in tried:
                    continue
                tried.add(key)
                start = max(free[e], ready)
                finish = start + work / speed
                saved = (free[e], stage_finish[k], app_done[a])
                free[e] = finish
                stage_finish[k] = max(stage_finish[k], finish)
                app_done[a] = max(app_done[a], finish)
                placed[k] += 1
                chosen.append((k, placed[k] - 1, server_id, start, finish))
                dfs(remaining - 1)
                chosen.pop()
                placed[k] -= 1
                free[e], stage_finish[k], app_done[a] = saved

    dfs(n_tasks)
    schedule = [
        TaskRun(workload[stages[k][0]].app_id, stages[k][1], idx, sid, start, finish)
        for k, idx, sid, start, finish in best[1]
    ]
    schedule.sort(key=lambda r: (r.start, r.app_id, r.stage_id, r.task_index))
    return best[0], schedule
