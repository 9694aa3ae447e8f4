"""Event-driven simulation of a heterogeneous executor cluster running DAG
applications.

The cluster is a set of servers, each with a speed (work units per second)
and a fixed number of executors. A task of work ``w`` placed on a server of
speed ``s`` runs for ``w / s`` seconds and is never preempted. Scheduling
happens through :class:`SchedAction` values: pick a schedulable stage and a
parallelism limit for its application; idle executors are then handed to the
stage's unscheduled tasks, fastest server first.
"""
from __future__ import annotations

import csv
import heapq
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from .trace import ApplicationDag


class ContractViolation(ValueError):
    """An action or call broke an operation's precondition."""


class EpisodeAborted(RuntimeError):
    """The decision callback returned an illegal action."""


@dataclass(frozen=True)
class Server:
    server_id: int
    speed: float
    executor_count: int

    def __post_init__(self):
        if not (self.speed > 0 and math.isfinite(self.speed)):
            raise ValueError(f"server {self.server_id}: speed must be positive")
        if self.executor_count < 1:
            raise ValueError(f"server {self.server_id}: executor_count must be >= 1")


@dataclass(frozen=True)
class TaskRun:
    app_id: int
    stage_id: int
    task_index: int
    server_id: int
    start: float
    finish: float
    limit: int = 0  # parallelism limit in force when the task started
    held: int = 0  # executors held by the app right after this start


@dataclass(frozen=True)
class SchedAction:
    stage_ref: tuple[int, int]
    new_limit: int


def total_executors(servers: Sequence[Server]) -> int:
    return sum(s.executor_count for s in servers)


def capacity(servers: Sequence[Server]) -> float:
    """Work units per second the whole cluster can process."""
    return sum(s.speed * s.executor_count for s in servers)


class StageState:
    __slots__ = ("unscheduled", "remaining_tasks", "completed_tasks", "ready_flag",
                 "parents_left", "done_time")

    def __init__(self, task_count: int, n_parents: int):
        self.unscheduled = task_count
        self.remaining_tasks = task_count
        self.completed_tasks = 0
        self.parents_left = n_parents
        self.ready_flag = n_parents == 0
        self.done_time: Optional[float] = None


class AppRuntime:
    """Progress of one arrived application."""

    def __init__(self, dag: ApplicationDag):
        self.dag = dag
        self.children = dag.children()
        self.stage_state = [StageState(s.task_count, len(s.parent_ids)) for s in dag.stages]
        self.stages_left = len(dag.stages)
        self.held = 0
        self.first_start: Optional[float] = None
        self.completion_time: Optional[float] = None
        self.cache: dict = {}  # static per-app data derived by consumers (feature encoders)

    @property
    def app_id(self) -> int:
        return self.dag.app_id

    @property
    def arrival_time(self) -> float:
        return self.dag.arrival_time

    def remaining_work(self) -> float:
        return sum(st.remaining_tasks * s.task_work for s, st in zip(self.dag.stages, self.stage_state))


# event kinds; completions sort ahead of arrivals at equal times
FINISH, ARRIVAL = 0, 1


@dataclass
class ClusterState:
    servers: list[Server]
    max_limit: int
    clock: float = 0.0
    idle_executors: dict[int, int] = field(default_factory=dict)
    running: dict[tuple[int, int, int], TaskRun] = field(default_factory=dict)
    active_apps: dict[int, AppRuntime] = field(default_factory=dict)
    event_queue: list = field(default_factory=list)
    parallelism_limit: dict[int, int] = field(default_factory=dict)
    finished: dict[int, AppRuntime] = field(default_factory=dict)
    runs: list[TaskRun] = field(default_factory=list)
    blocked: set = field(default_factory=set)
    occupancy_area: float = 0.0  # integral of in-system application count over time
    log: Optional[list] = None
    check: bool = False
    violations: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._dispatch_order = sorted(self.servers, key=lambda s: (-s.speed, s.server_id))
        self._speed = {s.server_id: s.speed for s in self.servers}
        self._capacity = {s.server_id: s.executor_count for s in self.servers}

    @property
    def total_executors(self) -> int:
        return sum(self._capacity.values())

    @property
    def idle_count(self) -> int:
        return sum(self.idle_executors.values())

    def in_system(self) -> int:
        return len(self.active_apps)

    def next_event_time(self) -> Optional[float]:
        return self.event_queue[0][0] if self.event_queue else None

    def _check_conservation(self):
        busy: dict[int, int] = {sid: 0 for sid in self._capacity}
        for run in self.running.values():
            busy[run.server_id] += 1
        for sid, cap in self._capacity.items():
            if self.idle_executors[sid] + busy[sid] != cap or self.idle_executors[sid] < 0:
                self.violations.append(
                    f"t={self.clock}: server {sid} idle {self.idle_executors[sid]} + busy {busy[sid]} != {cap}")


def init_cluster(servers: Sequence[Server], max_limit: Optional[int] = None,
                 *, check: bool = False, record_events: bool = False) -> ClusterState:
    """Fresh cluster at clock 0 with every executor idle.

    `max_limit` bounds the parallelism limit an action may request; it
    defaults to the total executor count.
    """
    servers = list(servers)
    if not servers:
        raise ContractViolation("a cluster needs at least one server")
    if len({s.server_id for s in servers}) != len(servers):
        raise ContractViolation("duplicate server_id")
    if max_limit is None:
        max_limit = total_executors(servers)
    if max_limit < 1:
        raise ContractViolation("max_limit must be >= 1")
    state = ClusterState(servers=servers, max_limit=int(max_limit), check=check,
                         log=[] if record_events else None)
    state.idle_executors = {s.server_id: s.executor_count for s in servers}
    return state


def submit(state: ClusterState, workload: Iterable[ApplicationDag]) -> ClusterState:
    """Queue application arrivals."""
    for dag in workload:
        if dag.arrival_time < state.clock:
            raise ContractViolation(f"app {dag.app_id} arrives in the past")
        heapq.heappush(state.event_queue, (dag.arrival_time, ARRIVAL, dag.app_id, -1, -1, dag))
    return state


def schedulable_set(state: ClusterState) -> list[tuple[int, int]]:
    """Ready stages with unscheduled tasks, ordered by (app_id, stage_id)."""
    out = []
    for app_id in sorted(state.active_apps):
        app = state.active_apps[app_id]
        for sid, st in enumerate(app.stage_state):
            if st.ready_flag and st.unscheduled > 0:
                out.append((app_id, sid))
    return out


def apply_action(state: ClusterState, action: SchedAction) -> ClusterState:
    """Set the app's parallelism limit and start tasks of the chosen stage.

    The number of tasks started is the minimum of the idle executors, the
    stage's unscheduled tasks and the headroom ``new_limit - held``. A
    stage that receives nothing is blocked until the next event so that a
    decision loop at a fixed instant always terminates.
    """
    app_id, stage_id = action.stage_ref
    app = state.active_apps.get(app_id)
    if app is None or not (0 <= stage_id < len(app.stage_state)):
        raise ContractViolation(f"stage {action.stage_ref} is not schedulable")
    st = app.stage_state[stage_id]
    if not (st.ready_flag and st.unscheduled > 0):
        raise ContractViolation(f"stage {action.stage_ref} is not schedulable")
    limit = action.new_limit
    if isinstance(limit, bool) or int(limit) != limit or not (1 <= limit <= state.max_limit):
        raise ContractViolation(f"limit {limit!r} outside [1, {state.max_limit}]")
    limit = int(limit)
    state.parallelism_limit[app_id] = limit

    n = min(state.idle_count, st.unscheduled, limit - app.held)
    if n <= 0:
        state.blocked.add(action.stage_ref)
        return state
    work = app.dag.stages[stage_id].task_work
    task_count = app.dag.stages[stage_id].task_count
    for server in state._dispatch_order:
        sid = server.server_id
        while n > 0 and state.idle_executors[sid] > 0:
            index = task_count - st.unscheduled
            st.unscheduled -= 1
            state.idle_executors[sid] -= 1
            app.held += 1
            n -= 1
            run = TaskRun(app_id, stage_id, index, sid, state.clock,
                          state.clock + work / server.speed, limit, app.held)
            state.running[(app_id, stage_id, index)] = run
            state.runs.append(run)
            heapq.heappush(state.event_queue, (run.finish, FINISH, app_id, stage_id, index, sid))
            if app.first_start is None:
                app.first_start = state.clock
            if state.log is not None:
                state.log.append({"time": state.clock, "kind": "start", "app_id": app_id,
                                  "stage_id": stage_id, "task_index": index, "server_id": sid})
        if n == 0:
            break
    if not st.unscheduled:
        state.blocked.discard(action.stage_ref)
    if state.check:
        state._check_conservation()
    return state


def _move_clock(state: ClusterState, t: float) -> None:
    if t < state.clock:
        state.violations.append(f"clock moved backwards {state.clock} -> {t}")
        raise RuntimeError(f"event at {t} precedes clock {state.clock}")
    state.occupancy_area += (t - state.clock) * len(state.active_apps)
    state.clock = t


def advance(state: ClusterState, workload: Iterable[ApplicationDag] = ()) -> tuple[ClusterState, list[dict]]:
    """Process the earliest pending event; returns ``(state, [])`` once drained."""
    if workload:
        submit(state, workload)
    if not state.event_queue:
        return state, []
    item = heapq.heappop(state.event_queue)
    t, kind, app_id, stage_id, index = item[:5]
    _move_clock(state, t)
    state.blocked.clear()
    if kind == FINISH:
        sid = item[5]
        run = state.running.pop((app_id, stage_id, index))
        state.idle_executors[sid] += 1
        app = state.active_apps[app_id]
        app.held -= 1
        st = app.stage_state[stage_id]
        st.remaining_tasks -= 1
        st.completed_tasks += 1
        event = {"time": t, "kind": "finish", "app_id": app_id, "stage_id": stage_id,
                 "task_index": index, "server_id": run.server_id}
        if st.remaining_tasks == 0:
            st.done_time = t
            app.stages_left -= 1
            for c in app.children[stage_id]:
                cst = app.stage_state[c]
                cst.parents_left -= 1
                if cst.parents_left == 0:
                    cst.ready_flag = True
            if app.stages_left == 0:
                app.completion_time = t
                del state.active_apps[app_id]
                state.parallelism_limit.pop(app_id, None)
                state.finished[app_id] = app
                event["app_done"] = True
    else:
        dag = item[5]
        state.active_apps[app_id] = AppRuntime(dag)
        state.parallelism_limit[app_id] = state.max_limit
        event = {"time": t, "kind": "arrival", "app_id": app_id}
    if state.log is not None:
        state.log.append(event)
    if state.check:
        state._check_conservation()
    return state, [event]


def advance_instant(state: ClusterState) -> list[dict]:
    """Process every event sharing the earliest timestamp."""
    t = state.next_event_time()
    if t is None:
        return []
    events = []
    while state.event_queue and state.event_queue[0][0] == t:
        events.extend(advance(state)[1])
    return events


def compute_reward(prev_clock: float, new_clock: float, state: ClusterState) -> float:
    """Negative application-seconds spent in the system over the interval."""
    if new_clock < prev_clock:
        raise ContractViolation("new_clock precedes prev_clock")
    return -(new_clock - prev_clock) * state.in_system()


# ---------------------------------------------------------------------------
# episodes


@dataclass
class Observation:
    """Read-only view of the cluster at a decision instant.

    ``apps`` references live runtime objects; the view is valid only until
    the next state transition.
    """

    clock: float
    schedulable: list[tuple[int, int]]
    holdings: dict[int, int]
    limits: dict[int, int]
    idle_executors: int
    total_executors: int
    max_limit: int
    apps: dict[int, AppRuntime]
    mean_speed: float


def observe(state: ClusterState) -> Observation:
    sched = [ref for ref in schedulable_set(state) if ref not in state.blocked]
    caps = state._capacity
    return Observation(
        clock=state.clock,
        schedulable=sched,
        holdings={a: app.held for a, app in state.active_apps.items()},
        limits=dict(state.parallelism_limit),
        idle_executors=state.idle_count,
        total_executors=state.total_executors,
        max_limit=state.max_limit,
        apps=state.active_apps,
        mean_speed=sum(state._speed[s] * caps[s] for s in caps) / state.total_executors,
    )


def needs_decision(state: ClusterState) -> bool:
    if state.idle_count == 0:
        return False
    for app in state.active_apps.values():
        for sid, st in enumerate(app.stage_state):
            if st.ready_flag and st.unscheduled > 0 and (app.app_id, sid) not in state.blocked:
                return True
    return False


@dataclass(frozen=True)
class Step:
    time: float
    schedulable: tuple[tuple[int, int], ...]
    idle: int
    action: SchedAction
    assigned: int
    reward: float


@dataclass(frozen=True)
class AppRecord:
    app_id: int
    arrival: float
    completion: Optional[float]

    @property
    def jct(self) -> Optional[float]:
        return None if self.completion is None else self.completion - self.arrival


@dataclass
class EpisodeTrace:
    steps: list[Step]
    runs: list[TaskRun]
    apps: list[AppRecord]
    end_time: float
    servers: list[Server]
    initial_reward: float = 0.0
    events: Optional[list] = None
    violations: list[str] = field(default_factory=list)

    @property
    def rewards(self) -> list[float]:
        return [s.reward for s in self.steps]

    @property
    def total_reward(self) -> float:
        return self.initial_reward + math.fsum(self.rewards)

    @property
    def finished(self) -> list[AppRecord]:
        return [a for a in self.apps if a.completion is not None]


Policy = Callable[[Observation], SchedAction]


def _legal(action, obs: Observation) -> Optional[str]:
    if not isinstance(action, SchedAction):
        return f"callback returned {type(action).__name__}, not SchedAction"
    if tuple(action.stage_ref) not in obs.schedulable:
        return f"stage {action.stage_ref} not in schedulable set {obs.schedulable}"
    lim = action.new_limit
    if isinstance(lim, bool) or int(lim) != lim or not (1 <= lim <= obs.max_limit):
        return f"limit {lim!r} outside [1, {obs.max_limit}]"
    return None


class Episode:
    """Step-wise episode driver.

    ``next_decision()`` runs the clock forward until a decision is needed and
    returns the observation, or ``None`` once the episode is over;
    ``act(action)`` applies the decision. :func:`run_episode` wraps the loop
    around a callback; trainers that batch several episodes drive it
    directly.
    """

    def __init__(self, workload: Sequence[ApplicationDag], servers: Sequence[Server], *,
                 horizon: Optional[float] = None, max_actions: Optional[int] = None,
                 max_limit: Optional[int] = None, record_events: bool = False, check: bool = False):
        if horizon is not None and not horizon > 0:
            raise ContractViolation("horizon must be positive")
        if max_actions is not None and max_actions < 1:
            raise ContractViolation("max_actions must be positive")
        self.state = init_cluster(servers, max_limit, check=check, record_events=record_events)
        self.workload = list(workload)
        submit(self.state, self.workload)
        self.horizon = horizon
        self.max_actions = max_actions
        self.steps: list[Step] = []
        self._pending: Optional[tuple] = None
        self._mark = 0.0
        self.initial_reward = 0.0
        self.done = False

    def next_decision(self) -> Optional[Observation]:
        state = self.state
        while not self.done:
            if needs_decision(state):
                if self.max_actions is not None and len(self.steps) + (self._pending is not None) >= self.max_actions:
                    self._finish()
                    break
                return observe(state)
            t = state.next_event_time()
            if t is None:
                self._finish()
                break
            if self.horizon is not None and t > self.horizon:
                _move_clock(state, self.horizon)
                self._finish()
                break
            advance_instant(state)
        return None

    def _close_step(self):
        reward = -(self.state.occupancy_area - self._mark)
        self._mark = self.state.occupancy_area
        if self._pending is None:
            self.initial_reward += reward
        else:
            self.steps.append(Step(*self._pending, reward))
            self._pending = None

    def act(self, action: SchedAction, obs: Observation) -> int:
        problem = _legal(action, obs)
        if problem:
            raise EpisodeAborted(f"t={obs.clock}: illegal action: {problem}")
        self._close_step()
        before = len(self.state.runs)
        apply_action(self.state, action)
        assigned = len(self.state.runs) - before
        self._pending = (obs.clock, tuple(obs.schedulable), obs.idle_executors, action, assigned)
        return assigned

    def _finish(self):
        self._close_step()
        self.done = True

    def trace(self) -> EpisodeTrace:
        state = self.state
        records = []
        for dag in sorted(self.workload, key=lambda d: d.app_id):
            if dag.arrival_time > state.clock:
                continue
            app = state.finished.get(dag.app_id)
            records.append(AppRecord(dag.app_id, dag.arrival_time, None if app is None else app.completion_time))
        return EpisodeTrace(
            steps=list(self.steps), runs=list(state.runs), apps=records, end_time=state.clock,
            servers=list(state.servers), initial_reward=self.initial_reward,
            events=None if state.log is None else list(state.log), violations=list(state.violations))


def run_episode(policy: Policy, workload: Sequence[ApplicationDag], servers: Sequence[Server], *,
                horizon: Optional[float] = None, max_actions: Optional[int] = None,
                max_limit: Optional[int] = None, record_events: bool = False,
                check: bool = False) -> EpisodeTrace:
    """Simulate `workload` on `servers`, asking `policy` at every decision instant.

    A decision instant is any moment with an idle executor and a schedulable
    stage that has not been blocked at that instant. The episode ends when
    the system drains, the clock would pass `horizon`, or a further decision
    is needed after `max_actions` actions.
    """
    ep = Episode(workload, servers, horizon=horizon, max_actions=max_actions, max_limit=max_limit,
                 record_events=record_events, check=check)
    while (obs := ep.next_decision()) is not None:
        ep.act(policy(obs), obs)
    return ep.trace()


# ---------------------------------------------------------------------------
# metrics and exports


def busy_time(runs: Iterable[TaskRun], lo: float, hi: float) -> float:
    return math.fsum(max(0.0, min(r.finish, hi) - max(r.start, lo)) for r in runs)


def metrics(trace: EpisodeTrace, cluster: Sequence[Server]) -> dict:
    """Average completion time, executor utilization and per-app rows."""
    rows = [{"app_id": a.app_id, "arrival": a.arrival, "completion": a.completion, "jct": a.jct}
            for a in sorted(trace.apps, key=lambda a: a.app_id)]
    done = [r["jct"] for r in rows if r["jct"] is not None]
    start = min((a.arrival for a in trace.apps), default=0.0)
    span = trace.end_time - start
    util = None
    if span > 0:
        util = busy_time(trace.runs, start, trace.end_time) / (total_executors(cluster) * span)
    return {
        "avg_completion": math.fsum(done) / len(done) if done else None,
        "count": len(done),
        "unfinished": len(rows) - len(done),
        "utilization": util,
        "per_app": rows,
    }


def jct_csv(trace: EpisodeTrace, cluster: Sequence[Server]) -> str:
    m = metrics(trace, cluster)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["app_id", "arrival", "completion", "jct"])
    for r in m["per_app"]:
        w.writerow([r["app_id"], repr(r["arrival"]),
                    "" if r["completion"] is None else repr(r["completion"]),
                    "" if r["jct"] is None else repr(r["jct"])])
    avg = "" if m["avg_completion"] is None else repr(m["avg_completion"])
    util = "" if m["utilization"] is None else repr(m["utilization"])
    buf.write(f"# summary: mean_jct={avg},utilization={util},finished={m['count']},unfinished={m['unfinished']}\n")
    return buf.getvalue()


def event_log_lines(trace: EpisodeTrace) -> str:
    if trace.events is None:
        raise ValueError("episode was run without record_events=True")
    return "".join(json.dumps(e, sort_keys=True) + "\n" for e in trace.events)


def audit_trace(trace: EpisodeTrace, workload: Sequence[ApplicationDag]) -> list[str]:
    """Recheck the scheduling constraints on a finished trace.

    Covers executor capacity per server (sweep over start/finish points),
    dependencies, arrival and executor-release start limits, the
    parallelism cap at every task start, and the reward identity.
    """
    problems = list(trace.violations)
    dags = {d.app_id: d for d in workload}
    caps = {s.server_id: s.executor_count for s in trace.servers}
    speeds = {s.server_id: s.speed for s in trace.servers}

    # capacity sweep: finishes release before starts at the same instant
    points = []
    for r in trace.runs:
        points.append((r.start, 1, r.server_id))
        points.append((r.finish, -1, r.server_id))
    points.sort(key=lambda p: (p[0], p[1]))
    load = {sid: 0 for sid in caps}
    for t, delta, sid in points:
        load[sid] += delta
        if load[sid] > caps[sid]:
            problems.append(f"t={t}: server {sid} runs {load[sid]} tasks on {caps[sid]} executors")

    # per-executor release: on each server, starts can be matched to free executors
    stage_done: dict[tuple[int, int], float] = {}
    stage_count: dict[tuple[int, int], int] = {}
    for r in trace.runs:
        key = (r.app_id, r.stage_id)
        stage_done[key] = max(stage_done.get(key, -math.inf), r.finish)
        stage_count[key] = stage_count.get(key, 0) + 1
    held_events = {}
    for r in trace.runs:
        dag = dags[r.app_id]
        stage = dag.stages[r.stage_id]
        if abs((r.finish - r.start) - stage.task_work / speeds[r.server_id]) > 1e-9 * max(1.0, r.finish):
            problems.append(f"run {r}: duration differs from work/speed")
        if r.start < dag.arrival_time:
            problems.append(f"run {r}: starts before arrival {dag.arrival_time}")
        for p in stage.parent_ids:
            pk = (r.app_id, p)
            if stage_count.get(pk, 0) < dag.stages[p].task_count or stage_done[pk] > r.start:
                problems.append(f"run {r}: parent stage {p} not complete at start")
        if r.held > r.limit:
            problems.append(f"run {r}: app holds {r.held} executors above limit {r.limit}")
        held_events.setdefault(r.app_id, []).append(r)
    # held count recomputed independently of the simulator's bookkeeping
    for app_id, runs in held_events.items():
        # runs are in assignment order; a start only sees starts made before it
        for i, r in enumerate(runs):
            held = sum(1 for j, q in enumerate(runs)
                       if q.start <= r.start < q.finish and (q.start < r.start or j <= i))
            if held > r.limit:
                problems.append(f"run {r}: independent count {held} exceeds limit {r.limit}")

    times = [s.time for s in trace.steps]
    if any(b < a for a, b in zip(times, times[1:])):
        problems.append("decision times decrease")

    residence = math.fsum(
        (a.completion if a.completion is not None else trace.end_time) - a.arrival for a in trace.apps)
    total = trace.total_reward
    if abs(total + residence) > 1e-9 * max(1.0, residence):
        problems.append(f"reward identity: sum r = {total}, residence = {residence}")
    return problems
