import itertools
import math

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dagsched.baselines import (InstanceTooLarge, HeuristicPolicy, RoundRobin, brute_force_oracle, critical_path,
                                critical_path_lengths, fair_share, round_robin)
from dagsched.simcore import SchedAction, Server, run_episode
from dagsched.trace import ApplicationDag, StageSpec, WorkloadSpec, generate_workload

from conftest import chain_app, fig1_app, observe_arrived, single_app


def permutation_oracle(workload, servers):
    """Independent enumerator: every task order crossed with every executor assignment,
    each task started as early as its executor, parents and arrival allow."""
    tasks = [(a, s.stage_id, i, s.task_work, tuple(s.parent_ids), d.arrival_time)
             for a, d in enumerate(workload) for s in d.stages for i in range(s.task_count)]
    execs = [srv.speed for srv in servers for _ in range(srv.executor_count)]
    best = math.inf
    for order in itertools.permutations(range(len(tasks))):
        pos = {(tasks[t][0], tasks[t][1]): [] for t in order}
        ok = True
        for k, t in enumerate(order):
            a, sid, _, _, parents, _ = tasks[t]
            if any(tasks[u][0] == a and tasks[u][1] in parents and order.index(u) > k for u in range(len(tasks))):
                ok = False
                break
        if not ok:
            continue
        for assign in itertools.product(range(len(execs)), repeat=len(tasks)):
            free = [0.0] * len(execs)
            done = {}
            for t in order:
                a, sid, _, work, parents, arr = tasks[t]
                e = assign[t]
                start = max([free[e], arr] + [done[(a, p)] for p in parents])
                fin = start + work / execs[e]
                free[e] = fin
                done[(a, sid)] = max(done.get((a, sid), 0.0), fin)
            cost = sum(max(v for (a2, _), v in done.items() if a2 == a) - d.arrival_time
                       for a, d in enumerate(workload))
            best = min(best, cost)
    return best


def test_rr_alternates():
    pol = RoundRobin(1)
    apps = [ApplicationDag(a, float(a) * 0.1, (StageSpec(0, 6, 1.0),)) for a in range(2)]
    tr = run_episode(pol, apps, [Server(0, 1.0, 1)])
    seq = [s.action.stage_ref[0] for s in tr.steps]
    assert seq[:6] == [0, 1, 0, 1, 0, 1]


def test_rr_single_app():
    tr = run_episode(RoundRobin(), [chain_app(4)], [Server(0, 1.0, 2)])
    assert {s.action.stage_ref[0] for s in tr.steps} == {0}


def test_rr_fig1_hand_schedule():
    # unit works, two executors: J1 [0,1], J2 J3 [1,2], J4 [2,3], J5 [3,4]
    tr = run_episode(HeuristicPolicy("round_robin").build(), [fig1_app()], [Server(0, 1.0, 2)])
    assert tr.apps[0].completion == 4.0


def test_rr_fairness_window():
    apps = [ApplicationDag(a, 0.0, (StageSpec(0, 12, 1.0 + a),)) for a in range(4)]
    tr = run_episode(RoundRobin(1), apps, [Server(0, 1.0, 2)])
    counts = [0] * 4
    first_done = min(a.completion for a in tr.apps)
    for s in tr.steps:
        if s.time >= first_done:
            break
        counts[s.action.stage_ref[0]] += 1
        assert max(counts) - min(counts) <= 1


def test_fair_share_fewest_holdings():
    a0 = ApplicationDag(0, 0.0, (StageSpec(0, 3, 1.0), StageSpec(1, 1, 1.0)))
    obs = observe_arrived([a0, single_app(app_id=1)], [Server(0, 1.0, 8)], [SchedAction((0, 0), 3)])
    assert obs.holdings == {0: 3, 1: 0}
    assert fair_share(obs).stage_ref == (1, 0)


def test_fair_share_ties_and_ceiling():
    obs = observe_arrived([single_app(app_id=a) for a in (2, 0, 1)], [Server(0, 1.0, 8)])
    act = fair_share(obs)
    assert act.stage_ref == (0, 0) and act.new_limit == 3


def test_cp_prefers_longer_chain():
    obs = observe_arrived([single_app(2.0, app_id=0), chain_app(3, app_id=1)], [Server(0, 1.0, 2)])
    act = critical_path(obs)
    assert act.stage_ref == (1, 0) and act.new_limit == 2


def test_cp_tie_break():
    obs = observe_arrived([single_app(1.0, app_id=1), single_app(1.0, app_id=0)], [Server(0, 1.0, 1)])
    assert critical_path(obs).stage_ref == (0, 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_cp_values_match_longest_path(seed):
    dag = generate_workload(WorkloadSpec(app_count=1, stage_count_range=(5, 5), task_count_range=(1, 4), seed=seed))[0]
    obs = observe_arrived([dag], [Server(0, 2.0, 2), Server(1, 1.0, 3)])
    got = critical_path_lengths(obs.apps[dag.app_id], obs.mean_speed)
    g = nx.DiGraph()
    for s in dag.stages:
        g.add_node(s.stage_id, w=s.task_count * s.task_work / obs.mean_speed)
        for p in s.parent_ids:
            g.add_edge(p, s.stage_id)
    for s in dag.stages:
        best = max(sum(g.nodes[v]["w"] for v in path)
                   for leaf in g.nodes if g.out_degree(leaf) == 0
                   for path in nx.all_simple_paths(g, s.stage_id, leaf)) if g.out_degree(s.stage_id) else g.nodes[s.stage_id]["w"]
        assert got[s.stage_id] == pytest.approx(best, rel=1e-12)


def test_heuristic_validation():
    with pytest.raises(ValueError):
        HeuristicPolicy("lottery")
    with pytest.raises(ValueError):
        HeuristicPolicy("round_robin", limit=0)


def test_stateless_helpers_legal():
    obs = observe_arrived([fig1_app(0), chain_app(2, app_id=1)], [Server(0, 1.0, 3)])
    for f in (round_robin, fair_share, critical_path):
        a = f(obs)
        assert a.stage_ref in obs.schedulable and 1 <= a.new_limit <= obs.max_limit


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["round_robin", "fair_share", "critical_path", "random"]),
       st.one_of(st.none(), st.integers(1, 20)))
def test_heuristics_always_legal(seed, kind, limit):
    w = generate_workload(WorkloadSpec(app_count=6, arrival_rate=1.0, seed=seed))
    servers = [Server(0, 2.0, 2), Server(1, 1.0, 3)]
    pol = HeuristicPolicy(kind, seed=seed % 97, limit=limit).build()
    seen = []

    def checked(obs):
        a = pol(obs)
        seen.append(a.stage_ref in obs.schedulable and 1 <= a.new_limit <= obs.max_limit)
        return a
    run_episode(checked, w, servers)
    assert all(seen)


def test_oracle_single_task():
    cost, sched = brute_force_oracle([single_app(5.0)], [Server(0, 1.0, 1)])
    assert cost == 5.0 and len(sched) == 1 and sched[0].finish == 5.0


def test_oracle_shortest_first():
    dag = ApplicationDag(0, 0.0, (StageSpec(0, 1, 3.0),))
    other = ApplicationDag(1, 0.0, (StageSpec(0, 1, 5.0),))
    cost, _ = brute_force_oracle([dag, other], [Server(0, 1.0, 1)])
    assert cost == 11.0


def test_oracle_fig1_cross_check():
    w, servers = [fig1_app()], [Server(0, 1.0, 2)]
    cost, sched = brute_force_oracle(w, servers)
    assert cost == permutation_oracle(w, servers) == 4.0
    assert len(sched) == 5


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 2), st.booleans())
def test_oracle_matches_permutation_enumerator(seed, n_apps, hetero):
    rng = np.random.default_rng(seed)
    w = generate_workload(WorkloadSpec(app_count=n_apps, arrival_rate=1.0, stage_count_range=(1, 3),
                                       task_count_range=(1, 2), seed=seed,
                                       task_work_distribution={"name": "constant", "value": 1.0}))
    # integer works keep both enumerators on exact arithmetic
    w = [ApplicationDag(d.app_id, round(d.arrival_time, 2), tuple(
        StageSpec(s.stage_id, s.task_count, float(rng.integers(1, 4)), 0.0, s.parent_ids) for s in d.stages))
        for d in w]
    if sum(s.task_count for d in w for s in d.stages) > 5:
        w = w[:1]
    servers = [Server(0, 1.0, 1), Server(1, 2.0, 1)] if hetero else [Server(0, 1.0, 2)]
    cost, sched = brute_force_oracle(w, servers)
    assert cost == pytest.approx(permutation_oracle(w, servers), abs=1e-9)
    # the witness is feasible and achieves the reported cost
    fin = {}
    for r in sched:
        fin[r.app_id] = max(fin.get(r.app_id, 0.0), r.finish)
    assert sum(fin[d.app_id] - d.arrival_time for d in w) == pytest.approx(cost, abs=1e-9)


def test_oracle_refuses_large():
    with pytest.raises(InstanceTooLarge, match="at most 6 stages"):
        brute_force_oracle([chain_app(7)], [Server(0, 1.0, 1)])
    with pytest.raises(InstanceTooLarge):
        brute_force_oracle([single_app()], [Server(0, 1.0, 4)])
