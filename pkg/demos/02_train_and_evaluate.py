"""Train a small learned scheduler and evaluate it against round robin.

A short run (a few minutes on one core); the report columns show how mean
return, completion time and policy entropy move across iterations.
"""
import sys

import numpy as np

from dagsched.agent import LearnedPolicy
from dagsched.baselines import HeuristicPolicy
from dagsched.gnn import FeatureScaler
from dagsched.simcore import Server, capacity, metrics, run_episode
from dagsched.trace import WorkloadSpec, generate_workload
from dagsched.train import TrainConfig, iteration_workloads, train

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 60
servers = [Server(0, 2.0, 4), Server(1, 1.0, 8)]
spec = WorkloadSpec(app_count=20).with_load(0.4, capacity(servers))
scaler = FeatureScaler.for_workload(spec, servers)


def on_iteration(state, report):
    if state.iteration % 10 == 0:
        _, ret, jct, ent, gnorm = report.rows[-1][:5]
        print(f"iter {state.iteration:4d}  return {ret:8.2f}  jct {jct:6.2f}  entropy {ent:5.2f}  |g| {gnorm:.3g}")


cfg = TrainConfig(iterations=iterations, num_agents=4, seed=0)
state, report = train(cfg, iteration_workloads(spec, cfg.seed), servers, scaler=scaler, callback=on_iteration)

# held-out traces, never seen in training
evals = [generate_workload(WorkloadSpec(**{**spec.__dict__, "seed": 1000 + s})) for s in range(5)]


def mean_jct(make):
    return np.mean([metrics(run_episode(make(), w, servers), servers)["avg_completion"] for w in evals])


rr = mean_jct(lambda: HeuristicPolicy("round_robin").build())
learned = mean_jct(lambda: LearnedPolicy(state.params, "greedy"))
print(f"round robin {rr:.3f} s, learned {learned:.3f} s, ratio {learned / rr:.3f}")
