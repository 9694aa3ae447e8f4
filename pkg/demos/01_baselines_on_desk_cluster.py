"""Compare the heuristic schedulers on a small two-server cluster.

Generates a 20-app synthetic workload at 40% load, runs each baseline on it
and prints mean completion time and executor utilization.
"""
from dagsched.baselines import HeuristicPolicy
from dagsched.simcore import Server, capacity, metrics, run_episode
from dagsched.trace import WorkloadSpec, generate_workload

servers = [Server(0, 2.0, 4), Server(1, 1.0, 8)]
spec = WorkloadSpec(app_count=20, seed=3).with_load(0.4, capacity(servers))
workload = generate_workload(spec)
print(f"{len(workload)} apps, arrival rate {spec.arrival_rate:.3f}/s, "
      f"total work {sum(d.total_work for d in workload):.1f}")

for kind in ("round_robin", "fair_share", "critical_path", "random"):
    m = metrics(run_episode(HeuristicPolicy(kind, seed=0).build(), workload, servers), servers)
    print(f"{kind:14s} mean JCT {m['avg_completion']:7.3f} s   utilization {m['utilization']:.3f}")
