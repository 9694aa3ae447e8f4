"""Learned DAG scheduling for a simulated stream-processing cluster."""
from .trace import (ApplicationDag, StageSpec, TraceError, WorkloadSpec, calibrate_arrival_rate,
                    generate_workload, load_trace, save_trace, validate_dag)
from .simcore import (ClusterState, EpisodeTrace, Observation, SchedAction, Server, TaskRun,
                      init_cluster, metrics, run_episode)

__version__ = "0.1.0"
