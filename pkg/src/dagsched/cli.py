"""Command line: generate traces, train, evaluate and compare schedulers.

Every command reads one YAML (or JSON) run config, applies flag
overrides, validates everything and only then writes files. Exit codes:
0 success, 1 invalid config or inputs, 2 failure while running.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from .agent import LearnedPolicy, PolicyParameters
from .baselines import HeuristicPolicy
from .gnn import FeatureScaler
from .simcore import Server, capacity, metrics, run_episode, total_executors
from .trace import ApplicationDag, TraceError, WorkloadSpec, generate_workload, load_trace, save_trace
from .train import TrainConfig, TrainingDiverged, TrainState, init_state, iteration_workloads, train

SCHEDULERS = {"learned": None, "rr": "round_robin", "fair": "fair_share", "cp": "critical_path", "random": "random"}
WLD_LEVELS = (0.2, 0.4, 0.6, 0.8)
DEFAULT_APP_COUNT = 1000
DESK_CLUSTER = ({"server_id": 0, "speed": 2.0, "executors": 4}, {"server_id": 1, "speed": 1.0, "executors": 8})


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    seeds: Optional[list] = None  # None: the run seed only
    scheduler: str = "rr"
    checkpoint: Optional[str] = None
    limit: Optional[int] = None  # fixed limit for heuristics
    schedulers: Optional[tuple] = None  # None: every heuristic, plus learned with a checkpoint


@dataclass
class RunConfig:
    servers: list
    workload: Optional[WorkloadSpec]
    trace: Optional[str]
    train: TrainConfig
    eval: EvalConfig
    out: str = "out"
    seed: int = 0
    max_limit: Optional[int] = None
    calibrate: bool = True  # derive the arrival rate from target_load

    def workload_for(self, seed: int) -> list[ApplicationDag]:
        if self.trace is not None:
            return load_trace(self.trace)
        return generate_workload(dataclasses.replace(self.workload, seed=seed))

    def scaler(self) -> FeatureScaler:
        if self.trace is not None:
            return FeatureScaler.from_dags(load_trace(self.trace), self.servers)
        return FeatureScaler.for_workload(self.workload, self.servers)


# ---------------------------------------------------------------------------
# config loading

_WORKLOAD_KEYS = {f.name for f in dataclasses.fields(WorkloadSpec)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
_EVAL_KEYS = {f.name for f in dataclasses.fields(EvalConfig)}
# short names for the tuning-table knobs
_ALIASES = {"Hd": "hidden", "alpha": "lr_actor", "beta": "lr_critic", "agents": "num_agents", "lambda": "gae_lambda"}


def _section(raw: dict, key: str) -> dict:
    d = raw.get(key) or {}
    if not isinstance(d, dict):
        raise ConfigError(f"{key}: expected a mapping")
    return d


def _unknown(d: dict, allowed: set, where: str):
    bad = sorted(set(d) - allowed)
    if bad:
        raise ConfigError(f"{where}: unknown keys {bad}")


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: cannot parse: {exc}") from None
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return raw


def build_config(raw: dict, args: argparse.Namespace) -> RunConfig:
    """Merge file contents with flag overrides and validate the result."""
    _unknown(raw, {"cluster", "workload", "trace", "train", "eval", "out", "seed"}, "config")
    cluster = _section(raw, "cluster")
    _unknown(cluster, {"servers", "max_limit"}, "cluster")
    try:
        servers = [Server(int(s["server_id"]), float(s["speed"]), int(s["executors"]))
                   for s in cluster.get("servers", DESK_CLUSTER)]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"cluster.servers: {exc}") from None
    if not servers or len({s.server_id for s in servers}) != len(servers):
        raise ConfigError("cluster.servers: need at least one server with unique server_id")

    seed = raw.get("seed", 0) if args.seed is None else args.seed
    if not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed!r}")

    trace_path = raw.get("trace")
    wl_raw = raw.get("workload")
    if trace_path is not None and wl_raw is not None:
        raise ConfigError("give either workload or trace, not both")
    workload = None
    calibrate = True
    if trace_path is not None:
        if not Path(trace_path).is_file():
            raise ConfigError(f"trace file not found: {trace_path}")
        if args.workload is not None:
            raise ConfigError("--workload needs a workload spec, not a trace file")
    else:
        wl = dict(wl_raw or {})
        _unknown(wl, _WORKLOAD_KEYS, "workload")
        calibrate = "arrival_rate" not in wl
        for key in ("stage_count_range", "task_count_range"):
            if key in wl:
                wl[key] = tuple(wl[key])
        wl.setdefault("seed", seed)
        wl.setdefault("app_count", DEFAULT_APP_COUNT)
        try:
            workload = WorkloadSpec(**wl)
            if args.workload is not None:
                workload = dataclasses.replace(workload, target_load=args.workload)
                calibrate = True
            if calibrate:
                workload = workload.with_load(workload.target_load, capacity(servers))
            workload.validate()
        except (TraceError, TypeError, ValueError) as exc:
            raise ConfigError(f"workload: {exc}") from None

    tr = {_ALIASES.get(k, k): v for k, v in _section(raw, "train").items()}
    _unknown(tr, _TRAIN_KEYS, "train")
    if "hidden" in tr:
        tr["hidden"] = tuple(tr["hidden"])
    tr.setdefault("seed", seed)
    if args.seed is not None:
        tr["seed"] = args.seed
    if args.iterations is not None:
        tr["iterations"] = args.iterations
    if args.agents is not None:
        tr["num_agents"] = args.agents
    try:
        tcfg = TrainConfig(**tr).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None

    ev = dict(_section(raw, "eval"))
    _unknown(ev, _EVAL_KEYS, "eval")
    if "schedulers" in ev:
        ev["schedulers"] = tuple(ev["schedulers"])
    ecfg = EvalConfig(**ev)
    if getattr(args, "scheduler", None):
        ecfg.scheduler = args.scheduler[0]
        ecfg.schedulers = tuple(args.scheduler)
    if args.checkpoint is not None:
        ecfg.checkpoint = args.checkpoint
    if ecfg.schedulers is None:
        ecfg.schedulers = (("learned",) if ecfg.checkpoint else ()) + ("rr", "fair", "cp", "random")
    if ecfg.seeds is None:
        ecfg.seeds = [seed]
    if not ecfg.seeds or any(not isinstance(s, int) or s < 0 for s in ecfg.seeds):
        raise ConfigError("eval.seeds must be a non-empty list of non-negative integers")
    for name in (ecfg.scheduler, *ecfg.schedulers):
        if name not in SCHEDULERS:
            raise ConfigError(f"unknown scheduler {name!r}; choose from {sorted(SCHEDULERS)}")
    if ecfg.limit is not None and (not isinstance(ecfg.limit, int) or ecfg.limit < 1):
        raise ConfigError("eval.limit must be a positive integer")

    max_limit = cluster.get("max_limit")
    if max_limit is not None and (not isinstance(max_limit, int) or max_limit < 1):
        raise ConfigError("cluster.max_limit must be a positive integer")
    out = args.out if args.out is not None else raw.get("out", "out")
    return RunConfig(servers=servers, workload=workload, trace=trace_path, train=tcfg, eval=ecfg,
                     out=str(out), seed=seed, max_limit=max_limit, calibrate=calibrate)


def _check_writable(out: str):
    p = Path(out).resolve()
    while not p.exists():
        p = p.parent
    if not p.is_dir() or not os.access(p, os.W_OK):
        raise ConfigError(f"output location not writable: {out}")


def _needs_checkpoint(cfg: RunConfig, names: Sequence[str]):
    if "learned" in names:
        if cfg.eval.checkpoint is None:
            raise ConfigError("the learned scheduler needs --checkpoint")
        if not Path(cfg.eval.checkpoint).is_file():
            raise ConfigError(f"checkpoint not found: {cfg.eval.checkpoint}")


# ---------------------------------------------------------------------------
# outputs


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def make_policy(name: str, cfg: RunConfig, seed: int, params: Optional[PolicyParameters] = None):
    if name == "learned":
        return LearnedPolicy(params, mode="greedy")
    return HeuristicPolicy(SCHEDULERS[name], seed=seed, limit=cfg.eval.limit).build()


def evaluate(name: str, cfg: RunConfig, params: Optional[PolicyParameters] = None) -> list[tuple[int, dict]]:
    """(seed, metrics) for each evaluation seed."""
    out = []
    for s in cfg.eval.seeds:
        wl = cfg.workload_for(s)
        max_limit = params.l_max if params is not None else cfg.max_limit
        trace = run_episode(make_policy(name, cfg, s, params), wl, cfg.servers, max_limit=max_limit)
        out.append((s, metrics(trace, cfg.servers)))
    return out


def cdf_rows(jcts: Sequence[float]) -> list[tuple[float, float]]:
    xs = sorted(jcts)
    n = len(xs)
    return [(x, (i + 1) / n) for i, x in enumerate(xs)]


def _load_params(cfg: RunConfig) -> PolicyParameters:
    try:
        params, _ = PolicyParameters.load(cfg.eval.checkpoint)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{cfg.eval.checkpoint}: {exc}") from None
    return params


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: RunConfig, out_path: Optional[Path] = None) -> Path:
    if cfg.trace is not None:
        raise ConfigError("generate needs a workload spec, not a trace file")
    path = Path(out_path) if out_path is not None else Path(cfg.out) / "trace.jsonl"
    dags = generate_workload(cfg.workload)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_trace(dags, path)
    work = sum(d.total_work for d in dags)
    span = dags[-1].arrival_time - dags[0].arrival_time if len(dags) > 1 else 0.0
    offered = work / span / capacity(cfg.servers) if span > 0 else float("nan")
    print(f"wrote {len(dags)} applications to {path}; arrival rate {cfg.workload.arrival_rate:.4g}/s, "
          f"target load {cfg.workload.target_load:g}, offered load {offered:.3f}")
    return path


def cmd_train(cfg: RunConfig, checkpoint_every: Optional[int] = None) -> Path:
    out = Path(cfg.out)
    tcfg = cfg.train
    state = None
    if cfg.eval.checkpoint is not None:
        if not Path(cfg.eval.checkpoint).is_file():
            raise ConfigError(f"checkpoint not found: {cfg.eval.checkpoint}")
        state, _ = TrainState.load(cfg.eval.checkpoint)
        if state.params.limits != tuple(range(1, total_executors(cfg.servers) + 1)):
            raise ConfigError("checkpoint limits do not match the configured cluster")
    scaler = cfg.scaler()
    if state is None:
        state = init_state(tcfg, cfg.servers, scaler)
    if cfg.trace is not None:
        fixed = load_trace(cfg.trace)
        workload_fn = lambda k: fixed
    else:
        workload_fn = iteration_workloads(cfg.workload, tcfg.seed)

    report_path = out / "train_report.csv"
    kept = []
    if state.iteration > 0 and report_path.is_file():
        for line in report_path.read_text(encoding="utf-8").splitlines()[1:]:
            if line and int(line.split(",", 1)[0]) < state.iteration:
                kept.append(line)
    out.mkdir(parents=True, exist_ok=True)

    def flush(rep):
        body = rep.to_csv().splitlines()
        _write(report_path, "\n".join([body[0], *kept, *body[1:]]) + "\n")

    def on_iteration(st, rep):
        flush(rep)
        if checkpoint_every and st.iteration % checkpoint_every == 0:
            st.save(out / "checkpoints" / f"iter_{st.iteration:06d}.json", tcfg)

    _, rep = train(tcfg, workload_fn, cfg.servers, state=state, scaler=scaler, callback=on_iteration)
    flush(rep)
    final = out / "checkpoint.json"
    state.save(final, tcfg)
    print(f"trained to iteration {state.iteration}; {len(rep.rows)} report rows, "
          f"{len(rep.rejected)} rejected; checkpoint {final}")
    return final


def cmd_evaluate(cfg: RunConfig) -> dict:
    name = cfg.eval.scheduler
    params = _load_params(cfg) if name == "learned" else None
    results = evaluate(name, cfg, params)
    out = Path(cfg.out)
    jct = io.StringIO()
    w = csv.writer(jct, lineterminator="\n")
    w.writerow(["seed", "app_id", "arrival", "completion", "jct"])
    pooled = []
    for s, m in results:
        for r in m["per_app"]:
            w.writerow([s, r["app_id"], _fmt(r["arrival"]), _fmt(r["completion"]), _fmt(r["jct"])])
            if r["jct"] is not None:
                pooled.append(r["jct"])
    summ = io.StringIO()
    w = csv.writer(summ, lineterminator="\n")
    w.writerow(["seed", "scheduler", "mean_jct", "utilization", "finished", "unfinished"])
    for s, m in results:
        w.writerow([s, name, _fmt(m["avg_completion"]), _fmt(m["utilization"]), m["count"], m["unfinished"]])
    overall = math.fsum(pooled) / len(pooled) if pooled else None
    utils = [m["utilization"] for _, m in results if m["utilization"] is not None]
    w.writerow(["all", name, _fmt(overall), _fmt(np.mean(utils) if utils else None),
                sum(m["count"] for _, m in results), sum(m["unfinished"] for _, m in results)])
    cdf = "jct,cdf\n" + "".join(f"{x!r},{p!r}\n" for x, p in cdf_rows(pooled))
    _write(out / "jct.csv", jct.getvalue())
    _write(out / "summary.csv", summ.getvalue())
    _write(out / "cdf.csv", cdf)
    print(f"{name}: mean completion time {overall:.4f} s over {len(pooled)} applications")
    return {"mean_jct": overall, "results": results}


def cmd_compare(cfg: RunConfig, names: Optional[Sequence[str]] = None) -> list[tuple[str, float, float]]:
    names = list(names or cfg.eval.schedulers)
    for n in names:
        if n not in SCHEDULERS:
            raise ConfigError(f"unknown scheduler {n!r}")
    params = _load_params(cfg) if "learned" in names else None
    rows = []
    for n in names:
        res = evaluate(n, cfg, params if n == "learned" else None)
        jcts = [r["jct"] for _, m in res for r in m["per_app"] if r["jct"] is not None]
        utils = [m["utilization"] for _, m in res if m["utilization"] is not None]
        rows.append((n, math.fsum(jcts) / len(jcts), float(np.mean(utils))))
    text = "scheduler,completion_time,utilization\n" + "".join(f"{n},{c!r},{u!r}\n" for n, c, u in rows)
    _write(Path(cfg.out) / "comparison.csv", text)
    width = max(len(n) for n in names)
    print(f"{'scheduler':<{width}}  completion time (s)")
    for n, c, _ in rows:
        print(f"{n:<{width}}  {c:.3f}")
    return rows


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--iterations", type=int)
    common.add_argument("--agents", type=int)
    common.add_argument("--workload", type=float, choices=WLD_LEVELS, help="target load (WLD)")
    common.add_argument("--scheduler", action="append", choices=sorted(SCHEDULERS),
                        help="scheduler to evaluate; repeat for compare")
    common.add_argument("--checkpoint", help="policy checkpoint (evaluate/compare) or resume point (train)")
    common.add_argument("--checkpoint-every", type=int, default=None)
    p = argparse.ArgumentParser(prog="dagsched", description="DAG scheduling simulator and learned scheduler")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (("generate", "write a synthetic trace"), ("train", "train a policy"),
                           ("evaluate", "evaluate one scheduler"), ("compare", "compare schedulers")):
        sub.add_parser(name, parents=[common], help=helptext)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        cfg = build_config(load_config(args.config), args)
        if args.checkpoint_every is not None and args.checkpoint_every < 1:
            raise ConfigError("--checkpoint-every must be >= 1")
        _check_writable(cfg.out)
        if args.command in ("evaluate", "compare"):
            names = [cfg.eval.scheduler] if args.command == "evaluate" else list(cfg.eval.schedulers)
            _needs_checkpoint(cfg, names)
    except (ConfigError, TraceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        if args.command == "generate":
            cmd_generate(cfg)
        elif args.command == "train":
            cmd_train(cfg, args.checkpoint_every)
        elif args.command == "evaluate":
            cmd_evaluate(cfg)
        else:
            cmd_compare(cfg)
    except (ConfigError, TraceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report any runtime failure with the stable code
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
