"""Command-line harness: simulate, shard-bench, drill, memory and verify."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import mnemochain
from .adversary import (FeatureDrill, balanced_accuracy, build_simulation,
                        fire_drill_train, held_out_drills)
from .config import ConfigError, RunConfig, load_config
from .ledger import verify_chain_bytes
from .metrics import RunManifest, emit_metrics, write_json
from .netsim import ConfigInvalid, run_until
from .sharding import (CostModel, PolicyKind, SelectionPolicy, double_spend_trials,
                       latency_table, load_balance_run)

log = logging.getLogger("engram_ledger")

EXIT_OK, EXIT_VERIFY_FAILED, EXIT_CONFIG = 0, 1, 2
SUBCOMMANDS = ("simulate", "shard-bench", "drill", "memory", "verify")


def _simulate(config: RunConfig, args, out: Path) -> tuple[int, list]:
    sim = build_simulation(config.sim)
    trace = run_until(sim)
    chain = trace.chains[0]
    (out / "chain.bin").write_bytes(chain.encode())
    paths = [
        emit_metrics(trace.csv_records(), "csv", out / "trace.csv",
                     ["time", "event_kind", "node", "detail"]),
        write_json(trace.summary, out / "summary.json"),
        out / "chain.bin",
    ]
    return EXIT_OK, paths


def _policy(config: RunConfig, kind: PolicyKind) -> SelectionPolicy:
    return SelectionPolicy(kind, config.sim.window, config.sim.tau_node,
                           config.sim.freshness_floor)


def _shard_bench(config: RunConfig, args, out: Path) -> tuple[int, list]:
    params = config.sharding
    names = params.policies if args.policies in (None, "all") else args.policies.split(",")
    trials = params.trials if args.trials is None else args.trials
    seed = config.sim.seed
    detection = []
    for name in names:
        result = double_spend_trials(_policy(config, PolicyKind(name)), trials,
                                     params.n_nodes, config.sim.replication, seed)
        detection.append(dataclasses.asdict(result))
    cost = CostModel(params.per_txn_cost, params.per_segment_cost)
    paths = [
        emit_metrics(detection, "csv", out / "detection.csv",
                     ["policy", "trials", "detected", "rate", "closed_form"]),
        emit_metrics(latency_table(params.latency_txns, cost, params.segment_counts), "csv",
                     out / "latency.csv", ["mode", "S", "latency", "speedup"]),
    ]
    if params.lb_seeds:
        rows = []
        kw = dict(rounds=params.lb_rounds, initial_nodes=params.lb_initial_nodes,
                  join_fraction=params.lb_join_fraction,
                  segments_per_round=params.lb_segments_per_round,
                  r=config.sim.replication, capacity=params.lb_capacity)
        fresh = SelectionPolicy(PolicyKind.FRESHNESS_PRIORITY, tau_node=params.lb_tau_node,
                                floor=params.lb_floor)
        for s in range(params.lb_seeds):
            u = load_balance_run(SelectionPolicy(PolicyKind.UNIFORM_RANDOM), seed + s, **kw)
            f = load_balance_run(fresh, seed + s, **kw)
            rows.append({"seed": seed + s, "uniform_max_queue": u,
                         "freshness_max_queue": f, "freshness_not_worse": f <= u})
        paths.append(emit_metrics(rows, "csv", out / "load_balance.csv",
                                  ["seed", "uniform_max_queue", "freshness_max_queue",
                                   "freshness_not_worse"]))
    return EXIT_OK, paths


def _drill(config: RunConfig, args, out: Path) -> tuple[int, list]:
    p = config.drill
    rounds = p.rounds if args.rounds is None else args.rounds
    seed = config.sim.seed
    factory = FeatureDrill(p.low, p.high, p.noise, p.grid_points)
    history = []
    disc = fire_drill_train(factory, rounds, seed, p.learning_rate, p.margin,
                            p.per_round, history)
    xs, ys = held_out_drills(factory, p.held_out, seed ^ 0x5EED)
    report = {"weights": list(disc.weights), "bias": disc.bias, "threshold": disc.threshold,
              "rounds": rounds, "seed": seed,
              "held_out_balanced_accuracy": balanced_accuracy(disc, xs, ys)}
    paths = [
        write_json(report, out / "discriminator.json"),
        emit_metrics([dataclasses.asdict(r) for r in history], "csv", out / "drills.csv",
                     ["round", "scenario", "detected"]),
    ]
    return EXIT_OK, paths


def _linking(config: RunConfig, seed: int) -> tuple[list, dict]:
    m = config.memory
    params = m.params()
    lags = [k * m.tau_mem / 2 for k in range(1, m.linking_lags + 1)]
    x, y = mnemochain.overlap_vs_lag(params.engram, m.n_neurons, lags,
                                     m.linking_pairs // m.linking_lags, seed)
    slope, lo, hi = mnemochain.slope_with_ci(x, y, seed)
    rows = [{"lag": float(lag), "pairs": int(np.sum(x == lag)),
             "mean_overlap": float(y[x == lag].mean())} for lag in lags]
    return rows, {"slope": slope, "ci_low": lo, "ci_high": hi,
                  "passed": slope < 0 and hi < 0}


def _memory(config: RunConfig, args, out: Path) -> tuple[int, list]:
    params = config.memory.params()
    seed = config.sim.seed
    chosen = ["h1", "h2", "h3"] if args.experiment == "all" else [args.experiment]
    runners = {
        "h1": ("h1_order.csv", lambda: mnemochain.run_h1(params, seed)),
        "h2": ("h2_probe.csv", lambda: mnemochain.run_h2(params, seed)),
        "h3": ("h3_integrity.csv", lambda: mnemochain.run_h3(params, seed)),
        "linking": ("linking.csv", lambda: _linking(config, seed)),
    }
    summary = {}
    paths = []
    for name in chosen:
        filename, run = runners[name]
        rows, summary[name] = run()
        fields = list(rows[0]) if rows else []
        paths.append(emit_metrics(rows, "csv", out / filename, fields))
    paths.append(write_json(summary, out / "summary.json"))
    return EXIT_OK, paths


def _verify(config: RunConfig, args, out: Path) -> tuple[int, list]:
    data = Path(args.chain_file).read_bytes()
    verdict = verify_chain_bytes(data, config.sim.difficulty)
    print(verdict)
    return (EXIT_OK if verdict.valid else EXIT_VERIFY_FAILED), []


_HANDLERS = {"simulate": _simulate, "shard-bench": _shard_bench, "drill": _drill,
             "memory": _memory, "verify": _verify}


def run_scenario(subcommand: str, config: RunConfig, config_bytes: bytes, seed: int,
                 out: Path, args) -> int:
    """Run one seeded replica and write its outputs plus a manifest."""
    config = config.with_seed(seed)
    try:
        config.sim.validate()
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if subcommand != "verify":
        out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    status, paths = _HANDLERS[subcommand](config, args, out)
    if subcommand != "verify":
        manifest = RunManifest.for_run(config_bytes, seed, subcommand)
        manifest.outputs = sorted(Path(p).name for p in paths)
        manifest.wall_clock = time.perf_counter() - started
        manifest.write(out / "manifest.json")
    log.info("%s seed=%d -> %s (exit %d)", subcommand, seed, out, status)
    return status


def _replica(job) -> int:
    subcommand, config, config_bytes, seed, out, args = job
    return run_scenario(subcommand, config, config_bytes, seed, out, args)


def build_parser() -> argparse.ArgumentParser:
    def add_globals(p, suppress):
        # global flags may come before or after the subcommand; on the
        # subcommand they only override what was actually given
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        p.add_argument("--config", default=d(None),
                       help="JSON config file or preset-bitcoin/-ethereum/-visa")
        p.add_argument("--seed", type=int, default=d(None), help="64-bit seed; overrides the config")
        p.add_argument("--out", default=d("out"), help="output directory (default: out)")
        p.add_argument("--parallel-seeds", type=int, default=d(1), metavar="K",
                       help="run K consecutive seeds as isolated replicas")
        return p

    common = add_globals(argparse.ArgumentParser(add_help=False), suppress=True)
    parser = add_globals(argparse.ArgumentParser(prog="engram-ledger"), suppress=False)
    sub = parser.add_subparsers(dest="subcommand", required=True)
    sub.add_parser("simulate", parents=[common])
    bench = sub.add_parser("shard-bench", parents=[common])
    bench.add_argument("--policies", default="all", help="'all' or comma-separated names")
    bench.add_argument("--trials", type=int, default=None)
    drill = sub.add_parser("drill", parents=[common])
    drill.add_argument("--rounds", type=int, default=None)
    memory = sub.add_parser("memory", parents=[common])
    memory.add_argument("--experiment", choices=["h1", "h2", "h3", "linking", "all"],
                        default="all")
    verify = sub.add_parser("verify", parents=[common])
    verify.add_argument("chain_file")
    return parser


def main(argv=None) -> int:
    level = os.environ.get("ENGRAM_LEDGER_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        config, config_bytes = load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    seed = config.sim.seed if args.seed is None else args.seed
    if not 0 <= seed < 1 << 64 or args.parallel_seeds < 1:
        print("config error: seed must be a u64 and --parallel-seeds >= 1", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    if args.subcommand == "verify":
        try:
            return run_scenario("verify", config, config_bytes, seed, out, args)
        except OSError as exc:
            print(f"cannot read chain file: {exc}", file=sys.stderr)
            return EXIT_VERIFY_FAILED
    if args.parallel_seeds == 1:
        return run_scenario(args.subcommand, config, config_bytes, seed, out, args)
    seeds = [(seed + i) % (1 << 64) for i in range(args.parallel_seeds)]
    jobs = [(args.subcommand, config, config_bytes, s, out / f"seed-{s}", args) for s in seeds]
    with ProcessPoolExecutor(max_workers=args.parallel_seeds) as pool:
        statuses = list(pool.map(_replica, jobs))
    return max(statuses)


if __name__ == "__main__":
    sys.exit(main())
