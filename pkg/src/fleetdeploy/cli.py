"""Command-line front door.

Three subcommands: ``topology`` (tree synthesis only), ``compare`` (ours vs
the MST baseline over resampled target sets), and ``run`` (full deployment
with logs, metrics, figures, and optional live serving).

Exit codes: 0 success, 2 scenario validation error, 3 monitor breach,
4 infeasible topology.
"""

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import report
from .bridge import BridgeServer, ResetRequested
from .scenarios import ScenarioConfig, ScenarioError, resample_targets
from .sim import MonitorBreach, run, write_runlog
from .topo import UnreachableTargetError, mst_baseline, opt_tree

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_BREACH = 3
EXIT_INFEASIBLE = 4


def _load_scenario(path):
    return ScenarioConfig.from_file(path)


def _ensure_out(out):
    os.makedirs(out, exist_ok=True)
    return out


def cmd_topology(args):
    config = _load_scenario(args.scenario)
    params = dict(config.params)
    if args.seed is not None:
        params["seed"] = args.seed
    params["bounds"] = config.bounds
    t0 = time.perf_counter()
    tree, searcher_paths = opt_tree(
        config.p_g, config.targets, config.obstacles, params)
    wall_ms = (time.perf_counter() - t0) * 1e3
    n_relays = tree.relay_count()
    n_agents = len(tree.nodes) - 1
    n_hops = sum(tree.depth(i) for i in tree.target_node_indices.values())
    out = _ensure_out(args.out)
    tree_path = os.path.join(out, "tree.json")
    with open(tree_path, "w") as fh:
        json.dump(tree.to_dict(searcher_paths), fh, indent=2, sort_keys=True)
    print(f"agents N={n_agents} (relays {n_relays}), total hops N_h={n_hops}, "
          f"wall {wall_ms:.0f} ms")
    print(f"tree written to {tree_path}")
    return EXIT_OK


def _compare_once(config, count, seed):
    scen = resample_targets(config, count, seed)
    params = {**scen.params, "seed": seed, "bounds": scen.bounds}
    tree, _ = opt_tree(scen.p_g, scen.targets, scen.obstacles, params)
    ours_r = tree.relay_count()
    ours_h = sum(tree.depth(i) for i in tree.target_node_indices.values())
    base = mst_baseline(scen.p_g, scen.targets, scen.obstacles,
                        params["d_c"], params)
    base_r = base.relay_count()
    base_h = sum(base.depth(i) for i in base.target_node_indices.values())
    return ours_r, ours_h, base_r, base_h


def cmd_compare(args):
    config = _load_scenario(args.scenario)
    seed0 = args.seed if args.seed is not None else int(config.params.get("seed", 0))
    counts = (2, 4, 6, 8)
    rows = []
    for count in counts:
        acc = np.zeros(4)
        for trial in range(args.trials):
            acc += _compare_once(config, count, seed0 + 1000 * trial + count)
        acc /= args.trials
        rows.append({"targets": count,
                     "ours_relays": acc[0], "ours_hops": acc[1],
                     "mst_relays": acc[2], "mst_hops": acc[3]})
    out = _ensure_out(args.out)
    csv_path = os.path.join(out, "compare.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    header = (f"{'targets':>7} | {'ours N_r':>8} {'ours N_h':>8} | "
              f"{'mst N_r':>8} {'mst N_h':>8}")
    print(header)
    print("-" * len(header))
    for r in rows:
        print(f"{r['targets']:>7} | {r['ours_relays']:>8.2f} {r['ours_hops']:>8.2f} | "
              f"{r['mst_relays']:>8.2f} {r['mst_hops']:>8.2f}")
    print(f"csv written to {csv_path}")
    return EXIT_OK


def _write_artifacts(result, out):
    runlog_path = os.path.join(out, "runlog.ndjson")
    write_runlog(result.runlog, runlog_path)
    csv_path = os.path.join(out, "metrics.csv")
    result.metrics.write_csv(csv_path)
    figures = report.render_run(result, out)
    return [runlog_path, csv_path] + figures


def cmd_run(args):
    config = _load_scenario(args.scenario)
    out = _ensure_out(args.out)
    kwargs = {"seed": args.seed, "tick_budget": args.tick_budget}

    if not args.serve:
        result = run(config, **kwargs)
        paths = _write_artifacts(result, out)
        _print_summary(result, paths)
        return EXIT_OK

    with BridgeServer(port=args.port) as server:
        print(f"serving frames on ws://{server.host}:{server.port}")
        while True:
            try:
                result = run(config, command_source=server.command_source,
                             frame_sink=server.frame_sink,
                             stop_on_arrival=False, **kwargs)
                break
            except ResetRequested:
                print("reset requested; restarting run")
    paths = _write_artifacts(result, out)
    _print_summary(result, paths)
    return EXIT_OK


def _print_summary(result, paths):
    m = result.metrics
    mean_solve = float(np.mean(m.mean_solve_ms)) if m.mean_solve_ms else 0.0
    mean_build = float(np.mean(m.mean_constraint_ms)) if m.mean_constraint_ms else 0.0
    print(f"{result.reason}: {result.ticks} ticks ({result.sim_time:.1f} s simulated), "
          f"{result.total_wall_ms / 1e3:.1f} s wall")
    print(f"per agent per tick: constraint build {mean_build:.1f} ms + "
          f"solve {mean_solve:.1f} ms = {mean_build + mean_solve:.1f} ms")
    if m.min_pair_dist:
        print(f"margins: min pair {min(m.min_pair_dist):.3f} m, "
              f"min LOS-obstacle {min(m.min_los_obs_dist):.3f} m, "
              f"max edge {max(m.max_edge_dist):.3f} m")
    for p in paths:
        print(f"wrote {p}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fleetdeploy",
        description="Relay-tree deployment planner and simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", required=True, help="scenario JSON file")
    common.add_argument("--seed", type=int, default=None,
                        help="override the scenario's random seed")
    common.add_argument("--out", default="out",
                        help="output directory (default: ./out)")

    p_topo = sub.add_parser("topology", parents=[common],
                            help="synthesize the relay tree only")
    p_topo.set_defaults(func=cmd_topology)

    p_cmp = sub.add_parser("compare", parents=[common],
                           help="ours vs MST baseline over resampled targets")
    p_cmp.add_argument("--trials", type=int, default=10,
                       help="trials per target count (default: 10)")
    p_cmp.set_defaults(func=cmd_compare)

    p_run = sub.add_parser("run", parents=[common],
                           help="full deployment run")
    p_run.add_argument("--tick-budget", type=int, default=None,
                       help="max ticks (default: scenario's, else 1000)")
    p_run.add_argument("--serve", action="store_true",
                       help="serve live frames and accept steering commands")
    p_run.add_argument("--port", type=int, default=8765,
                       help="websocket port for --serve (default: 8765)")
    p_run.set_defaults(func=cmd_run)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as e:
        print(f"scenario error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except UnreachableTargetError as e:
        print(f"topology error: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except MonitorBreach as e:
        print(f"monitor breach: {e}", file=sys.stderr)
        return EXIT_BREACH


if __name__ == "__main__":
    sys.exit(main())
