"""Command-line entry point: ``atsclab <command> ...``.

Exit codes: 0 ok, 2 usage, 3 scenario validation, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Sequence

from . import harness
from .agent import CheckpointError, DQNConfig
from .control import ControllerSpecError
from .scenario import ScenarioError, load_scenario
from .signal import plan_trace_csv
from .simcore import trips_to_csv

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("atsclab")


class UsageError(Exception):
    pass


def _positive(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {n}")
    return n


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="base seed (training default 1000, evaluation default 1)")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--json", action="store_true", help="machine-readable stdout")

    p = argparse.ArgumentParser(prog="atsclab", parents=[common],
                                description="Traffic signal control lab: train, evaluate, compare.")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", parents=[common], help="validate a scenario file")
    v.add_argument("scenario")
    v.add_argument("--routes", action="store_true", help="dump the weighted route table")

    t = sub.add_parser("train", parents=[common], help="multi-seed DQN training")
    t.add_argument("scenario")
    t.add_argument("--seeds", type=int, default=10, help="number of independent runs (default 10)")
    t.add_argument("--full-suite", action="store_true", help="train 30 runs instead of --seeds")
    t.add_argument("--cycles", type=int, default=harness.DEFAULT_TRAIN_CYCLES)
    t.add_argument("--workers", type=_positive, default=1)
    t.add_argument("--agent-config", default=None, help="JSON file overriding DQN hyperparameters")

    for name, helptext in (("evaluate", "roll out one controller on the evaluation seeds"),
                           ("compare", "evaluate several controllers and run the statistics"),
                           ("sweep-static", "evaluate all seven fixed plans")):
        e = sub.add_parser(name, parents=[common], help=helptext)
        e.add_argument("scenario")
        e.add_argument("--eval-seeds", type=int, default=30, help="number of evaluation seeds (default 30)")
        e.add_argument("--cycles", type=int, default=harness.DEFAULT_EVAL_CYCLES)
        e.add_argument("--warmup", type=int, default=harness.DEFAULT_EVAL_WARMUP)
        if name == "evaluate":
            e.add_argument("--method", required=True, help="static:<k> | webster | maxpressure | actuated | dqn:<path>")
        if name == "compare":
            e.add_argument("--methods", required=True,
                           help="comma-separated controller list, e.g. static:best,webster,maxpressure,actuated,dqn:runs")

    c = sub.add_parser("calibrate", parents=[common], help="find the sub-saturation demand scale")
    c.add_argument("scenario")
    c.add_argument("--target", type=float, default=0.25)
    c.add_argument("--cycles", type=int, default=60)
    return p


def _emit(args, payload: dict, text: str) -> None:
    if args.json:
        print(json.dumps(_clean(payload), sort_keys=True))
    else:
        print(text)


def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    return x


def _resolved(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "json"}


def cmd_validate(args) -> int:
    sc = load_scenario(args.scenario)
    net = sc.network
    routes = [{"edges": list(r.edges), "turns": r.turns, "weight": r.weight} for r in sc.routes]
    payload = {
        "config": _resolved(args), "valid": True, "name": sc.name,
        "intersections": len(net.intersections),
        "inbound_lanes": sum(net.inbound_lane_count(n, net.in_edges(n)) for n in net.intersections),
        "routes": routes if args.routes else len(routes),
        "arrival_probabilities": dict(sc.demand.probabilities),
    }
    lines = [f"scenario {sc.name}: ok",
             f"  intersections: {payload['intersections']}  inbound lanes: {payload['inbound_lanes']}"
             f"  routes: {len(routes)}"]
    if args.routes:
        lines.append(f"  {'weight':>10}  turns  route")
        for r in routes:
            lines.append(f"  {r['weight']:10.6f}  {r['turns']:5d}  {' > '.join(r['edges'])}")
    _emit(args, payload, "\n".join(lines))
    return EXIT_OK


def cmd_train(args) -> int:
    n = 30 if args.full_suite else args.seeds
    if n < 1:
        raise UsageError("--seeds must be at least 1")
    base = harness.TRAIN_SEED_BASE if args.seed is None else args.seed
    agent_cfg = DQNConfig()
    if args.agent_config:
        agent_cfg = DQNConfig.from_dict(json.loads(Path(args.agent_config).read_text()))
    load_scenario(args.scenario)
    cfg = harness.TrainRunConfig(args.scenario, base, args.cycles, agent_cfg)
    if not args.json:
        print(f"config: {json.dumps(_resolved(args), sort_keys=True)}")
    results = harness.train_many(cfg, [base + i for i in range(n)], args.out, workers=args.workers)
    runs = []
    for res in results:
        last = {node: sum(a[-50:]) / max(1, len(a[-50:])) for node, a in res.actions.items()}
        runs.append({"run_dir": str(res.run_dir), "checkpoint": str(res.checkpoint), "final_mean_action": last})
    text = "\n".join(f"{r['run_dir']}: mean action (last 50 cycles) "
                     + ", ".join(f"{k}={v:.2f}" for k, v in r["final_mean_action"].items()) for r in runs)
    _emit(args, {"config": _resolved(args), "runs": runs}, text)
    return EXIT_OK


def _eval_seeds(args) -> list[int]:
    if args.eval_seeds < 1:
        raise UsageError("--eval-seeds must be at least 1")
    base = 1 if args.seed is None else args.seed
    return list(range(base, base + args.eval_seeds))


def cmd_evaluate(args) -> int:
    seeds = _eval_seeds(args)
    sc = load_scenario(args.scenario)
    if not args.json:
        print(f"config: {json.dumps(_resolved(args), sort_keys=True)}")
    res = harness.evaluate(args.method, sc, seeds, args.cycles, args.warmup)
    outdir = Path(args.out) / "eval" / sc.name / harness.method_slug(args.method)
    outdir.mkdir(parents=True, exist_ok=True)
    for i, r in enumerate(res.rollouts):
        (outdir / f"rollout{i}_seed{r.seed}.csv").write_text(trips_to_csv(r.trips))
        for node, plans in r.plans.items():
            (outdir / f"rollout{i}_seed{r.seed}_plans_{node}.csv").write_text(plan_trace_csv(plans))
    agg = res.aggregate()
    payload = {"config": _resolved(args), "method": args.method,
               "aggregate": {k: {"mean": v[0], "std": v[1]} for k, v in agg.items()},
               "samples": res.samples, "out": str(outdir)}
    text = "\n".join([f"{args.method} on {sc.name} ({len(seeds)} seeds)"] +
                     [f"  {k:13s} mean {v[0]:8.3f}  std {v[1]:8.3f}" for k, v in agg.items()])
    _emit(args, payload, text)
    return EXIT_OK


def cmd_sweep(args) -> int:
    seeds = _eval_seeds(args)
    if not args.json:
        print(f"config: {json.dumps(_resolved(args), sort_keys=True)}")
    sw = harness.sweep_static(args.scenario, seeds, args.cycles, args.warmup)
    payload = {"config": _resolved(args), "best": sw.best, "table": sw.table}
    lines = [f"best fixed plan: static:{sw.best}", "  plan  travel_mean  waiting_mean  tied"]
    for row in sw.table:
        lines.append(f"  {row['plan']:4d}  {row['travel_mean']:11.3f}  {row['waiting_mean']:12.3f}"
                     f"  {'*' if row['tied_with_best'] else ''}")
    _emit(args, payload, "\n".join(lines))
    return EXIT_OK


def cmd_compare(args) -> int:
    seeds = _eval_seeds(args)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if not methods:
        raise UsageError("--methods is empty")
    if not args.json:
        print(f"config: {json.dumps(_resolved(args), sort_keys=True)}")
    res = harness.compare(args.scenario, methods, seeds, args.out, args.cycles, args.warmup)
    payload = {"config": _resolved(args), "summary": res.summary, "anova": res.anova,
               "tukey": [vars(t) for t in res.tukey], "files": [str(f) for f in res.files],
               "notices": res.notices}
    lines = [f"{'method':>24}  {'speed':>15}  {'waiting':>15}  {'travel':>15}"]
    for row in res.summary:
        lines.append(f"{row['method']:>24}  ({row['speed_mean']:5.2f}, {row['speed_std']:5.2f})"
                     f"  ({row['waiting_mean']:5.1f}, {row['waiting_std']:5.1f})"
                     f"  ({row['travel_mean']:5.1f}, {row['travel_std']:5.1f})")
    if res.anova:
        a = res.anova["travel_time"]
        lines.append(f"ANOVA travel time: F={a['F']}, df=({a['df_between']}, {a['df_within']}), p={a['p']:.3g}")
        for t in res.tukey:
            lines.append(f"  {t.group1} vs {t.group2}: diff {t.diff:+.3f} "
                         f"[{t.ci_low:+.3f}, {t.ci_high:+.3f}]{' *' if t.significant else ''}")
    lines += [f"note: {n}" for n in res.notices]
    _emit(args, payload, "\n".join(lines))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    seed = 1 if args.seed is None else args.seed
    res = harness.calibrate_demand(args.scenario, args.target, seed=seed, cycles=args.cycles)
    payload = {"config": _resolved(args), "scale": res.scale, "probes": res.probes}
    _emit(args, payload, f"demand scale {res.scale:.4f} ({len(res.probes)} probes)")
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "sweep-static": cmd_sweep,
    "calibrate": cmd_calibrate,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ControllerSpecError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ScenarioError as exc:
        where = f" [{exc.element}]" if exc.element else ""
        print(f"invalid scenario{where}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (harness.HarnessError, CheckpointError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
