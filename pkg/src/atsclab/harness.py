"""Seeded training runs, evaluation rollouts and comparison reports.

Output layout::

    <out>/runs/<id>/config.json, monitor.csv, checkpoint.json, trips.csv, events.jsonl
    <out>/report/<scenario>/summary.csv, sweep_static.csv, anova.json, tukey.csv,
                            kde_travel_time.csv, kde_speed.csv, trips/<method>/seed<k>.csv
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import agent as ag
from . import stats
from .control import (DQNController, StaticController, make_controllers,
                      parse_controller_spec, run_cycles)
from .scenario import Scenario, load_scenario
from .signal import SignalPlan, plan_trace_csv
from .simcore import Simulation, TripRecord, events_to_jsonl, trips_to_csv

log = logging.getLogger(__name__)

DEFAULT_TRAIN_CYCLES = 1000
DEFAULT_EVAL_CYCLES = 500
DEFAULT_EVAL_WARMUP = 50
TRAIN_SEED_BASE = 1000
MONITOR_FIELDS = ("cycle", "intersection", "action", "reward", "active_vehicles", "mean_speed")
SUMMARY_FIELDS = ("method", "speed_mean", "speed_std", "waiting_mean", "waiting_std",
                  "travel_mean", "travel_std", "trips", "rollouts", "in_network")

_MASK64 = (1 << 64) - 1


def mix64(seed: int, index: int = 0) -> int:
    """splitmix64 of ``seed + index``; used to derive per-run and per-agent streams."""
    z = (seed + index * 0x9E3779B97F4A7C15) & _MASK64
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def fmt(x: float) -> str:
    return f"{x:.10g}"


class HarnessError(RuntimeError):
    pass


class GridlockAbort(HarnessError):
    pass


# -- training -----------------------------------------------------------------
@dataclass
class TrainRunConfig:
    scenario: str
    seed: int
    cycles: int = DEFAULT_TRAIN_CYCLES
    agent: ag.DQNConfig = field(default_factory=ag.DQNConfig)
    monitor_every: int = 1
    max_teleports_per_cycle: int = 50
    run_id: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["agent"] = self.agent.to_dict()
        d["run_id"] = self.id
        return d

    @property
    def id(self) -> str:
        return self.run_id or f"seed{self.seed}"


@dataclass
class TrainResult:
    run_dir: Path
    checkpoint: Path
    actions: dict[str, list[int]]
    rewards: dict[str, list[float]]


def train(config: TrainRunConfig, out_dir: str | Path) -> TrainResult:
    """Train one independent DQN agent per intersection and persist the run."""
    if config.cycles < config.agent.warmup:
        raise HarnessError(f"training cycles ({config.cycles}) below replay warmup ({config.agent.warmup})")
    sc = load_scenario(config.scenario)
    run_dir = Path(out_dir) / "runs" / config.id
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")

    sim = Simulation(sc, seed=config.seed)
    agents = {node: ag.DQNAgent(config.agent, seed=mix64(config.seed, i + 1))
              for i, node in enumerate(sim.net.inter_ids)}
    total = config.cycles
    controllers = {
        node: DQNController(agents[node], epsilon=lambda c: config.agent.epsilon(c, total), learn=True).bind(sim, node)
        for node in sim.net.inter_ids
    }
    monitor = io.StringIO()
    writer = csv.writer(monitor, lineterminator="\n")
    writer.writerow(MONITOR_FIELDS)

    def on_cycle(st):
        if st.cycle % config.monitor_every == 0:
            for node in sim.net.inter_ids:
                c = controllers[node]
                writer.writerow([st.cycle, node, c.actions[-1], fmt(c.rewards[-1]), st.active, fmt(st.mean_speed)])
        if st.teleports > config.max_teleports_per_cycle:
            (run_dir / "events.jsonl").write_text(events_to_jsonl(sim.events))
            raise GridlockAbort(
                f"run {config.id}: {st.teleports} teleports in cycle {st.cycle} exceed "
                f"{config.max_teleports_per_cycle}; restart with lower demand or another seed")

    run_cycles(sim, controllers, config.cycles, on_cycle)

    (run_dir / "monitor.csv").write_text(monitor.getvalue())
    (run_dir / "trips.csv").write_text(trips_to_csv(sim.finalize_trips()))
    (run_dir / "events.jsonl").write_text(events_to_jsonl(sim.events))
    for node in sim.net.inter_ids:
        (run_dir / f"plans_{node}.csv").write_text(plan_trace_csv(controllers[node].plans))
    ckpt = run_dir / "checkpoint.json"
    ag.save_checkpoint(ckpt, agents, {
        "seed": config.seed,
        "cycles_trained": config.cycles,
        "scenario": sc.name,
        "hyperparameters": config.agent.to_dict(),
    })
    return TrainResult(run_dir, ckpt,
                       {n: controllers[n].actions for n in sim.net.inter_ids},
                       {n: controllers[n].rewards for n in sim.net.inter_ids})


def _train_one(args):
    config, out_dir = args
    return train(config, out_dir)


def train_many(base: TrainRunConfig, seeds: Sequence[int], out_dir: str | Path,
               workers: int = 1) -> list[TrainResult]:
    configs = [TrainRunConfig(base.scenario, s, base.cycles, base.agent, base.monitor_every,
                              base.max_teleports_per_cycle) for s in seeds]
    if workers <= 1:
        return [train(c, out_dir) for c in configs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_train_one, [(c, out_dir) for c in configs]))


def read_monitor(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# -- evaluation ----------------------------------------------------------------
@dataclass
class Rollout:
    seed: int
    policy: str
    trips: list[TripRecord]
    in_network: int
    teleports: int
    plans: dict[str, list[SignalPlan]]

    def metric(self, name: str) -> list[float]:
        attr = {"travel_time": "travel_s", "waiting_time": "waiting_s", "speed": "speed_mps"}[name]
        return [getattr(t, attr) for t in self.trips if not t.teleported]

    def mean(self, name: str) -> float:
        xs = self.metric(name)
        return float(np.mean(xs)) if xs else math.nan


@dataclass
class EvalResult:
    policy: str
    rollouts: list[Rollout]
    samples: dict[str, list[float]]

    def pooled(self, name: str) -> list[float]:
        return [x for r in self.rollouts for x in r.metric(name)]

    def aggregate(self) -> dict[str, tuple[float, float]]:
        out = {}
        for m in ("speed", "waiting_time", "travel_time"):
            xs = self.pooled(m)
            out[m] = stats.descriptive(xs) if len(xs) >= 2 else (math.nan, math.nan)
        return out


def rollout(sc: Scenario, spec: str, seed: int, cycles: int = DEFAULT_EVAL_CYCLES,
            warmup: int = DEFAULT_EVAL_WARMUP, agents: dict[str, ag.DQNAgent] | None = None,
            policy: str | None = None) -> Rollout:
    sim = Simulation(sc, seed=seed)
    ctrls = make_controllers(spec, sim, agents)
    run_cycles(sim, ctrls, warmup + cycles)
    since = warmup * sc.timing.cycle_s
    plans = {node: list(c.plans) for node, c in ctrls.items() if hasattr(c, "plans")}
    return Rollout(seed, policy or spec, sim.finalize_trips(since=since), sim.active,
                   sim.teleport_events, plans)


def _checkpoints(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if path.is_dir():
        found = sorted(path.glob("**/checkpoint.json"))
        if found:
            return found
    raise ag.CheckpointError(f"no checkpoint found at {str(path)!r}")


def evaluate(spec: str, scenario: Scenario | str, seeds: Sequence[int],
             cycles: int = DEFAULT_EVAL_CYCLES, warmup: int = DEFAULT_EVAL_WARMUP,
             label: str | None = None) -> EvalResult:
    """Roll a controller out on every evaluation seed; RL policies run greedily.

    ``samples`` holds one value per rollout (one per policy when ``dqn:`` names
    a directory of several training runs).
    """
    sc = load_scenario(scenario) if isinstance(scenario, (str, Path)) else scenario
    kind, arg = parse_controller_spec(spec)
    label = label or spec
    if kind != "dqn":
        rolls = [rollout(sc, spec, s, cycles, warmup, policy=label) for s in seeds]
        samples = {m: [r.mean(m) for r in rolls] for m in ("speed", "waiting_time", "travel_time")}
        return EvalResult(label, rolls, samples)

    rolls = []
    per_policy: dict[str, list[list[float]]] = {m: [] for m in ("speed", "waiting_time", "travel_time")}
    paths = _checkpoints(Path(arg))
    for ck in paths:
        agents, meta = ag.load_checkpoint(ck)
        if meta.get("seed") in set(seeds):
            raise HarnessError(f"evaluation seeds overlap the training seed {meta['seed']} of {ck}")
        mine = [rollout(sc, spec, s, cycles, warmup, agents=agents, policy=label) for s in seeds]
        rolls += mine
        for m in per_policy:
            per_policy[m].append([r.mean(m) for r in mine])
    if len(paths) == 1:
        samples = {m: v[0] for m, v in per_policy.items()}
    else:
        samples = {m: [float(np.mean(v)) for v in vs] for m, vs in per_policy.items()}
    return EvalResult(label, rolls, samples)


# -- static sweep and demand calibration -----------------------------------------
@dataclass
class SweepResult:
    best: int
    table: list[dict]
    results: dict[int, EvalResult]

    @property
    def ties(self) -> list[int]:
        return [row["plan"] for row in self.table if row["tied_with_best"]]


def sweep_static(scenario: Scenario | str, seeds: Sequence[int], cycles: int = DEFAULT_EVAL_CYCLES,
                 warmup: int = DEFAULT_EVAL_WARMUP) -> SweepResult:
    """Evaluate every fixed plan; the best minimizes mean travel time."""
    sc = load_scenario(scenario) if isinstance(scenario, (str, Path)) else scenario
    results = {k: evaluate(f"static:{k}", sc, seeds, cycles, warmup) for k in range(7)}
    means = {k: float(np.mean(r.samples["travel_time"])) for k, r in results.items()}
    best = min(means, key=lambda k: (means[k], k))
    tied = {best}
    if len(seeds) >= 2:
        groups = [stats.SampleGroup(str(k), results[k].samples["travel_time"]) for k in range(7)]
        try:
            for row in stats.tukey_hsd(groups):
                pair = {int(row.group1), int(row.group2)}
                if best in pair and not row.significant:
                    tied |= pair
        except stats.StatsError:
            pass
    table = []
    for k in range(7):
        agg = results[k].aggregate()
        table.append({
            "plan": k,
            "travel_mean": means[k],
            "travel_std": agg["travel_time"][1],
            "waiting_mean": agg["waiting_time"][0],
            "speed_mean": agg["speed"][0],
            "best": k == best,
            "tied_with_best": k in tied,
        })
    return SweepResult(best, table, results)


@dataclass
class CalibrationResult:
    scale: float
    probes: list[tuple[float, bool]]


def _saturation_ok(sc: Scenario, seed: int, cycles: int, target: float) -> bool:
    sim = Simulation(sc, seed=seed)
    ctrls = {n: StaticController(3).bind(sim, n) for n in sim.net.inter_ids}
    capacity = 0
    lanes = sorted({l for per in sim.net.phase_lanes for ls in per for l in ls})
    for l in lanes:
        e = sim.net.lane_edge[l]
        capacity += sim.net.edge_cap[e] / len(sim.net.edge_lanes[e])
    run_cycles(sim, ctrls, cycles)
    mean_queue = sum(sim.lane_stopped_total[l] for l in lanes) / max(1, sim.clock)
    mean_fill = mean_queue / max(1.0, capacity)
    return sim.teleport_events == 0 and sim.rejected == 0 and mean_fill <= target


def calibrate_demand(scenario: Scenario | str, target: float = 0.25, seed: int = 1,
                     cycles: int = 60, tol: float = 0.01) -> CalibrationResult:
    """Largest demand scale keeping the 50/50 fixed plan sub-saturated.

    Sub-saturated means no teleports, no refused insertions, and a
    time-averaged stop-line queue below ``target`` of lane storage.
    """
    sc = load_scenario(scenario) if isinstance(scenario, (str, Path)) else scenario
    probes: list[tuple[float, bool]] = []
    base = max(sc.demand.probabilities.values(), default=0.0)
    if base <= 0:
        raise HarnessError("scenario has no demand to scale")
    hi = 1.0 / base
    lo = 0.0

    def ok(scale: float) -> bool:
        res = _saturation_ok(sc.with_demand_scale(scale), seed, cycles, target)
        probes.append((scale, res))
        return res

    if ok(hi):
        return CalibrationResult(hi, probes)
    while hi - lo > tol * max(hi, 1e-9):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return CalibrationResult(lo, probes)


# -- comparison report -------------------------------------------------------------
def method_slug(spec: str) -> str:
    kind, arg = parse_controller_spec(spec)
    if kind == "static":
        return f"static_{arg}"
    return kind


@dataclass
class CompareResult:
    summary: list[dict]
    evals: dict[str, EvalResult]
    anova: dict | None
    tukey: list[stats.TukeyRow]
    files: list[Path]
    notices: list[str]


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(r)
    path.write_text(buf.getvalue())
    return path


def compare(scenario: str | Path, methods: Sequence[str], eval_seeds: Sequence[int], out_dir: str | Path,
            cycles: int = DEFAULT_EVAL_CYCLES, warmup: int = DEFAULT_EVAL_WARMUP,
            alpha: float = 0.05) -> CompareResult:
    """Evaluate every method on one shared seed set and emit the comparison report."""
    sc = load_scenario(scenario)
    if not methods:
        raise HarnessError("no methods to compare")
    for m in methods:
        parse_controller_spec(m)
    rep = Path(out_dir) / "report" / sc.name
    (rep / "trips").mkdir(parents=True, exist_ok=True)
    files: list[Path] = []
    notices: list[str] = []
    evals: dict[str, EvalResult] = {}

    for spec in methods:
        kind, arg = parse_controller_spec(spec)
        if kind == "static" and arg == "best":
            sw = sweep_static(sc, eval_seeds, cycles, warmup)
            files.append(_write_csv(rep / "sweep_static.csv",
                                    ("plan", "travel_mean", "travel_std", "waiting_mean", "speed_mean", "best",
                                     "tied_with_best"),
                                    ([r["plan"], fmt(r["travel_mean"]), fmt(r["travel_std"]),
                                      fmt(r["waiting_mean"]), fmt(r["speed_mean"]), int(r["best"]),
                                      int(r["tied_with_best"])] for r in sw.table)))
            res = sw.results[sw.best]
            res.policy = spec
            notices.append(f"static:best resolved to static:{sw.best}")
        else:
            res = evaluate(spec, sc, eval_seeds, cycles, warmup, label=spec)
        evals[spec] = res

    summary = []
    for spec, res in evals.items():
        agg = res.aggregate()
        mdir = rep / "trips" / method_slug(spec)
        mdir.mkdir(parents=True, exist_ok=True)
        for i, r in enumerate(res.rollouts):
            name = f"seed{r.seed}.csv" if len(res.rollouts) == len(eval_seeds) else f"policy{i // len(eval_seeds)}_seed{r.seed}.csv"
            (mdir / name).write_text(trips_to_csv(r.trips))
        row = {
            "method": spec,
            "speed_mean": agg["speed"][0], "speed_std": agg["speed"][1],
            "waiting_mean": agg["waiting_time"][0], "waiting_std": agg["waiting_time"][1],
            "travel_mean": agg["travel_time"][0], "travel_std": agg["travel_time"][1],
            "trips": sum(len(r.metric("travel_time")) for r in res.rollouts),
            "rollouts": len(res.rollouts),
            "in_network": sum(r.in_network for r in res.rollouts),
        }
        summary.append(row)
    files.append(_write_csv(rep / "summary.csv", SUMMARY_FIELDS,
                            ([row[k] if k in ("method", "trips", "rollouts", "in_network") else fmt(row[k])
                              for k in SUMMARY_FIELDS] for row in summary)))

    anova_doc = None
    tukey_rows: list[stats.TukeyRow] = []
    if len(evals) < 2:
        notices.append("fewer than two methods: statistical tests skipped")
    elif any(len(r.samples["travel_time"]) < 2 for r in evals.values()):
        notices.append("fewer than two samples per method: statistical tests skipped")
    else:
        anova_doc = {}
        for metric in ("travel_time", "waiting_time", "speed"):
            groups = [stats.SampleGroup(spec, r.samples[metric]) for spec, r in evals.items()]
            an = stats.anova_oneway(groups)
            anova_doc[metric] = {
                "F": an.F if math.isfinite(an.F) else None,
                "df_between": an.df_between, "df_within": an.df_within, "p": an.p,
                "degenerate": an.degenerate,
                "assumptions": stats.assumption_report(groups),
            }
        anova_doc["samples_per_method"] = {spec: len(r.samples["travel_time"]) for spec, r in evals.items()}
        anova_doc["alpha"] = alpha
        (rep / "anova.json").write_text(json.dumps(anova_doc, indent=2, sort_keys=True) + "\n")
        files.append(rep / "anova.json")

        groups = [stats.SampleGroup(spec, r.samples["travel_time"]) for spec, r in evals.items()]
        if anova_doc["travel_time"]["degenerate"]:
            notices.append("zero within-group variance: Tukey HSD skipped")
        else:
            tukey_rows = stats.tukey_hsd(groups, alpha)
            files.append(_write_csv(rep / "tukey.csv", ("pair", "diff", "ci_low", "ci_high", "significant"),
                                    ([f"{t.group1} vs {t.group2}", fmt(t.diff), fmt(t.ci_low), fmt(t.ci_high),
                                      int(t.significant)] for t in tukey_rows)))

        files += _write_kde(rep / "kde_travel_time.csv",
                            {spec: r.samples["travel_time"] for spec, r in evals.items()}, notices)
        files += _write_kde(rep / "kde_speed.csv", {spec: r.pooled("speed") for spec, r in evals.items()}, notices)

    return CompareResult(summary, evals, anova_doc, tukey_rows, files, notices)


def _write_kde(path: Path, data: dict[str, Sequence[float]], notices: list[str]) -> list[Path]:
    usable = {k: v for k, v in data.items() if len(v) >= 2}
    if not usable:
        return []
    grid = stats.kde_grid(list(usable.values()))
    cols = {}
    for k, v in usable.items():
        try:
            cols[k] = stats.kde(v, grid)
        except stats.StatsError:
            notices.append(f"{path.name}: {k} has zero variance, density omitted")
    if not cols:
        return []
    _write_csv(path, ("grid", *cols), ([fmt(g), *(fmt(c[i]) for c in cols.values())] for i, g in enumerate(grid)))
    return [path]
