"""Signal controllers and the loop that drives them against a simulation.

Cyclic controllers (static, Webster, DQN) pick a plan at each 60 s cycle
boundary; acyclic ones (max-pressure, actuated) hold or switch phases tick by
tick.  Every controller returns the (phase 1, phase 2) colors for the
current tick.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import agent as ag
from .signal import (GREEN, RED, YELLOW, CycleClock, SignalPlan, custom_plan,
                     plan)
from .simcore import QUEUED, Simulation, StoppedWindow, cumulative_stopped

SAT_FLOW_VPS = 0.5
WEBSTER_HORIZON_S = 300
WEBSTER_EVERY = 5
SPLIT_BOUNDS = (0.30, 0.70)

MP_SLOT_S = 10
ACT_MIN_GREEN = 10
ACT_GAP = 3
ACT_EXTENSION = 2
ACT_MAX_GREEN = 42


class ControllerSpecError(ValueError):
    pass


# -- pure decision rules -----------------------------------------------------
def webster_splits(flow_ratios: Sequence[float],
                   bounds: tuple[float, float] = SPLIT_BOUNDS) -> tuple[float, ...]:
    """Splits proportional to per-phase critical flow ratios, clamped to ``bounds``."""
    y = [max(0.0, float(v)) for v in flow_ratios]
    total = sum(y)
    if total <= 0.0:
        return tuple(1.0 / len(y) for _ in y)
    raw = [v / total for v in y]
    lo, hi = bounds
    clamped = [min(hi, max(lo, s)) for s in raw]
    z = sum(clamped)
    return tuple(s / z for s in clamped)


def flow_ratios(lane_flows: Sequence[float], phase_lanes: Sequence[Sequence[int]],
                sat_flow: float = SAT_FLOW_VPS) -> list[float]:
    """Critical (maximum) lane flow over saturation flow, per phase."""
    return [max((lane_flows[l] / sat_flow for l in lanes), default=0.0) for lanes in phase_lanes]


def phase_pressures(queues: Sequence[Sequence[tuple[float, float]]]) -> list[float]:
    """Per-phase sum over movements of upstream minus downstream queue."""
    return [sum(up - down for up, down in moves) for moves in queues]


def max_pressure_select(queues: Sequence[Sequence[tuple[float, float]]], current: int | None = None) -> int:
    """Phase with the largest pressure; ties keep ``current``, otherwise go to the lower index."""
    p = phase_pressures(queues)
    best = max(p)
    if current is not None and p[current] == best:
        return current
    return p.index(best)


def actuated_green_time(arrivals: Sequence[int], min_green: int = ACT_MIN_GREEN,
                        gap: int = ACT_GAP, extension: int = ACT_EXTENSION,
                        max_green: int = ACT_MAX_GREEN) -> int:
    """Green length given detector arrival times (seconds since green onset).

    A vehicle is seen ``gap`` seconds before it reaches the stop line; an
    arrival within ``gap`` of the scheduled end pushes the end to
    arrival + ``extension``, never past ``max_green``.
    """
    arr = sorted(arrivals)
    end = min_green
    t = 0
    i = 0
    while True:
        while i < len(arr) and arr[i] <= t + gap:
            if arr[i] < end + gap:
                end = min(max_green, max(end, arr[i] + extension))
            i += 1
        if t >= end:
            return t
        t += 1


# -- controllers -------------------------------------------------------------
class Controller:
    cyclic = True
    name = "controller"

    def bind(self, sim: Simulation, node: str) -> "Controller":
        self.sim = sim
        self.node = node
        self.ii = sim.net.inter_index[node]
        self.phase_lanes = sim.net.phase_lanes[self.ii]
        return self

    def colors(self) -> tuple[str, str]:
        raise NotImplementedError

    def end_cycle(self) -> None:
        pass


class CyclicController(Controller):
    """Commits one plan per cycle and plays it out tick by tick."""

    def bind(self, sim, node):
        super().bind(sim, node)
        timing = sim.net.scenario.timing
        self.clock = CycleClock(length=timing.cycle_s)
        self.yellow = timing.yellow_s
        self.plans: list[SignalPlan] = []
        self._snap = sim.snapshot_stopped()
        self._snap_t = sim.clock
        self.windows: list[StoppedWindow] = []
        return self

    def choose_plan(self, cycle: int) -> SignalPlan:
        raise NotImplementedError

    def colors(self):
        if self.clock.tick == 0:
            p = self.choose_plan(self.clock.cycle)
            self.clock.commit_plan(p)
            self.plans.append(p)
        out = self.clock.colors(self.yellow)
        self.clock.advance()
        return out

    def end_cycle(self):
        w = self.sim.window_since(self._snap, self._snap_t)
        self.windows.append(w)
        self._snap = self.sim.snapshot_stopped()
        self._snap_t = self.sim.clock
        self.on_cycle_end(w)

    def on_cycle_end(self, window: StoppedWindow) -> None:
        pass

    def stopped_state(self, window: StoppedWindow) -> tuple[float, float]:
        return observe(window, self.phase_lanes, self.clock.length)


def observe(window: StoppedWindow, phase_lanes: Sequence[Sequence[int]], cycle_s: int = 60) -> tuple[float, ...]:
    """Per-phase stopped-vehicle averages, each divided by the phase's inbound lane count."""
    return tuple(cumulative_stopped(window, lanes, cycle_s) / max(1, len(lanes)) for lanes in phase_lanes)


class StaticController(CyclicController):
    def __init__(self, index: int):
        self.plan = plan(index)
        self.name = f"static:{index}"

    def choose_plan(self, cycle):
        return self.plan


class WebsterController(CyclicController):
    name = "webster"

    def __init__(self, horizon_s: int = WEBSTER_HORIZON_S, every: int = WEBSTER_EVERY,
                 sat_flow: float = SAT_FLOW_VPS):
        self.horizon_s = horizon_s
        self.every = every
        self.sat_flow = sat_flow

    def bind(self, sim, node):
        super().bind(sim, node)
        self.history: deque[tuple[int, list[int]]] = deque()
        self.current = custom_plan(0.5)
        return self

    def choose_plan(self, cycle):
        sim = self.sim
        self.history.append((sim.clock, list(sim.lane_arrivals_total)))
        while self.history and sim.clock - self.history[0][0] > self.horizon_s:
            self.history.popleft()
        if cycle % self.every == 0:
            t0, counts0 = self.history[0]
            span = sim.clock - t0
            if span > 0:
                flows = [(a - b) / span for a, b in zip(sim.lane_arrivals_total, counts0)]
                s = webster_splits(flow_ratios(flows, self.phase_lanes, self.sat_flow))
            else:
                s = (0.5, 0.5)
            self.current = custom_plan(round(s[0], 6))
        return self.current


class PhaseMachine(Controller):
    """Acyclic two-phase controller with yellow transitions."""

    cyclic = False

    def bind(self, sim, node):
        super().bind(sim, node)
        self.yellow = sim.net.scenario.timing.yellow_s
        self.phase = 0
        self.elapsed = 0
        self.yellow_left = 0
        self.pending = 0
        self.switches: list[tuple[int, int]] = []
        return self

    def _colors_for(self, color: str) -> tuple[str, str]:
        return (color, RED) if self.phase == 0 else (RED, color)

    def decide(self) -> int:
        raise NotImplementedError

    def colors(self):
        if self.yellow_left == 0:
            nxt = self.decide()
            if nxt != self.phase:
                self.pending = nxt
                self.yellow_left = self.yellow
        if self.yellow_left > 0:
            out = self._colors_for(YELLOW)
            self.yellow_left -= 1
            if self.yellow_left == 0:
                self.switches.append((self.sim.clock + 1, self.pending))
                self.phase = self.pending
                self.elapsed = 0
            return out
        self.elapsed += 1
        return self._colors_for(GREEN)


class MaxPressureController(PhaseMachine):
    name = "maxpressure"

    def __init__(self, slot_s: int = MP_SLOT_S):
        self.slot_s = slot_s

    def bind(self, sim, node):
        super().bind(sim, node)
        net = sim.net
        inter = net.scenario.network.intersections[node]
        self.phase_moves = [sorted((net.edge_index[a], net.edge_index[b]) for a, b in ph)
                            for ph in inter.phases]
        return self

    def movement_queues(self) -> list[list[tuple[int, int]]]:
        sim = self.sim
        net = sim.net
        up: dict[tuple[int, int], int] = {}
        edges = {a for moves in self.phase_moves for a, _ in moves}
        for a in edges:
            for lane in net.edge_lanes[a]:
                for vid in sim.queues[lane]:
                    v = sim.vehicles[vid]
                    key = (a, v.edges[v.pos + 1])
                    up[key] = up.get(key, 0) + 1
        down = {b: sum(len(sim.queues[l]) for l in net.edge_lanes[b])
                for moves in self.phase_moves for _, b in moves}
        return [[(up.get(m, 0), down[m[1]]) for m in moves] for moves in self.phase_moves]

    def decide(self):
        if self.elapsed < self.slot_s or self.elapsed % self.slot_s:
            return self.phase
        return max_pressure_select(self.movement_queues(), self.phase)


class ActuatedController(PhaseMachine):
    name = "actuated"

    def __init__(self, min_green: int = ACT_MIN_GREEN, gap: int = ACT_GAP,
                 extension: int = ACT_EXTENSION, max_green: int = ACT_MAX_GREEN):
        self.min_green, self.gap, self.extension, self.max_green = min_green, gap, extension, max_green

    def bind(self, sim, node):
        super().bind(sim, node)
        self.end = self.min_green
        self.detected: list[list[int]] = []
        return self

    def served_arrivals(self) -> list[int]:
        """Arrival times (relative to green onset) visible to the detectors now."""
        sim = self.sim
        net = sim.net
        lanes = self.phase_lanes[self.phase]
        edges = {net.lane_edge[l] for l in lanes}
        e = self.elapsed
        out = []
        if any(sim.queues[l] for l in lanes):
            out.append(e)
        for dt in range(self.gap + 1):
            for vid in sim.arrivals.get(sim.clock + dt, ()):
                v = sim.vehicles[vid]
                if v.edges[v.pos] in edges and v.pos + 1 < len(v.edges):
                    out.append(e + dt)
        return out

    def decide(self):
        if self.elapsed == 0:
            self.end = self.min_green
        for a in self.served_arrivals():
            if a < self.end + self.gap:
                self.end = min(self.max_green, max(self.end, a + self.extension))
        if self.elapsed >= self.end:
            return 1 - self.phase
        return self.phase


class DQNController(CyclicController):
    """Plans chosen by a DQN agent from the previous cycle's stopped counts.

    With ``learn`` set, each completed cycle becomes a training transition.
    """

    def __init__(self, agent: ag.DQNAgent, epsilon: float | Callable[[int], float] = 0.0,
                 learn: bool = False, name: str = "dqn"):
        self.agent = agent
        self.epsilon = epsilon
        self.learn = learn
        self.name = name

    def bind(self, sim, node):
        super().bind(sim, node)
        self.state: tuple[float, ...] = tuple(0.0 for _ in self.phase_lanes)
        self.actions: list[int] = []
        self.rewards: list[float] = []
        self.losses: list[float | None] = []
        return self

    def eps(self, cycle: int) -> float:
        return self.epsilon(cycle) if callable(self.epsilon) else float(self.epsilon)

    def choose_plan(self, cycle):
        a = self.agent.act(self.state, self.eps(cycle))
        self.actions.append(a)
        return plan(a)

    def on_cycle_end(self, window):
        s2 = self.stopped_state(window)
        r = ag.reward(s2)
        self.rewards.append(r)
        loss = None
        if self.learn:
            loss = self.agent.train_step(ag.MdpStep(self.state, self.actions[-1], r, s2))
        self.losses.append(loss)
        self.state = s2


# -- construction ------------------------------------------------------------
def parse_controller_spec(spec: str) -> tuple[str, str | None]:
    kind, _, arg = spec.partition(":")
    kind = kind.strip().lower()
    if kind == "static":
        if arg == "best":
            return kind, arg
        if not arg.isdigit() or not 0 <= int(arg) <= 6:
            raise ControllerSpecError(f"static controller needs a plan index 0..6, got {arg!r}")
        return kind, arg
    if kind in ("webster", "maxpressure", "actuated"):
        if arg:
            raise ControllerSpecError(f"{kind} takes no argument")
        return kind, None
    if kind == "dqn":
        if not arg:
            raise ControllerSpecError("dqn controller needs a checkpoint path: dqn:<path>")
        return kind, arg
    raise ControllerSpecError(f"unknown controller {spec!r}")


def make_controllers(spec: str, sim: Simulation,
                     agents: Mapping[str, ag.DQNAgent] | None = None) -> dict[str, Controller]:
    """One bound controller per intersection for a controller string."""
    kind, arg = parse_controller_spec(spec)
    out: dict[str, Controller] = {}
    if kind == "dqn" and agents is None:
        agents, _ = ag.load_checkpoint(Path(arg))
    for node in sim.net.inter_ids:
        if kind == "static":
            if arg == "best":
                raise ControllerSpecError("static:best must be resolved by a static sweep first")
            c: Controller = StaticController(int(arg))
        elif kind == "webster":
            c = WebsterController()
        elif kind == "maxpressure":
            c = MaxPressureController()
        elif kind == "actuated":
            c = ActuatedController()
        else:
            if node not in agents:
                raise ControllerSpecError(f"checkpoint has no agent for intersection {node!r}")
            c = DQNController(agents[node], epsilon=0.0, name="dqn")
        out[node] = c.bind(sim, node)
    return out


@dataclass
class CycleStats:
    cycle: int
    active: int
    mean_speed: float
    teleports: int


def run_cycles(sim: Simulation, controllers: Mapping[str, Controller], n_cycles: int,
               on_cycle: Callable[[CycleStats], None] | None = None) -> list[CycleStats]:
    """Drive ``sim`` for whole cycles, calling each controller every tick."""
    cycle_s = sim.net.scenario.timing.cycle_s
    nodes = sim.net.inter_ids
    stats = []
    for _ in range(n_cycles):
        tele0 = sim.teleport_events
        speed_acc = 0.0
        for _ in range(cycle_s):
            view = {n: controllers[n].colors() for n in nodes}
            sim.step(view)
            speed_acc += sim.mean_speed()
        for n in nodes:
            controllers[n].end_cycle()
        st = CycleStats(sim.clock // cycle_s - 1, sim.active, speed_acc / cycle_s,
                        sim.teleport_events - tele0)
        stats.append(st)
        if on_cycle is not None:
            on_cycle(st)
    return stats
