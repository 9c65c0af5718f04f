"""Discrete-time point-queue traffic simulator (1 s ticks).

Vehicles traverse an edge at free-flow speed, then wait in a FIFO lane queue
at the stop line until their movement is green, the lane has discharge
credit, and the next edge has room.  Saturation headway is 2 s per lane.

Within a tick the order is: injection, arrivals at edge ends, discharge,
stopped accounting, gridlock resolution, clock advance.
"""

from __future__ import annotations

import bisect
import csv
import io
import json
import math
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .scenario import Route, Scenario
from .signal import GREEN

SAT_HEADWAY_S = 2.0
FOOTPRINT_M = 7.5
TELEPORT_AFTER_S = 300
STOP_THRESHOLD = 0.1

FREE, QUEUED = 0, 1

TRIP_FIELDS = ("vehicle_id", "entry_s", "exit_s", "travel_s", "waiting_s", "speed_mps", "teleported")


@dataclass(eq=False, slots=True)
class Vehicle:
    id: int
    route: int
    edges: tuple[int, ...]
    entry_time: int
    pos: int = 0
    mode: int = FREE
    lane: int = -1
    queued_since: int = -1
    stopped_s: int = 0
    exit_time: int | None = None
    teleported: bool = False

    @property
    def normalized_speed(self) -> float:
        return 0.0 if self.mode == QUEUED else 1.0


@dataclass(frozen=True, slots=True)
class TripRecord:
    vehicle_id: int
    entry_s: int
    exit_s: int
    travel_s: float
    waiting_s: float
    speed_mps: float
    teleported: bool = False


def stopped(vehicle: Vehicle, tick: int | None = None) -> int:
    """1 if the vehicle's normalized speed is below 10% of the maximum."""
    return 1 if vehicle.normalized_speed < STOP_THRESHOLD else 0


@dataclass
class StoppedWindow:
    """Per-lane stopped-vehicle tick sums over a span of ticks."""

    start: int
    ticks: int
    lane_sums: Sequence[float]


class WindowError(ValueError):
    pass


def cumulative_stopped(window: StoppedWindow, lanes: Iterable[int], cycle_s: int = 60) -> float:
    """Time-averaged number of stopped vehicles on ``lanes`` over one full cycle."""
    if window.ticks != cycle_s:
        raise WindowError(f"window covers {window.ticks} ticks, expected a full cycle of {cycle_s}")
    return math.fsum(window.lane_sums[l] for l in lanes) / cycle_s


@dataclass
class Network:
    """Integer-indexed view of a scenario used by the simulator hot loop."""

    scenario: Scenario
    edge_ids: list[str] = field(init=False)
    edge_index: dict[str, int] = field(init=False)

    def __post_init__(self):
        sc = self.scenario
        net = sc.network
        self.edge_ids = sorted(net.edges)
        self.edge_index = {e: i for i, e in enumerate(self.edge_ids)}
        self.edge_len = [net.edges[e].length for e in self.edge_ids]
        self.edge_tt = [max(1, math.ceil(net.edges[e].length / net.edges[e].speed - 1e-9))
                        for e in self.edge_ids]
        self.edge_cap = [net.edges[e].lanes * max(1, int(net.edges[e].length // FOOTPRINT_M))
                         for e in self.edge_ids]
        self.edge_speed = [net.edges[e].speed for e in self.edge_ids]
        self.inter_ids = sorted(net.intersections)
        self.inter_index = {n: i for i, n in enumerate(self.inter_ids)}

        # lanes and the movements (next-edge indices) each one serves
        self.edge_lanes: list[list[int]] = []
        self.lane_edge: list[int] = []
        self.lane_moves: list[frozenset[int]] = []
        for ei, eid in enumerate(self.edge_ids):
            lanes = []
            for k, moves in enumerate(lane_movements(sc, eid)):
                lanes.append(len(self.lane_edge))
                self.lane_edge.append(ei)
                self.lane_moves.append(frozenset(self.edge_index[m] for m in moves))
            self.edge_lanes.append(lanes)

        # movement -> (intersection index, phases containing it)
        self.move_phases: dict[tuple[int, int], tuple[int, tuple[int, ...]]] = {}
        for n, inter in net.intersections.items():
            ii = self.inter_index[n]
            for a, b in inter.movements:
                self.move_phases[(self.edge_index[a], self.edge_index[b])] = (ii, inter.phases_of((a, b)))

        # inbound lanes per intersection phase
        self.phase_lanes: list[list[list[int]]] = []
        for n in self.inter_ids:
            inter = net.intersections[n]
            per_phase = []
            for ph in inter.phases:
                lanes = []
                for ei in sorted({self.edge_index[a] for a, _ in ph}):
                    served = {self.edge_index[b] for a, b in ph if self.edge_index[a] == ei}
                    lanes += [l for l in self.edge_lanes[ei] if self.lane_moves[l] & served]
                per_phase.append(sorted(lanes))
            self.phase_lanes.append(per_phase)

        self.routes: list[Route] = list(sc.routes)
        self.route_edges = [tuple(self.edge_index[e] for e in r.edges) for r in self.routes]
        self.route_len_m = [math.fsum(self.edge_len[e] for e in re) for re in self.route_edges]
        self.entries: list[tuple[int, float, list[int], list[float]]] = []
        for entry in sorted(sc.demand.probabilities):
            rids = [i for i, r in enumerate(self.routes) if r.entry == entry]
            cum, acc = [], 0.0
            for i in rids:
                acc += self.routes[i].weight
                cum.append(acc)
            if cum:
                cum[-1] = 1.0
            self.entries.append((self.edge_index[entry], sc.demand.probabilities[entry], rids, cum))

    @property
    def n_lanes(self) -> int:
        return len(self.lane_edge)


def lane_movements(sc: Scenario, edge_id: str) -> list[list[str]]:
    """Movements served by each lane of an edge, lane 0 rightmost.

    The rightmost lane takes right turns and through traffic, the leftmost
    takes left turns and through traffic, middle lanes are through-only.
    Without a through movement every lane serves every movement.
    """
    net = sc.network
    lanes = net.edges[edge_id].lanes
    succ = net.successors(edge_id)
    if lanes == 1 or not succ:
        return [list(succ) for _ in range(lanes)]
    angle = {b: net.turn_angle(edge_id, b) for b in succ}
    through = [b for b in succ if abs(angle[b]) <= 30.0]
    if not through:
        return [list(succ) for _ in range(lanes)]
    right = [b for b in succ if angle[b] < -30.0]
    left = [b for b in succ if angle[b] > 30.0]
    out = []
    for k in range(lanes):
        moves = list(through)
        if k == 0:
            moves += right
        if k == lanes - 1:
            moves += left
        out.append(sorted(moves))
    return out


class Simulation:
    """Mutable simulation state for one seeded run."""

    def __init__(self, scenario: Scenario | Network, seed: int = 0, record_stopped: bool = False):
        self.net = scenario if isinstance(scenario, Network) else Network(scenario)
        self.rng = random.Random(seed)
        self.seed = seed
        self.clock = 0
        self.vehicles: dict[int, Vehicle] = {}
        self.queues: list[deque[int]] = [deque() for _ in range(self.net.n_lanes)]
        self.credit = [0.0] * self.net.n_lanes
        self.occupancy = [0] * len(self.net.edge_ids)
        self.arrivals: dict[int, list[int]] = {}
        self.next_id = 0
        self.injected = 0
        self.rejected = 0
        self.completed: list[Vehicle] = []
        self.n_completed = 0
        self.n_teleported_done = 0
        self.teleport_events = 0
        self.events: list[dict] = []
        self.lane_stopped_total = [0] * self.net.n_lanes
        self.lane_arrivals_total = [0] * self.net.n_lanes
        self.record_stopped = record_stopped
        self.stopped_log: list[list[int]] = []
        # optional (tick, event, lane, vehicle) trace of queue joins and departures
        self.lane_trace: list[tuple[int, str, int, int]] | None = None

    # -- bookkeeping ------------------------------------------------------
    @property
    def active(self) -> int:
        return len(self.vehicles)

    def conservation_ok(self) -> bool:
        return self.injected == self.active + self.n_completed + self.n_teleported_done

    def queued_count(self) -> int:
        return sum(len(q) for q in self.queues)

    def snapshot_stopped(self) -> list[int]:
        return list(self.lane_stopped_total)

    def window_since(self, snapshot: Sequence[int], start: int) -> StoppedWindow:
        return StoppedWindow(start, self.clock - start,
                             [a - b for a, b in zip(self.lane_stopped_total, snapshot)])

    def mean_speed(self) -> float:
        """Mean speed (m/s) of active vehicles: edge free speed when moving, 0 when queued."""
        if not self.vehicles:
            return 0.0
        net = self.net
        total = 0.0
        for e, occ in enumerate(self.occupancy):
            if occ:
                moving = occ - sum(len(self.queues[l]) for l in net.edge_lanes[e])
                total += moving * net.edge_speed[e]
        return total / len(self.vehicles)

    # -- vehicle placement --------------------------------------------------
    def add_vehicle(self, route: int, at_edge: int = 0) -> Vehicle | None:
        """Insert a vehicle at the start of ``route`` (used by injection and fixtures)."""
        edges = self.net.route_edges[route]
        e = edges[at_edge]
        if self.occupancy[e] >= self.net.edge_cap[e]:
            return None
        v = Vehicle(self.next_id, route, edges, self.clock, pos=at_edge)
        self.next_id += 1
        self.vehicles[v.id] = v
        self.injected += 1
        self.occupancy[e] += 1
        self._schedule(v, self.clock + self.net.edge_tt[e] - 1)
        return v

    def _schedule(self, v: Vehicle, tick: int) -> None:
        v.mode = FREE
        v.lane = -1
        self.arrivals.setdefault(tick, []).append(v.id)

    def _enqueue(self, v: Vehicle) -> None:
        nxt = v.edges[v.pos + 1]
        lanes = self.net.edge_lanes[v.edges[v.pos]]
        best, best_len = -1, 0
        for l in lanes:
            if nxt in self.net.lane_moves[l]:
                n = len(self.queues[l])
                if best < 0 or n < best_len:
                    best, best_len = l, n
        if best < 0:
            # movement not served by any lane (explicit fixture routes): use the shortest queue
            best = min(lanes, key=lambda l: (len(self.queues[l]), l))
        v.mode = QUEUED
        v.lane = best
        v.queued_since = self.clock
        self.queues[best].append(v.id)
        self.lane_arrivals_total[best] += 1
        if self.lane_trace is not None:
            self.lane_trace.append((self.clock, "join", best, v.id))

    def _advance(self, v: Vehicle, now: int) -> None:
        """Move a vehicle off its current edge onto the next one."""
        self.occupancy[v.edges[v.pos]] -= 1
        v.pos += 1
        e = v.edges[v.pos]
        self.occupancy[e] += 1
        self._schedule(v, now + self.net.edge_tt[e])

    def _finish(self, v: Vehicle, now: int) -> None:
        self.occupancy[v.edges[v.pos]] -= 1
        v.exit_time = now + 1
        del self.vehicles[v.id]
        self.completed.append(v)
        if v.teleported:
            self.n_teleported_done += 1
        else:
            self.n_completed += 1

    # -- stepping ----------------------------------------------------------
    def movement_green(self, signal_view: Mapping[str, Sequence[str]], a: int, b: int) -> bool:
        mp = self.net.move_phases.get((a, b))
        if mp is None:
            return True
        colors = signal_view[self.net.inter_ids[mp[0]]]
        return any(colors[p] == GREEN for p in mp[1])

    def step(self, signal_view: Mapping[str, Sequence[str]] | None = None) -> "Simulation":
        """Advance one second under the given per-intersection phase colors."""
        signal_view = signal_view or {}
        for n in self.net.inter_ids:
            if n not in signal_view:
                raise KeyError(f"signal view missing intersection {n!r}")
        now = self.clock
        net = self.net
        rng = self.rng

        # (i) injection; draws are consumed identically whatever the network state
        for edge, p, rids, cum in net.entries:
            if p <= 0.0:
                continue
            if rng.random() < p:
                r = rids[bisect.bisect_right(cum, rng.random() * cum[-1])] if len(rids) > 1 else rids[0]
                if self.add_vehicle(r) is None:
                    self.rejected += 1

        # (ii) free-flow vehicles reaching the end of their edge
        for vid in self.arrivals.pop(now, ()):
            v = self.vehicles[vid]
            if v.pos == len(v.edges) - 1:
                self._finish(v, now)
            else:
                self._enqueue(v)

        # (iii) discharge
        queues, credit, vehicles = self.queues, self.credit, self.vehicles
        inc = 1.0 / SAT_HEADWAY_S
        for lane in range(net.n_lanes):
            q = queues[lane]
            if q:
                head = vehicles[q[0]]
                green = self.movement_green(signal_view, head.edges[head.pos], head.edges[head.pos + 1])
            else:
                a = net.lane_edge[lane]
                green = any(self.movement_green(signal_view, a, b) for b in net.lane_moves[lane]) \
                    if net.lane_moves[lane] else True
            if not green:
                credit[lane] = 0.0
                continue
            credit[lane] = min(1.0, credit[lane] + inc)
            while q and credit[lane] >= 1.0:
                head = vehicles[q[0]]
                nxt = head.edges[head.pos + 1]
                if not self.movement_green(signal_view, head.edges[head.pos], nxt):
                    break
                if self.occupancy[nxt] >= net.edge_cap[nxt]:
                    break
                q.popleft()
                credit[lane] -= 1.0
                head.stopped_s += now - head.queued_since
                if self.lane_trace is not None:
                    self.lane_trace.append((now, "leave", lane, head.id))
                self._advance(head, now)

        # (iv) stopped accounting: queued vehicles have speed 0
        for lane in range(net.n_lanes):
            self.lane_stopped_total[lane] += len(queues[lane])
        if self.record_stopped:
            self.stopped_log.append([len(q) for q in queues])

        # (v) gridlock, then the clock
        self.resolve_gridlock()
        self.clock += 1
        return self

    def stopped_seconds(self, v: Vehicle) -> int:
        """Stopped seconds accumulated so far, including the current queue spell."""
        if v.mode == QUEUED:
            return v.stopped_s + (self.clock - v.queued_since)
        return v.stopped_s

    def resolve_gridlock(self, threshold: int = TELEPORT_AFTER_S) -> list[dict]:
        """Teleport queue heads that have been stopped for ``threshold`` seconds."""
        now = self.clock
        events = []
        for lane, q in enumerate(self.queues):
            while q:
                v = self.vehicles[q[0]]
                waited = now + 1 - v.queued_since
                if waited < threshold:
                    break
                q.popleft()
                if self.lane_trace is not None:
                    self.lane_trace.append((now, "teleport", lane, v.id))
                v.stopped_s += waited
                v.teleported = True
                self.teleport_events += 1
                from_edge = self.net.edge_ids[v.edges[v.pos]]
                if v.pos + 1 < len(v.edges):
                    self._advance(v, now)
                    to_edge = self.net.edge_ids[v.edges[v.pos]]
                else:
                    self._finish(v, now)
                    to_edge = None
                ev = {"t": now, "event": "teleport", "vehicle": v.id, "from": from_edge,
                      "to": to_edge, "waited_s": waited}
                events.append(ev)
        self.events.extend(events)
        return events

    # -- results -----------------------------------------------------------
    def finalize_trips(self, since: int = 0) -> list[TripRecord]:
        """Trip records of vehicles that entered at or after ``since`` and have exited."""
        out = []
        for v in self.completed:
            if v.entry_time < since:
                continue
            travel = v.exit_time - v.entry_time
            out.append(TripRecord(v.id, v.entry_time, v.exit_time, float(travel), float(v.stopped_s),
                                  self.net.route_len_m[v.route] / travel, v.teleported))
        return out


def trips_to_csv(trips: Iterable[TripRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRIP_FIELDS)
    for t in trips:
        w.writerow([t.vehicle_id, t.entry_s, t.exit_s, f"{t.travel_s:.6g}", f"{t.waiting_s:.6g}",
                    f"{t.speed_mps:.6f}", int(t.teleported)])
    return buf.getvalue()


def read_trips_csv(text: str) -> list[TripRecord]:
    rows = csv.DictReader(io.StringIO(text))
    return [TripRecord(int(r["vehicle_id"]), int(r["entry_s"]), int(r["exit_s"]), float(r["travel_s"]),
                       float(r["waiting_s"]), float(r["speed_mps"]), r["teleported"] == "1")
            for r in rows]


def events_to_jsonl(events: Iterable[Mapping]) -> str:
    return "".join(json.dumps(e, sort_keys=True) + "\n" for e in events)
