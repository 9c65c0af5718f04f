"""Road networks, demand and weighted route sets.

A scenario is a single JSON document (``"schema": 1``)::

    {
      "schema": 1,
      "name": "single_intersection",
      "nodes": [{"id": "C", "x": 0, "y": 0}, ...],
      "edges": [{"id": "n_in", "from": "N", "to": "C", "lanes": 3,
                 "length": 200, "speed": 10}, ...],
      "intersections": [{"node": "C", "phases": [[["n_in", "s_out"], ...], [...]]}],
      "demand": {"rate_per_lane_vps": 0.1, "edge_factor": {"e_in": 2.0}},
      "timing": {"cycle_s": 60, "yellow_total_s": 6},
      "max_route_len": 2,
      "routes": [{"edges": ["n_in", "s_out"], "weight": 0.5}, ...]   # optional
    }

Coordinates are planar metres.  ``edge_factor`` is an optional per-entry-edge
multiplier on the lane-proportional arrival probability.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

SCHEMA_VERSION = 1
TURN_THRESHOLD_DEG = 30.0
REQUIRED_PHASES = 2


class ScenarioError(ValueError):
    """Raised for malformed or inconsistent scenario files."""

    def __init__(self, message: str, element: str | None = None):
        super().__init__(message)
        self.element = element


@dataclass(frozen=True)
class Node:
    id: str
    x: float
    y: float


@dataclass(frozen=True)
class Edge:
    id: str
    src: str
    dst: str
    lanes: int
    length: float
    speed: float


@dataclass(frozen=True)
class Intersection:
    node: str
    phases: tuple[frozenset[tuple[str, str]], ...]

    @property
    def movements(self) -> frozenset[tuple[str, str]]:
        out: set[tuple[str, str]] = set()
        for phase in self.phases:
            out |= phase
        return frozenset(out)

    def phases_of(self, movement: tuple[str, str]) -> tuple[int, ...]:
        return tuple(i for i, ph in enumerate(self.phases) if movement in ph)


@dataclass(frozen=True)
class Route:
    edges: tuple[str, ...]
    turns: int = 0
    weight: float = 0.0

    @property
    def entry(self) -> str:
        return self.edges[0]


@dataclass(frozen=True)
class DemandProfile:
    rate_per_lane_vps: float
    edge_factor: Mapping[str, float] = field(default_factory=dict)
    probabilities: Mapping[str, float] = field(default_factory=dict)

    def scaled(self, factor: float, net: "RoadNetwork") -> "DemandProfile":
        return make_demand(net, self.rate_per_lane_vps * factor, self.edge_factor)


@dataclass(frozen=True)
class Timing:
    cycle_s: int = 60
    yellow_total_s: int = 6

    @property
    def yellow_s(self) -> int:
        return self.yellow_total_s // 2


class RoadNetwork:
    """Directed edge graph with signalized intersections."""

    def __init__(self, nodes: Iterable[Node], edges: Iterable[Edge],
                 intersections: Iterable[Intersection] = ()):
        self.nodes: dict[str, Node] = {n.id: n for n in nodes}
        self.edges: dict[str, Edge] = {e.id: e for e in edges}
        self.intersections: dict[str, Intersection] = {i.node: i for i in intersections}
        self.validate()
        self._out: dict[str, list[str]] = {n: [] for n in self.nodes}
        self._in: dict[str, list[str]] = {n: [] for n in self.nodes}
        for e in sorted(self.edges.values(), key=lambda e: e.id):
            self._out[e.src].append(e.id)
            self._in[e.dst].append(e.id)

    def validate(self) -> None:
        for e in self.edges.values():
            for ref in (e.src, e.dst):
                if ref not in self.nodes:
                    raise ScenarioError(f"edge {e.id!r} references missing node {ref!r}", ref)
            if e.lanes < 1:
                raise ScenarioError(f"edge {e.id!r} must have at least one lane", e.id)
            if not (e.length > 0 and e.speed > 0):
                raise ScenarioError(f"edge {e.id!r} needs positive length and speed", e.id)
        for node, inter in self.intersections.items():
            if node not in self.nodes:
                raise ScenarioError(f"intersection references missing node {node!r}", node)
            if len(inter.phases) != REQUIRED_PHASES:
                raise ScenarioError(
                    f"intersection {node!r} has {len(inter.phases)} phases, "
                    f"expected {REQUIRED_PHASES}", node)
            for i, phase in enumerate(inter.phases):
                if not phase:
                    raise ScenarioError(f"intersection {node!r} phase {i} has no movements", node)
                for a, b in phase:
                    for ref in (a, b):
                        if ref not in self.edges:
                            raise ScenarioError(
                                f"intersection {node!r} movement references missing edge {ref!r}", ref)
                    if self.edges[a].dst != node or self.edges[b].src != node:
                        raise ScenarioError(
                            f"movement {a}->{b} does not pass through intersection {node!r}", a)

    # -- topology ---------------------------------------------------------
    def out_edges(self, node: str) -> list[str]:
        return self._out[node]

    def in_edges(self, node: str) -> list[str]:
        return self._in[node]

    def is_uturn(self, a: str, b: str) -> bool:
        return self.edges[b].dst == self.edges[a].src

    def successors(self, edge_id: str) -> list[str]:
        """Edges reachable from the end of ``edge_id`` in one movement."""
        e = self.edges[edge_id]
        inter = self.intersections.get(e.dst)
        if inter is not None:
            moves = inter.movements
            return [b for b in self._out[e.dst] if (edge_id, b) in moves]
        return [b for b in self._out[e.dst] if not self.is_uturn(edge_id, b)]

    def entry_edges(self) -> list[str]:
        fed = {b for a in self.edges for b in self.successors(a)}
        return sorted(e for e in self.edges if e not in fed)

    def exit_edges(self) -> list[str]:
        return sorted(e for e in self.edges if not self.successors(e))

    def heading(self, edge_id: str) -> float:
        e = self.edges[edge_id]
        a, b = self.nodes[e.src], self.nodes[e.dst]
        return math.atan2(b.y - a.y, b.x - a.x)

    def turn_angle(self, a: str, b: str) -> float:
        """Signed heading change in degrees from edge a to edge b, left positive."""
        d = math.degrees(self.heading(b) - self.heading(a))
        d = (d + 180.0) % 360.0 - 180.0
        return d

    def inbound_lane_count(self, node: str, edges: Iterable[str]) -> int:
        return sum(self.edges[e].lanes for e in edges if self.edges[e].dst == node)


@dataclass(frozen=True)
class Scenario:
    name: str
    network: RoadNetwork
    routes: tuple[Route, ...]
    demand: DemandProfile
    timing: Timing

    def routes_from(self, entry: str) -> list[Route]:
        return [r for r in self.routes if r.entry == entry]

    def with_demand_scale(self, factor: float) -> "Scenario":
        return Scenario(self.name, self.network, self.routes,
                        self.demand.scaled(factor, self.network), self.timing)


# -- route operations ------------------------------------------------------
def turn_count(route: Route | Sequence[str], net: RoadNetwork,
               threshold_deg: float = TURN_THRESHOLD_DEG) -> int:
    edges = route.edges if isinstance(route, Route) else tuple(route)
    return sum(1 for a, b in zip(edges, edges[1:])
               if abs(net.turn_angle(a, b)) > threshold_deg)


def enumerate_routes(net: RoadNetwork, max_len: int) -> list[Route]:
    """All node-acyclic entry-to-exit paths with at most ``max_len`` edges."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    exits = set(net.exit_edges())
    found: list[tuple[str, ...]] = []

    def walk(path: list[str], seen: set[str]) -> None:
        last = path[-1]
        if last in exits:
            # an exit that is also an entry is a bare edge, not a route through the network
            if len(path) >= 2:
                found.append(tuple(path))
            return
        if len(path) >= max_len:
            return
        for nxt in net.successors(last):
            dst = net.edges[nxt].dst
            if dst in seen:
                continue
            path.append(nxt)
            seen.add(dst)
            walk(path, seen)
            seen.discard(dst)
            path.pop()

    for entry in net.entry_edges():
        e = net.edges[entry]
        walk([entry], {e.src, e.dst})
    found.sort()
    return [Route(edges=p, turns=turn_count(p, net)) for p in found]


def weight_routes(routes: Sequence[Route]) -> list[Route]:
    """Weight each route by 1/(1+turns), normalized within its entry-edge group."""
    groups: dict[str, list[Route]] = {}
    for r in routes:
        groups.setdefault(r.entry, []).append(r)
    totals = {k: math.fsum(1.0 / (1 + r.turns) for r in g) for k, g in groups.items()}
    out = []
    for r in routes:
        out.append(Route(r.edges, r.turns, (1.0 / (1 + r.turns)) / totals[r.entry]))
    return out


def make_demand(net: RoadNetwork, rate_per_lane: float,
                edge_factor: Mapping[str, float] | None = None) -> DemandProfile:
    edge_factor = dict(edge_factor or {})
    probs = {}
    for entry in net.entry_edges():
        p = rate_per_lane * net.edges[entry].lanes * edge_factor.get(entry, 1.0)
        probs[entry] = min(1.0, max(0.0, p))
    return DemandProfile(rate_per_lane, edge_factor, probs)


# -- loading ---------------------------------------------------------------
def _require(doc: Mapping, key: str, where: str = "scenario"):
    if key not in doc:
        raise ScenarioError(f"{where} is missing key {key!r}", key)
    return doc[key]


def parse_scenario(doc: Mapping, name: str | None = None) -> Scenario:
    if not isinstance(doc, Mapping):
        raise ScenarioError("scenario document must be a JSON object")
    if doc.get("schema") != SCHEMA_VERSION:
        raise ScenarioError(f"unsupported scenario schema {doc.get('schema')!r}", "schema")
    try:
        nodes = [Node(str(n["id"]), float(n["x"]), float(n["y"]))
                 for n in _require(doc, "nodes")]
        edges = [Edge(str(e["id"]), str(e["from"]), str(e["to"]), int(e["lanes"]),
                      float(e["length"]), float(e["speed"]))
                 for e in _require(doc, "edges")]
        inters = []
        for item in _require(doc, "intersections"):
            phases = tuple(frozenset((str(a), str(b)) for a, b in ph) for ph in item["phases"])
            inters.append(Intersection(str(item["node"]), phases))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"malformed scenario element: {exc!r}") from exc

    for kind, items in (("node", nodes), ("edge", edges)):
        seen: set[str] = set()
        for it in items:
            if it.id in seen:
                raise ScenarioError(f"duplicate {kind} id {it.id!r}", it.id)
            seen.add(it.id)

    net = RoadNetwork(nodes, edges, inters)

    timing_doc = doc.get("timing", {})
    timing = Timing(int(timing_doc.get("cycle_s", 60)), int(timing_doc.get("yellow_total_s", 6)))
    if timing.cycle_s <= timing.yellow_total_s or timing.yellow_total_s % 2:
        raise ScenarioError("timing needs cycle_s > yellow_total_s and an even yellow total", "timing")

    demand_doc = _require(doc, "demand")
    rate = float(_require(demand_doc, "rate_per_lane_vps", "demand"))
    if rate < 0:
        raise ScenarioError("demand rate must be non-negative", "demand")
    factors = {str(k): float(v) for k, v in demand_doc.get("edge_factor", {}).items()}
    for k in factors:
        if k not in net.edges:
            raise ScenarioError(f"demand factor references missing edge {k!r}", k)
    demand = make_demand(net, rate, factors)

    if "routes" in doc:
        routes = _explicit_routes(net, doc["routes"])
    else:
        max_len = int(doc.get("max_route_len", len(net.edges)))
        routes = weight_routes(enumerate_routes(net, max_len))
    for entry, p in demand.probabilities.items():
        if p > 0 and not any(r.entry == entry for r in routes):
            raise ScenarioError(f"entry edge {entry!r} has demand but no route", entry)

    return Scenario(name or str(doc.get("name", "scenario")), net, tuple(routes), demand, timing)


def _explicit_routes(net: RoadNetwork, items: Sequence[Mapping]) -> list[Route]:
    routes = []
    weighted = []
    for item in items:
        edges = tuple(str(e) for e in item["edges"])
        for e in edges:
            if e not in net.edges:
                raise ScenarioError(f"route references missing edge {e!r}", e)
        for a, b in zip(edges, edges[1:]):
            if net.edges[a].dst != net.edges[b].src:
                raise ScenarioError(f"route edges {a!r} and {b!r} are not connected", b)
        routes.append(Route(edges, turn_count(edges, net)))
        weighted.append(item.get("weight"))
    if all(w is None for w in weighted):
        return weight_routes(routes)
    if any(w is None for w in weighted):
        raise ScenarioError("either all or none of the explicit routes carry weights", "routes")
    out = [Route(r.edges, r.turns, float(w)) for r, w in zip(routes, weighted)]
    sums: dict[str, float] = {}
    for r in out:
        if r.weight <= 0:
            raise ScenarioError(f"route starting at {r.entry!r} has non-positive weight", r.entry)
        sums[r.entry] = sums.get(r.entry, 0.0) + r.weight
    for entry, s in sums.items():
        if abs(s - 1.0) > 1e-9:
            raise ScenarioError(f"route weights from {entry!r} sum to {s}, not 1", entry)
    return out


BUNDLED = ("single_intersection", "single_intersection_symmetric", "arterial_3")


def bundled_path(name: str) -> Path:
    if name not in BUNDLED:
        raise ScenarioError(f"unknown bundled scenario {name!r}", name)
    return Path(str(resources.files("atsclab") / "scenarios" / f"{name}.json"))


def load_scenario(path: str | Path) -> Scenario:
    """Load and validate a scenario file; bare bundled names are accepted too."""
    p = Path(path)
    if not p.exists() and str(path) in BUNDLED:
        p = bundled_path(str(path))
    try:
        text = p.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {str(path)!r}: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario {str(path)!r} is not valid JSON: {exc}") from exc
    return parse_scenario(doc, name=doc.get("name", p.stem) if isinstance(doc, dict) else None)
