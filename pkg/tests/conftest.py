import copy
import json

import pytest

from atsclab.scenario import bundled_path, parse_scenario

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def bundled_doc(name="single_intersection"):
    return json.loads(bundled_path(name).read_text())


def cross_doc(rate=0.0, overrides=None, factor=None):
    """The bundled single intersection with optional per-edge overrides."""
    doc = copy.deepcopy(bundled_doc())
    doc["demand"] = {"rate_per_lane_vps": rate}
    if factor:
        doc["demand"]["edge_factor"] = factor
    for e in doc["edges"]:
        e.update((overrides or {}).get(e["id"], {}))
    return doc


def corridor_doc(n_edges=2, length=100.0, speed=10.0, rate=0.0, lanes=1):
    nodes = [{"id": f"N{i}", "x": i * length, "y": 0.0} for i in range(n_edges + 1)]
    edges = [{"id": f"e{i}", "from": f"N{i}", "to": f"N{i + 1}", "lanes": lanes,
              "length": length, "speed": speed} for i in range(n_edges)]
    return {"schema": 1, "name": "corridor", "nodes": nodes, "edges": edges, "intersections": [],
            "demand": {"rate_per_lane_vps": rate}, "timing": {"cycle_s": 60, "yellow_total_s": 6}}


def ring_doc(length=15.0, speed=7.5):
    return {
        "schema": 1, "name": "ring",
        "nodes": [{"id": "A", "x": 0.0, "y": 0.0}, {"id": "B", "x": length, "y": 0.0}],
        "edges": [{"id": "e1", "from": "A", "to": "B", "lanes": 1, "length": length, "speed": speed},
                  {"id": "e2", "from": "B", "to": "A", "lanes": 1, "length": length, "speed": speed}],
        "intersections": [],
        "demand": {"rate_per_lane_vps": 0.0},
        "routes": [{"edges": ["e1", "e2"], "weight": 1.0}, {"edges": ["e2", "e1"], "weight": 1.0}],
    }


@pytest.fixture
def cross():
    return parse_scenario(cross_doc())


@pytest.fixture
def single():
    from atsclab.scenario import load_scenario
    return load_scenario("single_intersection")
