import itertools
import json
import math

import pytest
from hypothesis import given, strategies as st

from atsclab.scenario import (BUNDLED, Route, ScenarioError, enumerate_routes, load_scenario,
                              parse_scenario, turn_count, weight_routes)

from conftest import bundled_doc, corridor_doc, cross_doc


def brute_force_routes(net, max_len):
    """Every edge sequence up to max_len, filtered by the route definition."""
    entries, exits = set(net.entry_edges()), set(net.exit_edges())
    out = []
    for n in range(2, max_len + 1):
        for seq in itertools.product(sorted(net.edges), repeat=n):
            if seq[0] not in entries or seq[-1] not in exits:
                continue
            if any(b not in net.successors(a) for a, b in zip(seq, seq[1:])):
                continue
            nodes = [net.edges[seq[0]].src] + [net.edges[e].dst for e in seq]
            if len(set(nodes)) == len(nodes):
                out.append(seq)
    return sorted(out)


class TestLoad:
    def test_single_intersection(self):
        sc = load_scenario("single_intersection")
        net = sc.network
        assert len(net.intersections) == 1
        (node,) = net.intersections
        assert net.inbound_lane_count(node, net.in_edges(node)) == 12
        assert all(len(i.phases) == 2 for i in net.intersections.values())

    def test_arterial(self):
        sc = load_scenario("arterial_3")
        assert len(sc.network.intersections) == 3

    @pytest.mark.parametrize("name", BUNDLED)
    def test_bundled_files_load_from_path(self, name, tmp_path):
        p = tmp_path / f"{name}.json"
        p.write_text(json.dumps(bundled_doc(name)))
        assert load_scenario(p).name == name

    def test_missing_node_named(self):
        doc = cross_doc()
        doc["edges"][0]["from"] = "X"
        with pytest.raises(ScenarioError, match="'X'") as exc:
            parse_scenario(doc)
        assert exc.value.element == "X"

    def test_empty_phase(self):
        doc = cross_doc()
        doc["intersections"][0]["phases"][1] = []
        with pytest.raises(ScenarioError, match="no movements"):
            parse_scenario(doc)

    def test_three_phases_rejected(self):
        doc = cross_doc()
        ph = doc["intersections"][0]["phases"]
        ph.append([ph[0][0]])
        with pytest.raises(ScenarioError, match="3 phases"):
            parse_scenario(doc)

    def test_movement_not_through_node(self):
        doc = cross_doc()
        doc["intersections"][0]["phases"][0].append(["n_out", "s_out"])
        with pytest.raises(ScenarioError, match="does not pass"):
            parse_scenario(doc)

    def test_malformed_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        with pytest.raises(ScenarioError, match="not valid JSON"):
            load_scenario(p)

    def test_wrong_schema(self):
        doc = cross_doc()
        doc["schema"] = 2
        with pytest.raises(ScenarioError, match="schema"):
            parse_scenario(doc)

    def test_demand_proportional_to_lanes(self):
        doc = cross_doc(rate=0.1, overrides={"n_in": {"lanes": 2}}, factor={"e_in": 2.0})
        p = parse_scenario(doc).demand.probabilities
        assert p["n_in"] == pytest.approx(0.2)
        assert p["s_in"] == pytest.approx(0.3)
        assert p["e_in"] == pytest.approx(0.6)

    def test_demand_clamped(self):
        p = parse_scenario(cross_doc(rate=0.5)).demand.probabilities
        assert max(p.values()) == 1.0

    def test_explicit_routes_must_sum_to_one(self):
        doc = cross_doc()
        doc["routes"] = [{"edges": ["e_in", "w_out"], "weight": 0.7}]
        with pytest.raises(ScenarioError, match="sum"):
            parse_scenario(doc)


class TestEnumerate:
    def test_four_way_has_twelve(self, cross):
        routes = enumerate_routes(cross.network, 2)
        assert len(routes) == 12
        assert [r.edges for r in routes] == brute_force_routes(cross.network, 2)

    def test_no_uturns(self, cross):
        net = cross.network
        for r in enumerate_routes(net, 2):
            assert not net.is_uturn(*r.edges)

    def test_corridor_single_route(self):
        sc = parse_scenario(corridor_doc(2))
        assert [r.edges for r in enumerate_routes(sc.network, 5)] == [("e0", "e1")]

    def test_max_len_one(self, cross):
        assert enumerate_routes(cross.network, 1) == []

    def test_arterial_matches_brute_force(self):
        net = load_scenario("arterial_3").network
        assert [r.edges for r in enumerate_routes(net, 4)] == brute_force_routes(net, 4)

    def test_stable_serialization(self):
        net = load_scenario("arterial_3").network
        dump = lambda: json.dumps([r.edges for r in enumerate_routes(net, 5)])
        assert dump() == dump()


class TestTurns:
    def test_straight(self, cross):
        assert turn_count(["e_in", "w_out"], cross.network) == 0

    def test_left_turn(self, cross):
        net = cross.network
        assert turn_count(["e_in", "s_out"], net) == 1
        assert net.turn_angle("e_in", "s_out") == pytest.approx(90.0)

    def test_two_turns(self):
        net = load_scenario("arterial_3").network
        per_junction = [abs(net.turn_angle(a, b)) > 30 for a, b in (("n1_in", "i1_i2"), ("i1_i2", "n2_out"))]
        assert turn_count(["n1_in", "i1_i2", "n2_out"], net) == sum(per_junction) == 2

    def test_slight_bend_is_not_a_turn(self):
        doc = corridor_doc(2)
        doc["nodes"][2]["y"] = 100.0 * math.tan(math.radians(20))
        net = parse_scenario(doc).network
        assert turn_count(["e0", "e1"], net) == 0


def _routes(turns, entry="a"):
    return [Route((entry, f"x{i}"), t) for i, t in enumerate(turns)]


class TestWeights:
    def test_hand_example(self):
        w = [r.weight for r in weight_routes(_routes([0, 1, 1]))]
        assert w == pytest.approx([0.5, 0.25, 0.25])

    def test_single_route(self):
        assert weight_routes(_routes([3]))[0].weight == 1.0

    def test_symmetric(self):
        assert [r.weight for r in weight_routes(_routes([0, 0]))] == [0.5, 0.5]

    def test_groups_are_separate(self):
        rs = weight_routes(_routes([0, 1], "a") + _routes([2], "b"))
        assert [r.weight for r in rs] == pytest.approx([2 / 3, 1 / 3, 1.0])

    @given(st.lists(st.integers(0, 6), min_size=1, max_size=12))
    def test_group_sums_to_one(self, turns):
        assert math.fsum(r.weight for r in weight_routes(_routes(turns))) == pytest.approx(1.0, abs=1e-9)

    @given(st.lists(st.integers(0, 6), min_size=1, max_size=8))
    def test_duplicate_keeps_normalization(self, turns):
        base = weight_routes(_routes(turns))
        dup = weight_routes(_routes(turns + [turns[0]]))
        assert math.fsum(r.weight for r in dup) == pytest.approx(1.0, abs=1e-9)
        # relative masses are unchanged by duplication
        for a, b in zip(base, dup):
            assert a.weight / base[0].weight == pytest.approx(b.weight / dup[0].weight)

    @given(st.lists(st.integers(0, 5), min_size=2, max_size=8), st.integers(0, 7))
    def test_extra_turn_lowers_weight(self, turns, i):
        i %= len(turns)
        more = list(turns)
        more[i] += 1
        assert weight_routes(_routes(more))[i].weight < weight_routes(_routes(turns))[i].weight

    @pytest.mark.parametrize("name", BUNDLED)
    def test_bundled_groups_sum_to_one(self, name):
        sc = load_scenario(name)
        for entry in sc.network.entry_edges():
            assert math.fsum(r.weight for r in sc.routes_from(entry)) == pytest.approx(1.0, abs=1e-9)
