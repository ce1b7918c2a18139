"""Case-to-graph lowering: node rows, relation wiring, targets, unions."""

import numpy as np
import pytest

from gridhil.dataset import MutationConfig, generate
from gridhil.graph import (EDGE_DIM, FEATURE_DIMS, NODE_TYPES, RELATION_NAMES,
                           RELATION_SCHEMA, build_graph, disjoint_union,
                           targets_from_solution)
from gridhil.grid import SlackRef, load_bundled_case
from gridhil.powerflow import solve_pf
from support import random_case, small_case
import dataclasses


@pytest.fixture(scope="module")
def g9():
    return build_graph(load_bundled_case())


class TestSchema:
    def test_every_relation_is_declared(self):
        assert set(RELATION_SCHEMA) == set(RELATION_NAMES)
        for name, (src, dst, feats) in RELATION_SCHEMA.items():
            assert src in NODE_TYPES and dst in NODE_TYPES
            assert feats == (name == "bus_to_bus")

    def test_relation_order_is_fixed(self, g9):
        assert tuple(r.name for r in g9.relations) == RELATION_NAMES


class TestBuild:
    def test_node_counts(self, g9):
        assert g9.num_nodes("bus") == 9
        assert g9.num_nodes("gen") == 2  # the slack-bus machine moves over
        assert g9.num_nodes("load") == 3
        assert g9.num_nodes("slack") == 1

    def test_feature_shapes(self, g9):
        for t in NODE_TYPES:
            assert g9.features[t].shape[1] == FEATURE_DIMS[t]

    def test_feature_content(self):
        case = small_case()
        g = build_graph(case)
        assert np.array_equal(g.features["bus"][0], [0.9, 1.1, 1.0])
        assert np.array_equal(g.features["load"],
                              [[0.3, 0.1], [0.6, 0.2]])
        assert np.array_equal(g.features["slack"][0], [1.02, 0.0])
        pv = case.generators[1]
        assert np.array_equal(
            g.features["gen"][0],
            [pv.p_set, pv.v_set, pv.p_min, pv.p_max, pv.q_min, pv.q_max])

    def test_line_edges_come_in_adjacent_pairs(self, g9):
        case = load_bundled_case()
        rel = g9.relation("bus_to_bus")
        pos = case.bus_index()
        assert rel.num_edges == 2 * len(case.lines)
        assert rel.edge_feats.shape == (rel.num_edges, EDGE_DIM)
        for k, ln in enumerate(case.lines):
            f, t = pos[ln.from_bus], pos[ln.to_bus]
            assert (rel.src_index[2 * k], rel.dst_index[2 * k]) == (f, t)
            assert (rel.src_index[2 * k + 1], rel.dst_index[2 * k + 1]) == (t, f)
            row = [ln.r, ln.x, ln.b_shunt, ln.tap, ln.s_max]
            assert np.array_equal(rel.edge_feats[2 * k], row)
            assert np.array_equal(rel.edge_feats[2 * k + 1], row)

    def test_attachments_are_mutual(self, g9):
        fwd = g9.relation("gen_to_bus")
        rev = g9.relation("bus_to_gen")
        assert np.array_equal(fwd.src_index, rev.dst_index)
        assert np.array_equal(fwd.dst_index, rev.src_index)
        fwd = g9.relation("load_to_bus")
        rev = g9.relation("bus_to_load")
        assert np.array_equal(fwd.src_index, rev.dst_index)
        assert np.array_equal(fwd.dst_index, rev.src_index)

    def test_self_relations_are_identities(self, g9):
        for t in NODE_TYPES:
            rel = g9.relation(f"{t}_self")
            n = g9.num_nodes(t)
            assert np.array_equal(rel.src_index, np.arange(n))
            assert np.array_equal(rel.dst_index, np.arange(n))
            assert rel.edge_feats is None

    def test_indices_in_range_on_random_cases(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            case = random_case(rng)
            g = build_graph(case)
            for rel in g.relations:
                assert rel.src_index.shape == rel.dst_index.shape
                if rel.num_edges:
                    assert rel.src_index.min() >= 0
                    assert rel.src_index.max() < g.num_nodes(rel.src_type)
                    assert rel.dst_index.max() < g.num_nodes(rel.dst_type)

    def test_unknown_relation_lookup(self, g9):
        with pytest.raises(KeyError):
            g9.relation("bus_to_nowhere")


class TestTargets:
    def test_shapes_and_values(self):
        case = load_bundled_case()
        sol = solve_pf(case)
        y_bus, y_slack = targets_from_solution(case, sol)
        assert y_bus.shape == (9, 2)
        assert y_slack.shape == (1, 2)
        assert np.array_equal(y_bus[:, 0], sol.v_mag)
        assert np.array_equal(y_bus[:, 1], sol.v_ang)
        assert y_slack[0, 0] == sol.slack_p
        assert y_slack[0, 1] == sol.slack_q

    def test_angles_are_slack_relative(self):
        case = small_case()
        shifted = dataclasses.replace(
            case, slack=SlackRef(bus=10, v_set=1.02, angle=0.3))
        sol = solve_pf(shifted)
        y_bus, _ = targets_from_solution(shifted, sol)
        assert y_bus[0, 1] == pytest.approx(0.0, abs=1e-12)
        base_sol = solve_pf(case)
        base_y, _ = targets_from_solution(case, base_sol)
        # A global reference shift leaves relative angles untouched.
        assert np.allclose(y_bus[:, 1], base_y[:, 1], atol=1e-9)


class TestDisjointUnion:
    def test_counts_and_offsets(self):
        a = build_graph(load_bundled_case())
        b = build_graph(small_case())
        u = disjoint_union([a, b])
        for t in NODE_TYPES:
            assert u.num_nodes(t) == a.num_nodes(t) + b.num_nodes(t)
        rel = u.relation("bus_to_bus")
        ra, rb = a.relation("bus_to_bus"), b.relation("bus_to_bus")
        assert rel.num_edges == ra.num_edges + rb.num_edges
        assert np.array_equal(rel.src_index[:ra.num_edges], ra.src_index)
        assert np.array_equal(rel.src_index[ra.num_edges:],
                              rb.src_index + a.num_nodes("bus"))
        assert np.array_equal(rel.edge_feats,
                              np.concatenate([ra.edge_feats, rb.edge_feats]))

    def test_single_graph_union_is_equivalent(self):
        g = build_graph(small_case())
        u = disjoint_union([g])
        for t in NODE_TYPES:
            assert np.array_equal(u.features[t], g.features[t])

    def test_batch_from_generated_samples(self):
        base = load_bundled_case()
        samples = generate(base, 3, MutationConfig(rng_seed=1)).samples
        graphs = [build_graph(s.case) for s in samples]
        u = disjoint_union(graphs)
        assert u.num_nodes("bus") == 27
        assert u.relation("slack_to_bus").num_edges == 3

    def test_empty_union_rejected(self):
        with pytest.raises(ValueError):
            disjoint_union([])
