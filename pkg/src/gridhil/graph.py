"""Typed graph construction from grid cases.

A case maps to four node types (bus, gen, load, slack) connected by a fixed
relation vocabulary: device-to-bus attachments, their reverses, line edges in
both directions carrying electrical edge features, and per-type self
relations so every node retains its own state across a message-passing layer.

All quantities are per-unit. Node ordering follows case declaration order,
so two structurally equal cases produce identical graphs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import GridCase
from .powerflow import PfSolution

BUS, GEN, LOAD, SLACK = "bus", "gen", "load", "slack"
NODE_TYPES = (BUS, GEN, LOAD, SLACK)

# Input feature layout per node type.
FEATURE_DIMS = {BUS: 3, GEN: 6, LOAD: 2, SLACK: 2}

# Line edges carry [r, x, b_shunt, tap, s_max]; other relations carry none.
EDGE_DIM = 5

RELATION_NAMES = (
    "gen_to_bus", "load_to_bus", "slack_to_bus", "bus_to_bus",
    "bus_to_gen", "bus_to_load", "bus_to_slack",
    "bus_self", "gen_self", "load_self", "slack_self",
)

# (source type, destination type, carries line features) per relation.
RELATION_SCHEMA = {
    "gen_to_bus": (GEN, BUS, False),
    "load_to_bus": (LOAD, BUS, False),
    "slack_to_bus": (SLACK, BUS, False),
    "bus_to_bus": (BUS, BUS, True),
    "bus_to_gen": (BUS, GEN, False),
    "bus_to_load": (BUS, LOAD, False),
    "bus_to_slack": (BUS, SLACK, False),
    "bus_self": (BUS, BUS, False),
    "gen_self": (GEN, GEN, False),
    "load_self": (LOAD, LOAD, False),
    "slack_self": (SLACK, SLACK, False),
}


@dataclass(frozen=True)
class Relation:
    """Directed typed edge set; indices address per-type node rows."""

    name: str
    src_type: str
    dst_type: str
    src_index: np.ndarray
    dst_index: np.ndarray
    edge_feats: np.ndarray | None = None

    @property
    def num_edges(self) -> int:
        return int(self.src_index.shape[0])


@dataclass(frozen=True)
class HeteroGraph:
    """Per-type feature matrices plus the typed edge sets over them."""

    features: dict[str, np.ndarray]
    relations: tuple[Relation, ...]

    def num_nodes(self, node_type: str) -> int:
        return int(self.features[node_type].shape[0])

    def relation(self, name: str) -> Relation:
        for rel in self.relations:
            if rel.name == name:
                return rel
        raise KeyError(f"no relation named '{name}'")


def _idx(values) -> np.ndarray:
    return np.asarray(values, dtype=np.intp).reshape(-1)


def build_graph(case: GridCase) -> HeteroGraph:
    """Typed graph for one case. Generators at the slack bus become the
    slack node; remaining generators become gen nodes."""
    bus_pos = {b.id: i for i, b in enumerate(case.buses)}
    gens = [g for g in case.generators if g.bus != case.slack.bus]

    feats = {
        BUS: np.array([[b.v_min, b.v_max, 1.0] for b in case.buses],
                      dtype=np.float64).reshape(len(case.buses), FEATURE_DIMS[BUS]),
        GEN: np.array([[g.p_set, g.v_set, g.p_min, g.p_max, g.q_min, g.q_max]
                       for g in gens],
                      dtype=np.float64).reshape(len(gens), FEATURE_DIMS[GEN]),
        LOAD: np.array([[ld.p, ld.q] for ld in case.loads],
                       dtype=np.float64).reshape(len(case.loads), FEATURE_DIMS[LOAD]),
        SLACK: np.array([[case.slack.v_set, case.slack.angle]],
                        dtype=np.float64),
    }

    gen_bus = _idx([bus_pos[g.bus] for g in gens])
    load_bus = _idx([bus_pos[ld.bus] for ld in case.loads])
    slack_bus = _idx([bus_pos[case.slack.bus]])

    # Each line contributes a forward and a reverse directed edge, adjacent
    # in edge order, both carrying the same electrical features.
    line_src, line_dst, line_feats = [], [], []
    for ln in case.lines:
        f, t = bus_pos[ln.from_bus], bus_pos[ln.to_bus]
        row = [ln.r, ln.x, ln.b_shunt, ln.tap, ln.s_max]
        line_src += [f, t]
        line_dst += [t, f]
        line_feats += [row, row]
    line_feats_arr = np.array(line_feats, dtype=np.float64).reshape(
        len(line_src), EDGE_DIM)

    n_bus, n_gen = len(case.buses), len(gens)
    n_load, n_slack = len(case.loads), 1
    arange = np.arange

    relations = (
        Relation("gen_to_bus", GEN, BUS, arange(n_gen), gen_bus),
        Relation("load_to_bus", LOAD, BUS, arange(n_load), load_bus),
        Relation("slack_to_bus", SLACK, BUS, arange(n_slack), slack_bus),
        Relation("bus_to_bus", BUS, BUS, _idx(line_src), _idx(line_dst),
                 line_feats_arr),
        Relation("bus_to_gen", BUS, GEN, gen_bus, arange(n_gen)),
        Relation("bus_to_load", BUS, LOAD, load_bus, arange(n_load)),
        Relation("bus_to_slack", BUS, SLACK, slack_bus, arange(n_slack)),
        Relation("bus_self", BUS, BUS, arange(n_bus), arange(n_bus)),
        Relation("gen_self", GEN, GEN, arange(n_gen), arange(n_gen)),
        Relation("load_self", LOAD, LOAD, arange(n_load), arange(n_load)),
        Relation("slack_self", SLACK, SLACK, arange(n_slack), arange(n_slack)),
    )
    return HeteroGraph(features=feats, relations=relations)


def targets_from_solution(case: GridCase,
                          sol: PfSolution) -> tuple[np.ndarray, np.ndarray]:
    """Regression targets: per-bus (v_mag, angle relative to slack) and the
    slack node's (p, q)."""
    v_ang = np.asarray(sol.v_ang, dtype=np.float64)
    y_bus = np.column_stack([np.asarray(sol.v_mag, dtype=np.float64),
                             v_ang - case.slack.angle])
    y_slack = np.array([[sol.slack_p, sol.slack_q]], dtype=np.float64)
    return y_bus, y_slack


def disjoint_union(graphs) -> HeteroGraph:
    """Stack graphs into one block-diagonal graph (indices offset per type).

    Attention normalizes per destination node, so a model pass over the
    union equals independent passes over the parts.
    """
    graphs = list(graphs)
    if not graphs:
        raise ValueError("cannot union zero graphs")
    names = [tuple(r.name for r in g.relations) for g in graphs]
    if any(n != names[0] for n in names[1:]):
        raise ValueError("graphs have mismatched relation sets")

    features = {
        t: np.concatenate([g.features[t] for g in graphs], axis=0)
        for t in NODE_TYPES
    }

    relations = []
    for pos, name in enumerate(names[0]):
        parts = [g.relations[pos] for g in graphs]
        first = parts[0]
        src_chunks, dst_chunks, feat_chunks = [], [], []
        src_off = dst_off = 0
        for g, rel in zip(graphs, parts):
            src_chunks.append(rel.src_index + src_off)
            dst_chunks.append(rel.dst_index + dst_off)
            if rel.edge_feats is not None:
                feat_chunks.append(rel.edge_feats)
            src_off += g.num_nodes(rel.src_type)
            dst_off += g.num_nodes(rel.dst_type)
        relations.append(Relation(
            name=name,
            src_type=first.src_type,
            dst_type=first.dst_type,
            src_index=np.concatenate(src_chunks),
            dst_index=np.concatenate(dst_chunks),
            edge_feats=(np.concatenate(feat_chunks, axis=0)
                        if feat_chunks else None),
        ))
    return HeteroGraph(features=features, relations=tuple(relations))
