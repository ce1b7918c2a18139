"""Relation-typed graph attention network over the heterogeneous grid graph.

Each layer transforms every relation independently: source and destination
rows get their own projections, a shared attention vector scores each edge
from the concatenated projected pair, scores normalize per destination node
within the relation, and the attended source messages sum over all incoming
relations. Node states pass through ReLU and row-wise L2 normalization
between layers. Two linear heads read out per-bus (v, angle) and the slack
node's (p, q).

Parameters live in a flat ``dict[str, np.ndarray]`` so the optimizer and the
checkpoint format stay trivial.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .graph import (EDGE_DIM, FEATURE_DIMS, NODE_TYPES, RELATION_NAMES,
                    RELATION_SCHEMA, BUS, SLACK, HeteroGraph)

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 64
    layers: int = 2
    leaky_slope: float = 0.2
    init_seed: int = 0

    def __post_init__(self):
        if self.hidden < 1:
            raise ValueError("hidden width must be at least 1")
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if not 0.0 <= self.leaky_slope < 1.0:
            raise ValueError("leaky slope must lie in [0, 1)")


def expected_param_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    """Canonical parameter name -> shape map; also fixes init draw order."""
    shapes: dict[str, tuple[int, int]] = {}
    dims = dict(FEATURE_DIMS)
    for k in range(config.layers):
        for name in RELATION_NAMES:
            src, dst, has_edge = RELATION_SCHEMA[name]
            in_src = dims[src] + (EDGE_DIM if has_edge else 0)
            shapes[f"layer{k}.{name}.w_src"] = (in_src, config.hidden)
            shapes[f"layer{k}.{name}.w_dst"] = (dims[dst], config.hidden)
            shapes[f"layer{k}.{name}.att"] = (2 * config.hidden, 1)
        dims = {t: config.hidden for t in NODE_TYPES}
    shapes["head.bus.w"] = (config.hidden, 2)
    shapes["head.bus.b"] = (1, 2)
    shapes["head.slack.w"] = (config.hidden, 2)
    shapes["head.slack.b"] = (1, 2)
    return shapes


def init_params(config: ModelConfig) -> Params:
    """Glorot-uniform weights, zero biases, reproducible from init_seed."""
    rng = np.random.default_rng(config.init_seed)
    params: Params = {}
    for name, shape in expected_param_shapes(config).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
    return params


def param_count(params: Params) -> int:
    return sum(v.size for v in params.values())


def _validate_params(params: Params, config: ModelConfig) -> None:
    shapes = expected_param_shapes(config)
    missing = sorted(shapes.keys() - params.keys())
    if missing:
        raise ValueError(f"missing parameters: {missing[:4]}...")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ValueError(
                f"parameter '{name}' has shape {params[name].shape}, "
                f"expected {shape}")


@dataclass(frozen=True)
class Prediction:
    """Forward-pass outputs still attached to their tape.

    ``attention`` and ``hidden`` are captured values (keyed by
    'layer{k}.{relation}' and 'layer{k}.{type}') when requested.
    """

    y_bus: Tensor
    y_slack: Tensor
    attention: dict[str, np.ndarray] | None = None
    hidden: dict[str, np.ndarray] | None = None


def forward(params: Params, graph: HeteroGraph, config: ModelConfig,
            tape: Tape, capture: bool = False) -> Prediction:
    _validate_params(params, config)
    p = {name: tape.param(name, params[name])
         for name in expected_param_shapes(config)}
    h = {t: tape.constant(graph.features[t]) for t in NODE_TYPES}
    attention: dict[str, np.ndarray] | None = {} if capture else None
    hidden: dict[str, np.ndarray] | None = {} if capture else None

    for k in range(config.layers):
        agg: dict[str, Tensor | None] = {t: None for t in NODE_TYPES}
        for rel in graph.relations:
            key = f"layer{k}.{rel.name}"
            n_dst = graph.num_nodes(rel.dst_type)
            src_rows = ad.gather_rows(h[rel.src_type], rel.src_index)
            if rel.edge_feats is not None:
                src_rows = ad.concat(src_rows, tape.constant(rel.edge_feats))
            dst_rows = ad.gather_rows(h[rel.dst_type], rel.dst_index)
            msg = ad.matmul(src_rows, p[f"{key}.w_src"])
            anchor = ad.matmul(dst_rows, p[f"{key}.w_dst"])
            scores = ad.leaky_relu(
                ad.matmul(ad.concat(anchor, msg), p[f"{key}.att"]),
                config.leaky_slope)
            alpha = ad.segment_softmax(scores, rel.dst_index, n_dst)
            if attention is not None:
                attention[key] = alpha.values.copy()
            pooled = ad.segment_sum(ad.mul(alpha, msg), rel.dst_index, n_dst)
            held = agg[rel.dst_type]
            agg[rel.dst_type] = pooled if held is None else ad.add(held, pooled)
        h = {t: ad.l2_normalize(ad.relu(agg[t])) for t in NODE_TYPES}
        if hidden is not None:
            for t in NODE_TYPES:
                hidden[f"layer{k}.{t}"] = h[t].values.copy()

    y_bus = ad.add(ad.matmul(h[BUS], p["head.bus.w"]), p["head.bus.b"])
    y_slack = ad.add(ad.matmul(h[SLACK], p["head.slack.w"]), p["head.slack.b"])
    return Prediction(y_bus=y_bus, y_slack=y_slack, attention=attention,
                      hidden=hidden)


def predict(params: Params, graph: HeteroGraph,
            config: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Inference without gradient bookkeeping downstream."""
    pred = forward(params, graph, config, Tape())
    return pred.y_bus.values, pred.y_slack.values


def attention_coefficients(params: Params, graph: HeteroGraph,
                           config: ModelConfig) -> dict[str, np.ndarray]:
    """Per-edge attention weights keyed by 'layer{k}.{relation}'."""
    pred = forward(params, graph, config, Tape(), capture=True)
    assert pred.attention is not None
    return pred.attention


# ---------------------------------------------------------------------------
# Checkpoints: magic, length-prefixed JSON header, raw float64 buffers.
# ---------------------------------------------------------------------------

_MAGIC = b"GHILCKPT\x00\x01"


def save_params(path, params: Params, config: ModelConfig) -> None:
    names = sorted(params.keys())
    header = json.dumps({
        "config": asdict(config),
        "tensors": [[n, list(params[n].shape)] for n in names],
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack(">Q", len(header)))
        fh.write(header)
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())


def load_params(path) -> tuple[Params, ModelConfig]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack(">Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        config = ModelConfig(**header["config"])
        params: Params = {}
        for name, shape in header["tensors"]:
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"{path}: truncated tensor '{name}'")
            params[name] = np.frombuffer(buf, dtype="<f8").astype(
                np.float64).reshape(shape)
        trailing = fh.read(1)
        if trailing:
            raise ValueError(f"{path}: trailing bytes after tensors")
    _validate_params(params, config)
    return params, config
