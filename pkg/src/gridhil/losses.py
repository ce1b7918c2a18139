"""Supervised loss plus soft operating-constraint penalties.

The objective is a weighted sum of per-bus and slack-node regression errors
and squared hinge penalties on operating limits evaluated on the *predicted*
quantities: bus voltage bands, slack generator capability (P and Q), and
apparent-power line ratings computed from the predicted voltage phasors
through the branch admittances. Everything is expressed with tape primitives
so the penalties shape the gradient, not just the reported loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .dataset import Sample
from .graph import HeteroGraph, build_graph, disjoint_union, targets_from_solution
from .grid import GridCase
from .model import Prediction

CONSTRAINT_KINDS = (
    "bus_voltage_band",
    "gen_p_capacity",
    "gen_q_capacity",
    "line_flow_limit",
)

DEFAULT_CONSTRAINT_WEIGHT = 0.1

# Keeps sqrt differentiable when a predicted flow is exactly zero.
_FLOW_EPS = 1e-24


@dataclass(frozen=True)
class LossConfig:
    lambda_bus: float = 1.0
    lambda_slack: float = 1.0
    constraint_weights: dict = field(default_factory=dict)

    def __post_init__(self):
        unknown = sorted(set(self.constraint_weights) - set(CONSTRAINT_KINDS))
        if unknown:
            raise ValueError(f"unknown constraint kinds: {unknown}")
        weights = {k: float(self.constraint_weights.get(k, DEFAULT_CONSTRAINT_WEIGHT))
                   for k in CONSTRAINT_KINDS}
        bad = sorted(k for k, w in weights.items() if w < 0)
        if bad or self.lambda_bus < 0 or self.lambda_slack < 0:
            raise ValueError("loss weights must be non-negative")
        object.__setattr__(self, "constraint_weights", weights)


@dataclass(frozen=True)
class ConstraintSet:
    """Bounds and admittance data needed to score predictions physically.

    Line data is laid out one row per metered line end (2 rows per line):
    the flow at an end is V_own * conj(y_own V_own + y_other V_other).
    """

    v_lo: np.ndarray               # (n_bus, 1)
    v_hi: np.ndarray               # (n_bus, 1)
    slack_p_bounds: np.ndarray | None   # (n_slack, 2) [lo, hi]
    slack_q_bounds: np.ndarray | None
    end_own: np.ndarray            # (2L,) bus row of the metered end
    end_other: np.ndarray          # (2L,) bus row of the far end
    g_own: np.ndarray              # (2L, 1)
    b_own: np.ndarray
    g_other: np.ndarray
    b_other: np.ndarray
    s_max: np.ndarray              # (2L, 1)


def resolve_constraints(case: GridCase) -> ConstraintSet:
    pos = case.bus_index()
    v_lo = np.array([[b.v_min] for b in case.buses], dtype=np.float64)
    v_hi = np.array([[b.v_max] for b in case.buses], dtype=np.float64)

    slack_gens = [g for g in case.generators if g.bus == case.slack.bus]
    if slack_gens:
        p_bounds = np.array([[sum(g.p_min for g in slack_gens),
                              sum(g.p_max for g in slack_gens)]])
        q_bounds = np.array([[sum(g.q_min for g in slack_gens),
                              sum(g.q_max for g in slack_gens)]])
    else:
        p_bounds = q_bounds = None

    own, other = [], []
    g_own, b_own, g_other, b_other, s_max = [], [], [], [], []
    for ln in case.lines:
        y = 1.0 / complex(ln.r, ln.x)
        shunt = complex(0.0, ln.b_shunt / 2.0)
        y_ff = (y + shunt) / (ln.tap * ln.tap)
        y_tt = y + shunt
        y_ft = -y / ln.tap
        f, t = pos[ln.from_bus], pos[ln.to_bus]
        for own_bus, other_bus, y_self in ((f, t, y_ff), (t, f, y_tt)):
            own.append(own_bus)
            other.append(other_bus)
            g_own.append(y_self.real)
            b_own.append(y_self.imag)
            g_other.append(y_ft.real)
            b_other.append(y_ft.imag)
            s_max.append(ln.s_max)

    def col(values):
        return np.array(values, dtype=np.float64).reshape(-1, 1)

    return ConstraintSet(
        v_lo=v_lo, v_hi=v_hi,
        slack_p_bounds=p_bounds, slack_q_bounds=q_bounds,
        end_own=np.asarray(own, dtype=np.intp),
        end_other=np.asarray(other, dtype=np.intp),
        g_own=col(g_own), b_own=col(b_own),
        g_other=col(g_other), b_other=col(b_other),
        s_max=col(s_max),
    )


@dataclass(frozen=True)
class TrainingExample:
    """One sample lowered to model inputs, targets, and constraint data."""

    graph: HeteroGraph
    y_bus: np.ndarray
    y_slack: np.ndarray
    constraints: ConstraintSet

    @staticmethod
    def from_sample(sample: Sample) -> "TrainingExample":
        graph = build_graph(sample.case)
        y_bus, y_slack = targets_from_solution(sample.case, sample.solution)
        return TrainingExample(graph=graph, y_bus=y_bus, y_slack=y_slack,
                               constraints=resolve_constraints(sample.case))


@dataclass(frozen=True)
class Batch:
    graph: HeteroGraph
    y_bus: np.ndarray
    y_slack: np.ndarray
    constraints: ConstraintSet
    size: int


def _merge_constraints(examples: Sequence[TrainingExample]) -> ConstraintSet:
    csets = [ex.constraints for ex in examples]
    has_p = [c.slack_p_bounds is not None for c in csets]
    if any(has_p) != all(has_p):
        raise ValueError("mixed presence of slack capability bounds in batch")

    own, other = [], []
    offset = 0
    for ex in examples:
        own.append(ex.constraints.end_own + offset)
        other.append(ex.constraints.end_other + offset)
        offset += ex.graph.num_nodes("bus")

    def stack(attr):
        return np.concatenate([getattr(c, attr) for c in csets], axis=0)

    return ConstraintSet(
        v_lo=stack("v_lo"), v_hi=stack("v_hi"),
        slack_p_bounds=stack("slack_p_bounds") if all(has_p) else None,
        slack_q_bounds=stack("slack_q_bounds") if all(has_p) else None,
        end_own=np.concatenate(own), end_other=np.concatenate(other),
        g_own=stack("g_own"), b_own=stack("b_own"),
        g_other=stack("g_other"), b_other=stack("b_other"),
        s_max=stack("s_max"),
    )


def assemble_batch(examples: Sequence[TrainingExample]) -> Batch:
    """Block-diagonal union; exact because attention is per-destination."""
    examples = list(examples)
    if not examples:
        raise ValueError("cannot assemble an empty batch")
    return Batch(
        graph=disjoint_union([ex.graph for ex in examples]),
        y_bus=np.concatenate([ex.y_bus for ex in examples], axis=0),
        y_slack=np.concatenate([ex.y_slack for ex in examples], axis=0),
        constraints=_merge_constraints(examples),
        size=len(examples),
    )


def _column(t: Tensor, j: int, tape: Tape) -> Tensor:
    selector = np.zeros((2, 1))
    selector[j, 0] = 1.0
    return ad.matmul(t, tape.constant(selector))


def ctrloss(kind: str, pred: Prediction, cset: ConstraintSet,
            tape: Tape) -> Tensor:
    """Summed squared violation for one constraint kind (scalar tensor)."""
    if kind == "bus_voltage_band":
        v = _column(pred.y_bus, 0, tape)
        return ad.sum_all(ad.hinge_sq(v, cset.v_lo, cset.v_hi))

    if kind == "gen_p_capacity":
        if cset.slack_p_bounds is None:
            return tape.constant(0.0)
        p = _column(pred.y_slack, 0, tape)
        return ad.sum_all(ad.hinge_sq(p, cset.slack_p_bounds[:, :1],
                                      cset.slack_p_bounds[:, 1:]))

    if kind == "gen_q_capacity":
        if cset.slack_q_bounds is None:
            return tape.constant(0.0)
        q = _column(pred.y_slack, 1, tape)
        return ad.sum_all(ad.hinge_sq(q, cset.slack_q_bounds[:, :1],
                                      cset.slack_q_bounds[:, 1:]))

    if kind == "line_flow_limit":
        return _line_flow_penalty(pred, cset, tape)

    raise ValueError(f"unknown constraint kind '{kind}'")


def _line_flow_penalty(pred: Prediction, cset: ConstraintSet,
                       tape: Tape) -> Tensor:
    if cset.end_own.size == 0:
        return tape.constant(0.0)
    v = _column(pred.y_bus, 0, tape)
    th = _column(pred.y_bus, 1, tape)

    def phasor(rows):
        vr = ad.gather_rows(v, rows)
        tr = ad.gather_rows(th, rows)
        return ad.mul(vr, ad.cos(tr)), ad.mul(vr, ad.sin(tr))

    e_own, f_own = phasor(cset.end_own)
    e_oth, f_oth = phasor(cset.end_other)

    g_own = tape.constant(cset.g_own)
    b_own = tape.constant(cset.b_own)
    g_oth = tape.constant(cset.g_other)
    b_oth = tape.constant(cset.b_other)

    # I = y_own V_own + y_other V_other, in rectangular coordinates.
    i_re = ad.add(ad.sub(ad.mul(g_own, e_own), ad.mul(b_own, f_own)),
                  ad.sub(ad.mul(g_oth, e_oth), ad.mul(b_oth, f_oth)))
    i_im = ad.add(ad.add(ad.mul(g_own, f_own), ad.mul(b_own, e_own)),
                  ad.add(ad.mul(g_oth, f_oth), ad.mul(b_oth, e_oth)))

    # S = V conj(I) at the metered end.
    p_flow = ad.add(ad.mul(e_own, i_re), ad.mul(f_own, i_im))
    q_flow = ad.sub(ad.mul(f_own, i_re), ad.mul(e_own, i_im))
    s2 = ad.add(ad.mul(p_flow, p_flow), ad.mul(q_flow, q_flow))
    s = ad.sqrt(ad.add(s2, tape.constant(_FLOW_EPS)))
    return ad.sum_all(ad.hinge_sq(s, 0.0, cset.s_max))


def total_loss(pred: Prediction, batch: Batch, config: LossConfig,
               tape: Tape) -> tuple[Tensor, dict[str, float]]:
    """Weighted objective and a per-term breakdown (floats, for logging).

    Supervised terms are means over elements; constraint penalties are
    means over batch samples of per-sample violation sums.
    """
    sup_bus = ad.mse(pred.y_bus, tape.constant(batch.y_bus))
    sup_slack = ad.mse(pred.y_slack, tape.constant(batch.y_slack))
    loss = ad.add(ad.scale(sup_bus, config.lambda_bus),
                  ad.scale(sup_slack, config.lambda_slack))
    parts = {
        "supervised_bus": float(sup_bus.values),
        "supervised_slack": float(sup_slack.values),
    }
    for kind in CONSTRAINT_KINDS:
        weight = config.constraint_weights[kind]
        penalty = ctrloss(kind, pred, batch.constraints, tape)
        mean_penalty = ad.scale(penalty, 1.0 / batch.size)
        parts[kind] = float(mean_penalty.values)
        if weight != 0.0:
            loss = ad.add(loss, ad.scale(mean_penalty, weight))
    parts["total"] = float(loss.values)
    return loss, parts
