"""Prediction quality metrics.

The headline metric is per-quantity normalized squared error: for one sample
and one quantity (bus voltages, bus angles, slack P, slack Q),
``NSE = ||pred - truth||^2 / ||truth||^2``, then averaged over samples. A
sample whose truth vector is exactly zero falls back to the un-normalized
squared error and is flagged in the report rather than dividing by zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import Sample, dataset_hash
from .graph import build_graph, targets_from_solution
from .model import ModelConfig, Params, predict

QUANTITIES = ("v_mag", "v_ang", "slack_p", "slack_q")


def nse(pred: np.ndarray, truth: np.ndarray) -> tuple[float, bool]:
    """Normalized squared error and whether the zero-truth fallback fired."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    err = float(np.sum((pred - truth) ** 2))
    denom = float(np.sum(truth * truth))
    if denom == 0.0:
        return err, True
    return err / denom, False


@dataclass(frozen=True)
class MetricsReport:
    n_samples: int
    mean_nse: dict            # quantity -> mean over samples
    total_nse: float          # mean of the per-quantity means
    per_sample: dict          # quantity -> list of per-sample values
    fallbacks: tuple          # "sample {i}: {quantity}" notes
    abs_err_v: tuple          # per-bus mean |v error|
    abs_err_ang: tuple        # per-bus mean |angle error|
    dataset_sha256: str

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "mean_nse": {k: self.mean_nse[k] for k in QUANTITIES},
            "total_nse": self.total_nse,
            "per_sample": {k: list(self.per_sample[k]) for k in QUANTITIES},
            "fallbacks": list(self.fallbacks),
            "abs_err_v": list(self.abs_err_v),
            "abs_err_ang": list(self.abs_err_ang),
            "dataset_sha256": self.dataset_sha256,
        }

    @staticmethod
    def from_dict(data: dict) -> "MetricsReport":
        return MetricsReport(
            n_samples=int(data["n_samples"]),
            mean_nse=dict(data["mean_nse"]),
            total_nse=float(data["total_nse"]),
            per_sample={k: list(v) for k, v in data["per_sample"].items()},
            fallbacks=tuple(data["fallbacks"]),
            abs_err_v=tuple(data["abs_err_v"]),
            abs_err_ang=tuple(data["abs_err_ang"]),
            dataset_sha256=str(data["dataset_sha256"]),
        )


def evaluate(params: Params, model_cfg: ModelConfig,
             samples: Sequence[Sample]) -> MetricsReport:
    samples = list(samples)
    if not samples:
        raise ValueError("cannot evaluate on an empty dataset")
    per_sample: dict[str, list[float]] = {q: [] for q in QUANTITIES}
    fallbacks: list[str] = []
    abs_v_sum = None
    abs_a_sum = None

    for i, sample in enumerate(samples):
        graph = build_graph(sample.case)
        y_bus, y_slack = targets_from_solution(sample.case, sample.solution)
        pred_bus, pred_slack = predict(params, graph, model_cfg)
        pairs = {
            "v_mag": (pred_bus[:, 0], y_bus[:, 0]),
            "v_ang": (pred_bus[:, 1], y_bus[:, 1]),
            "slack_p": (pred_slack[:, 0], y_slack[:, 0]),
            "slack_q": (pred_slack[:, 1], y_slack[:, 1]),
        }
        for quantity, (p, t) in pairs.items():
            value, fell_back = nse(p, t)
            per_sample[quantity].append(value)
            if fell_back:
                fallbacks.append(f"sample {i}: {quantity}")
        dv = np.abs(pred_bus[:, 0] - y_bus[:, 0])
        da = np.abs(pred_bus[:, 1] - y_bus[:, 1])
        abs_v_sum = dv if abs_v_sum is None else abs_v_sum + dv
        abs_a_sum = da if abs_a_sum is None else abs_a_sum + da

    mean_nse = {q: float(np.mean(per_sample[q])) for q in QUANTITIES}
    return MetricsReport(
        n_samples=len(samples),
        mean_nse=mean_nse,
        total_nse=float(np.mean([mean_nse[q] for q in QUANTITIES])),
        per_sample=per_sample,
        fallbacks=tuple(fallbacks),
        abs_err_v=tuple(float(x) for x in abs_v_sum / len(samples)),
        abs_err_ang=tuple(float(x) for x in abs_a_sum / len(samples)),
        dataset_sha256=dataset_hash(samples),
    )
