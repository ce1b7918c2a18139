"""End-to-end experiment recipes.

Scenario 1: train on synthetic samples, evaluate on measured (hardware)
samples. Scenario 2: pretrain on the same synthetic data, fine-tune on a
measured set disjoint from the test set, evaluate on the same test set.
Comparing the two isolates what fine-tuning on hardware measurements buys.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

from .dataset import Sample, dataset_hash, sample_hash
from .losses import LossConfig
from .metrics import MetricsReport, evaluate
from .model import ModelConfig, Params
from .training import LogFn, TrainConfig, TrainResult, finetune, train


class ScenarioError(ValueError):
    """Experiment wiring violates a protocol invariant."""


@dataclass(frozen=True)
class ScenarioOutcome:
    params: Params
    train_result: TrainResult
    metrics: MetricsReport
    report: dict


def _configs_dict(model_cfg: ModelConfig, train_cfg: TrainConfig,
                  loss_cfg: LossConfig) -> dict:
    return {
        "model": asdict(model_cfg),
        "train": {**asdict(train_cfg),
                  "lr_milestones": list(train_cfg.lr_milestones)},
        "loss": {"lambda_bus": loss_cfg.lambda_bus,
                 "lambda_slack": loss_cfg.lambda_slack,
                 "constraint_weights": dict(loss_cfg.constraint_weights)},
    }


def check_disjoint(a: Sequence[Sample], b: Sequence[Sample],
                   label_a: str, label_b: str) -> None:
    overlap = {sample_hash(s) for s in a} & {sample_hash(s) for s in b}
    if overlap:
        raise ScenarioError(
            f"{label_a} and {label_b} share {len(overlap)} sample(s); "
            f"they must be disjoint")


def run_scenario_1(train_samples: Sequence[Sample],
                   test_samples: Sequence[Sample],
                   model_cfg: ModelConfig, train_cfg: TrainConfig,
                   loss_cfg: LossConfig,
                   log: LogFn | None = None) -> ScenarioOutcome:
    check_disjoint(train_samples, test_samples, "training set", "test set")
    result = train(train_samples, model_cfg, train_cfg, loss_cfg, log=log)
    metrics = evaluate(result.params, model_cfg, test_samples)
    report = {
        "scenario": 1,
        "configs": _configs_dict(model_cfg, train_cfg, loss_cfg),
        "train_sha256": dataset_hash(train_samples),
        "test_sha256": dataset_hash(test_samples),
        "epochs": len(result.history),
        "first_epoch_loss": (result.history[0].loss
                             if result.history else None),
        "final_loss": (result.history[-1].loss
                       if result.history else None),
        "metrics": metrics.to_dict(),
    }
    return ScenarioOutcome(params=result.params, train_result=result,
                           metrics=metrics, report=report)


def run_scenario_2(pretrain_samples: Sequence[Sample],
                   finetune_samples: Sequence[Sample],
                   test_samples: Sequence[Sample],
                   model_cfg: ModelConfig, train_cfg: TrainConfig,
                   loss_cfg: LossConfig,
                   finetune_cfg: TrainConfig | None = None,
                   pretrained: Params | None = None,
                   expected_test_sha256: str | None = None,
                   log: LogFn | None = None) -> ScenarioOutcome:
    """Pretrain (or reuse ``pretrained``), fine-tune, evaluate.

    ``expected_test_sha256`` pins the test set to the one a baseline run
    used, so the two scenarios stay comparable.
    """
    check_disjoint(finetune_samples, test_samples,
                   "fine-tune set", "test set")
    check_disjoint(pretrain_samples, test_samples,
                   "pretraining set", "test set")
    test_sha = dataset_hash(test_samples)
    if expected_test_sha256 is not None and test_sha != expected_test_sha256:
        raise ScenarioError(
            "test set differs from the baseline scenario's test set "
            f"({test_sha[:12]} != {expected_test_sha256[:12]})")

    if pretrained is None:
        pre = train(pretrain_samples, model_cfg, train_cfg, loss_cfg, log=log)
        pretrained_params = pre.params
    else:
        pretrained_params = pretrained
    result = finetune(pretrained_params, finetune_samples, model_cfg,
                      loss_cfg, train_cfg=finetune_cfg, log=log)
    metrics = evaluate(result.params, model_cfg, test_samples)
    ft_cfg = finetune_cfg
    report = {
        "scenario": 2,
        "configs": _configs_dict(model_cfg, train_cfg, loss_cfg),
        "finetune": (None if ft_cfg is None else
                     {**asdict(ft_cfg),
                      "lr_milestones": list(ft_cfg.lr_milestones)}),
        "pretrain_sha256": dataset_hash(pretrain_samples),
        "finetune_sha256": dataset_hash(finetune_samples),
        "test_sha256": test_sha,
        "epochs": len(result.history),
        "final_loss": (result.history[-1].loss
                       if result.history else None),
        "metrics": metrics.to_dict(),
    }
    return ScenarioOutcome(params=result.params, train_result=result,
                           metrics=metrics, report=report)


def compare_reports(scenario1: dict, scenario2: dict) -> dict:
    """Head-to-head summary; requires both reports to share a test set."""
    if scenario1["test_sha256"] != scenario2["test_sha256"]:
        raise ScenarioError("reports evaluated on different test sets")
    nse1 = scenario1["metrics"]["total_nse"]
    nse2 = scenario2["metrics"]["total_nse"]
    return {
        "test_sha256": scenario1["test_sha256"],
        "scenario1_total_nse": nse1,
        "scenario2_total_nse": nse2,
        "finetune_improves": nse2 < nse1,
        "relative_change": (nse2 - nse1) / nse1 if nse1 > 0 else None,
    }
