"""Mini-batch training loop: Adam, stepped LR decay, seeded shuffling.

The loop is deterministic for a fixed (dataset, config, initial parameters)
triple: batch order comes from a dedicated generator seeded by the training
seed, and all arithmetic is straight float64 numpy. A non-finite loss or
gradient aborts with diagnostics instead of training through NaNs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape
from .dataset import Sample
from .losses import LossConfig, TrainingExample, assemble_batch, total_loss
from .model import ModelConfig, Params, forward, init_params

LogFn = Callable[[str], None]


class TrainingDivergedError(RuntimeError):
    """Loss or gradients stopped being finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 128
    lr_start: float = 0.1
    lr_decay: float = 0.3
    lr_milestones: tuple[int, ...] = (250, 375, 450)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 10.0
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr_start <= 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("lr_start must be > 0 and lr_decay in (0, 1]")
        if list(self.lr_milestones) != sorted(set(self.lr_milestones)):
            raise ValueError("lr_milestones must be strictly increasing")
        if any(m < 0 for m in self.lr_milestones):
            raise ValueError("lr_milestones must be non-negative epochs")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0 (0 disables clipping)")


# Fine-tuning reuses the loop with a gentler default schedule.
FINETUNE_DEFAULTS = TrainConfig(epochs=50, lr_start=0.01, lr_milestones=())


def learning_rate(config: TrainConfig, epoch: int) -> float:
    """lr_start * lr_decay ** (milestones passed), milestones in epoch units.

    An epoch counts as past a milestone once epoch >= milestone.
    """
    passed = sum(1 for m in config.lr_milestones if epoch >= m)
    return config.lr_start * config.lr_decay ** passed


class Adam:
    """Standard Adam with bias correction over a flat parameter dict."""

    def __init__(self, params: Params, config: TrainConfig):
        self._b1 = config.beta1
        self._b2 = config.beta2
        self._eps = config.adam_eps
        self._t = 0
        self._m = {k: np.zeros_like(v) for k, v in params.items()}
        self._v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: Params, grads: dict[str, np.ndarray],
             lr: float) -> None:
        self._t += 1
        b1t = 1.0 - self._b1 ** self._t
        b2t = 1.0 - self._b2 ** self._t
        for name, g in grads.items():
            m = self._m[name]
            v = self._v[name]
            m *= self._b1
            m += (1.0 - self._b1) * g
            v *= self._b2
            v += (1.0 - self._b2) * (g * g)
            params[name] = params[name] - lr * (m / b1t) / (
                np.sqrt(v / b2t) + self._eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm.

    Returns the pre-clip norm. max_norm 0 disables clipping.
    """
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for name in grads:
            grads[name] = grads[name] * factor
    return float(total)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    lr: float
    loss: float
    supervised_bus: float
    supervised_slack: float
    constraint: float
    grad_norm: float


@dataclass(frozen=True)
class TrainResult:
    params: Params
    history: tuple[EpochStats, ...] = field(repr=False)

    @property
    def final_loss(self) -> float:
        return self.history[-1].loss if self.history else float("nan")


def _batches(n: int, batch_size: int,
             rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train(samples: Sequence[Sample], model_cfg: ModelConfig,
          train_cfg: TrainConfig, loss_cfg: LossConfig,
          init: Params | None = None,
          log: LogFn | None = None) -> TrainResult:
    """Train from scratch (or from ``init``) and return params + history."""
    samples = list(samples)
    if not samples:
        raise ValueError("training requires at least one sample")
    examples = [TrainingExample.from_sample(s) for s in samples]

    params: Params = {k: v.copy() for k, v in
                      (init if init is not None
                       else init_params(model_cfg)).items()}
    optimizer = Adam(params, train_cfg)
    rng = np.random.default_rng(train_cfg.shuffle_seed)
    history: list[EpochStats] = []

    for epoch in range(train_cfg.epochs):
        lr = learning_rate(train_cfg, epoch)
        sums = {"loss": 0.0, "bus": 0.0, "slack": 0.0, "ctr": 0.0,
                "norm": 0.0}
        seen = 0
        for batch_idx in _batches(len(examples), train_cfg.batch_size, rng):
            batch = assemble_batch([examples[i] for i in batch_idx])
            tape = Tape()
            try:
                pred = forward(params, batch.graph, model_cfg, tape)
                loss, parts = total_loss(pred, batch, loss_cfg, tape)
                grads = tape.backward(loss)
            except FloatingPointError as exc:
                raise TrainingDivergedError(
                    f"non-finite values at epoch {epoch}, "
                    f"after {seen} samples: {exc}") from exc
            norm = clip_gradients(grads, train_cfg.grad_clip)
            if not np.isfinite(norm):
                raise TrainingDivergedError(
                    f"non-finite gradient norm at epoch {epoch}")
            optimizer.step(params, grads, lr)

            weight = len(batch_idx)
            seen += weight
            sums["loss"] += parts["total"] * weight
            sums["bus"] += parts["supervised_bus"] * weight
            sums["slack"] += parts["supervised_slack"] * weight
            ctr = sum(parts[k] for k in parts
                      if k not in ("total", "supervised_bus",
                                   "supervised_slack"))
            sums["ctr"] += ctr * weight
            sums["norm"] = max(sums["norm"], norm)

        stats = EpochStats(
            epoch=epoch, lr=lr,
            loss=sums["loss"] / seen,
            supervised_bus=sums["bus"] / seen,
            supervised_slack=sums["slack"] / seen,
            constraint=sums["ctr"] / seen,
            grad_norm=sums["norm"],
        )
        history.append(stats)
        if log is not None:
            log(f"epoch {epoch:4d}  lr {lr:.6g}  loss {stats.loss:.6e}  "
                f"bus {stats.supervised_bus:.3e}  "
                f"slack {stats.supervised_slack:.3e}  "
                f"ctr {stats.constraint:.3e}")

    return TrainResult(params=params, history=tuple(history))


def finetune(params: Params, samples: Sequence[Sample],
             model_cfg: ModelConfig, loss_cfg: LossConfig,
             train_cfg: TrainConfig | None = None,
             log: LogFn | None = None) -> TrainResult:
    """Continue training existing parameters; zero epochs is a no-op copy."""
    cfg = FINETUNE_DEFAULTS if train_cfg is None else train_cfg
    if cfg.epochs == 0:
        return TrainResult(params={k: v.copy() for k, v in params.items()},
                           history=())
    return train(samples, model_cfg, cfg, loss_cfg, init=params, log=log)


def save_history_csv(path, history: Sequence[EpochStats]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "loss", "supervised_bus",
                         "supervised_slack", "constraint", "grad_norm"])
        for row in history:
            writer.writerow([row.epoch, f"{row.lr!r}", f"{row.loss!r}",
                             f"{row.supervised_bus!r}",
                             f"{row.supervised_slack!r}",
                             f"{row.constraint!r}", f"{row.grad_norm!r}"])


def multistep_schedule(config: TrainConfig) -> list[float]:
    """The whole LR schedule, one entry per epoch (handy for reports)."""
    return [learning_rate(config, e) for e in range(config.epochs)]
