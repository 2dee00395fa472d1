"""Training objectives: convergence loss, supervised task losses, and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

TASK_KINDS = ("intent", "slot", "lm")
WEIGHTING_MODES = ("fixed", "inverse")


class LossConfigError(ValueError):
    pass


@dataclass
class LossConfig:
    beta: float = 0.9
    conv_weight: float = 0.1
    task_weights: dict[str, float] = field(default_factory=dict)
    weighting: str = "fixed"
    ema_decay: float = 0.9
    eps: float = 1e-8

    def __post_init__(self):
        check_beta(self.beta)
        if self.conv_weight < 0:
            raise LossConfigError("conv_weight must be nonnegative")
        if self.weighting not in WEIGHTING_MODES:
            raise LossConfigError(f"weighting must be one of {WEIGHTING_MODES}, got {self.weighting!r}")
        if not 0 <= self.ema_decay < 1:
            raise LossConfigError("ema_decay must lie in [0, 1)")


def check_beta(beta: float) -> None:
    if not 0.0 < beta < 1.0:
        raise LossConfigError(f"beta must lie in the open interval (0, 1), got {beta}")


def convergence_loss(trace: Sequence[Tensor], beta: float, mask=None, batch_axis: int | None = None) -> Tensor:
    """``sum_{k=1}^{K-1} beta^(K-k) * ||y^{k+1} - y^k||_F`` over a trace ``y^0..y^K``.

    ``y^0`` never enters. With ``batch_axis`` the norm is taken per example
    and averaged over the batch; ``mask`` (batch, time) zeroes padded tokens.
    """
    check_beta(beta)
    K = len(trace) - 1
    if K < 1:
        raise ValueError("trace needs at least y^0 and y^1")
    total = Tensor(0.0)
    for k in range(1, K):
        diff = T.sub(trace[k + 1], trace[k])
        if mask is not None and diff.ndim == 3:
            diff = T.mul(diff, np.asarray(mask, dtype=float)[..., None])
        if batch_axis is None:
            term = T.norm(diff)
        else:
            axes = tuple(i for i in range(diff.ndim) if i != batch_axis)
            term = T.mean(T.norm(diff, axis=axes))
        total = T.add(total, T.scale(term, beta ** (K - k)))
    return total


def task_loss(kind: str, logits: Tensor, targets, mask=None) -> Tensor:
    """Cross-entropy of the final prediction against gold labels.

    ``intent``: one label per example. ``slot``: one IBO label id per token,
    averaged over unmasked tokens. ``lm``: next-token ids per position,
    averaged over unmasked positions. Negative targets (labels unseen at
    vocabulary build time) are excluded.
    """
    if kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {kind!r}")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"{kind} targets of shape {targets.shape} do not match predictions {logits.shape[:-1]}")
    valid = (targets >= 0).astype(float)
    if mask is not None:
        mask = np.asarray(mask, dtype=float)
        if kind == "intent":
            raise ValueError("intent loss takes no token mask")
        valid = valid * mask
    return T.cross_entropy(logits, targets, mask=valid)


class LossCombiner:
    """Weighted sum of task losses plus ``conv_weight`` times the convergence losses.

    In ``inverse`` mode each task weight is ``1 / (EMA|L_i| + eps)``,
    renormalised to sum to the number of tasks and held constant for the
    backward pass.
    """

    def __init__(self, config: LossConfig):
        self.config = config
        self.ema: dict[str, float] = {}
        self.last_weights: dict[str, float] = {}

    def weights(self, task_losses: dict[str, Tensor]) -> dict[str, float]:
        cfg = self.config
        names = list(task_losses)
        if cfg.weighting == "fixed":
            return {n: float(cfg.task_weights.get(n, 1.0)) for n in names}
        for n in names:
            v = abs(task_losses[n].item())
            self.ema[n] = v if n not in self.ema else cfg.ema_decay * self.ema[n] + (1 - cfg.ema_decay) * v
        raw = np.array([1.0 / (self.ema[n] + cfg.eps) for n in names])
        raw = raw * len(names) / raw.sum()
        return dict(zip(names, raw.tolist()))

    def __call__(self, task_losses: dict[str, Tensor], conv_losses: dict[str, Tensor] | None = None) -> Tensor:
        return combined_loss(task_losses, conv_losses or {}, self.config, self)


def combined_loss(task_losses: dict[str, Tensor], conv_losses: dict[str, Tensor], config: LossConfig,
                  combiner: LossCombiner | None = None) -> Tensor:
    if not task_losses:
        raise ValueError("combined_loss needs at least one task loss")
    combiner = combiner or LossCombiner(config)
    w = combiner.weights(task_losses)
    combiner.last_weights = w
    total = Tensor(0.0)
    for name, loss in task_losses.items():
        total = T.add(total, T.scale(loss, w[name]))
    if config.conv_weight > 0:
        for loss in conv_losses.values():
            total = T.add(total, T.scale(loss, config.conv_weight))
    return total
