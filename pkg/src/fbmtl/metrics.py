"""Evaluation quantities: intent accuracy, span F1, exact match, perplexity, setting steps."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np


class MetricError(ValueError):
    pass


def intent_accuracy(pred: Sequence, gold: Sequence) -> float:
    if len(pred) != len(gold):
        raise MetricError(f"{len(pred)} predictions for {len(gold)} gold labels")
    if not gold:
        raise MetricError("empty evaluation set")
    return sum(p == g for p, g in zip(pred, gold)) / len(gold)


def spans(tags: Sequence[str]) -> set[tuple[str, int, int]]:
    """IBO tags -> {(type, start, end_exclusive)}; a dangling ``I-x`` opens a new span."""
    out = set()
    start, kind = None, None
    for i, tag in enumerate(list(tags) + ["O"]):
        prefix, _, t = tag.partition("-")
        continues = prefix == "I" and kind == t and start is not None
        if continues:
            continue
        if start is not None:
            out.add((kind, start, i))
            start, kind = None, None
        if prefix in ("B", "I") and t:
            start, kind = i, t
    return out


def slot_f1(pred: Sequence[Sequence[str]], gold: Sequence[Sequence[str]]) -> tuple[float, float, float]:
    """Micro-averaged span precision, recall and F1 (exact boundaries and type)."""
    if len(pred) != len(gold):
        raise MetricError(f"{len(pred)} predicted sequences for {len(gold)} gold sequences")
    tp = n_pred = n_gold = 0
    for p, g in zip(pred, gold):
        if len(p) != len(g):
            raise MetricError(f"sequence length mismatch: {len(p)} vs {len(g)}")
        ps, gs = spans(p), spans(g)
        tp += len(ps & gs)
        n_pred += len(ps)
        n_gold += len(gs)
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def exact_match_accuracy(intent_pred: Sequence, slot_pred: Sequence[Sequence[str]],
                         intent_gold: Sequence, slot_gold: Sequence[Sequence[str]]) -> float:
    n = len(intent_gold)
    if not (len(intent_pred) == len(slot_pred) == len(slot_gold) == n) or n == 0:
        raise MetricError("exact match needs aligned, nonempty collections")
    hits = sum(ip == ig and tuple(sp) == tuple(sg)
               for ip, sp, ig, sg in zip(intent_pred, slot_pred, intent_gold, slot_gold))
    return hits / n


def perplexity(log_probs: np.ndarray, targets: np.ndarray, mask: np.ndarray | None = None) -> float:
    """``exp`` of the mean negative log-likelihood over unmasked positions.

    ``log_probs`` holds normalised log-distributions with the vocabulary on
    the last axis.
    """
    log_probs = np.asarray(log_probs, dtype=float)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.ones(targets.shape) if mask is None else np.asarray(mask, dtype=float)
    if mask.sum() <= 0:
        raise MetricError("perplexity over zero unmasked positions")
    picked = np.take_along_axis(log_probs, np.where(mask > 0, targets, 0)[..., None], -1)[..., 0]
    return float(np.exp(-(picked * mask).sum() / mask.sum()))


def setting_steps(curve: Sequence[tuple[int, float]], range_pct: float = 2.0) -> int:
    """First step after which every value stays within ``range_pct`` % of the final value."""
    if not curve:
        raise MetricError("empty metric curve")
    if range_pct <= 0:
        raise MetricError("range_pct must be positive")
    final = curve[-1][1]
    tol = abs(final) * range_pct / 100.0
    step = curve[-1][0]
    for s, v in reversed(curve):
        if abs(v - final) > tol:
            break
        step = s
    return step


def residual_curve(trace: Sequence, mask=None, batch_axis: int | None = None) -> list[float]:
    """``[||y^{k+1} - y^k||_F for k = 0..K-1]``.

    With ``batch_axis=0`` the norm is taken per example and averaged;
    ``mask`` (batch, time) zeroes padded tokens of token-level outputs.
    """
    vals = [np.asarray(getattr(y, "data", y), dtype=float) for y in trace]
    out = []
    for a, b in zip(vals[:-1], vals[1:]):
        d = b - a
        if mask is not None and d.ndim == 3:
            d = d * np.asarray(mask, dtype=float)[..., None]
        if batch_axis is None:
            out.append(float(np.sqrt((d ** 2).sum())))
        else:
            d = np.moveaxis(d, batch_axis, 0)
            out.append(float(np.sqrt((d ** 2).reshape(len(d), -1).sum(axis=1)).mean()))
    return out


@dataclass
class MetricsReport:
    intent_acc: float | None = None
    slot_p: float | None = None
    slot_r: float | None = None
    slot_f1: float | None = None
    ema: float | None = None
    ppl: float | None = None
    residuals: dict[str, list[float]] = field(default_factory=dict)
    setting_steps: dict[str, int] = field(default_factory=dict)
    n_examples: int = 0

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        steps = d.pop("setting_steps", {})
        for k, v in steps.items():
            d[f"setting_steps.{k}"] = v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> MetricsReport:
        d = dict(d)
        steps = {k.split(".", 1)[1]: v for k, v in d.items() if k.startswith("setting_steps.")}
        d = {k: v for k, v in d.items() if not k.startswith("setting_steps.")}
        return cls(**d, setting_steps=steps)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> MetricsReport:
        return cls.from_dict(json.loads(s))

    def final_residual(self) -> float:
        """Mean over tasks of ``||y^K - y^{K-1}||``."""
        if not self.residuals:
            return math.nan
        return float(np.mean([c[-1] for c in self.residuals.values()]))
