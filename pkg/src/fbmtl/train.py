"""Training loop, evaluation, ablation grids and parameter sweeps."""

from __future__ import annotations

import itertools
import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .config import TASK_LEVELS, RunConfig, apply_ablation, branch_depth, save_config, validate
from .data import (SyntheticSpec, Utterance, Vocab, batch, build_vocab, gen_synthetic, load_atis_format,
                   DataError)
from .losses import LossCombiner, LossConfig, convergence_loss, task_loss
from .metrics import (MetricsReport, exact_match_accuracy, intent_accuracy, perplexity, residual_curve,
                      setting_steps, slot_f1)
from .model import FeedbackModel, ModelSpec, RouteSpec, Task, build_model
from .optim import make_optimizer

logger = logging.getLogger(__name__)

EVAL_SEED = 20240601
EVAL_BATCH = 256
SETTING_RANGE_PCT = 2.0


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


# ---------------------------------------------------------------------------
# data and model assembly
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    train: list[Utterance]
    test: list[Utterance]
    vocab: Vocab
    name: str = "synthetic"


def synthetic_spec(cfg: RunConfig, seed_offset: int = 0) -> SyntheticSpec:
    fields = dict(cfg.data.synthetic)
    fields["seed"] = int(fields.get("seed", 0)) + seed_offset
    return SyntheticSpec(**fields)


def load_dataset(cfg: RunConfig, path=None) -> Dataset:
    """Training/test splits and vocabulary as described by ``cfg.data``."""
    path = path or (cfg.data.path if cfg.data.source == "path" else None)
    if path is None:
        spec = synthetic_spec(cfg)
        corpus = gen_synthetic(spec, cfg.data.n_train + cfg.data.n_test)
        train, test = corpus[:cfg.data.n_train], corpus[cfg.data.n_train:]
        name = f"synthetic(rho={spec.rho}, seed={spec.seed})"
    else:
        d = Path(path)
        train, rep_tr = load_atis_format(d / "train.tsv")
        test, rep_te = load_atis_format(d / "test.tsv")
        if not train or not test:
            raise DataError(f"{d}: empty train or test split")
        name = str(d)
    return Dataset(train, test, build_vocab(train, cfg.data.min_freq), name)


def make_tasks(cfg: RunConfig, vocab: Vocab) -> list[Task]:
    sizes = {"intent": len(vocab.intents), "slot": len(vocab.slots), "lm": len(vocab.words)}
    return [Task(t, sizes[t], TASK_LEVELS[t]) for t in cfg.model.tasks]


def model_spec(cfg: RunConfig, vocab: Vocab) -> ModelSpec:
    m = cfg.model
    depths = {t: branch_depth(cfg, t) for t in m.tasks}
    routes = [RouteSpec(r["source"], r["target"], r.get("position", 1)) for r in m.routes]
    return ModelSpec(tasks=make_tasks(cfg, vocab), vocab_size=len(vocab.words), embed_dim=m.embed_dim,
                     shared=list(m.shared), hidden=m.hidden, branch_depth=depths, branch_kind=m.branch_kind,
                     routes=routes, amp_width=m.amp_width, gated=cfg.gated, gate_mode=cfg.gate.mode,
                     gate_temperature=cfg.gate.temperature, gate_init=cfg.gate.init)


def make_model(cfg: RunConfig, vocab: Vocab, seed: int) -> FeedbackModel:
    return build_model(model_spec(cfg, vocab), np.random.default_rng([seed, 0]))


def targets_for(task: str, b) -> tuple[np.ndarray, np.ndarray | None]:
    if task == "intent":
        return b.intent_ids, None
    if task == "slot":
        return b.slot_ids, b.mask
    return b.lm_targets, b.mask


def step_losses(model: FeedbackModel, cfg: RunConfig, b, rng, train: bool):
    trace = model.iterate(b.ids, cfg.K, cfg.init, rng, mask=b.mask, train=train, feedback=cfg.feedback)
    task_losses = {}
    conv_losses = {}
    for name in cfg.model.tasks:
        tgt, mask = targets_for(name, b)
        task_losses[name] = task_loss(name, trace.logits[name], tgt, mask)
        level_mask = b.mask if TASK_LEVELS[name] == "token" else None
        conv_losses[name] = convergence_loss(trace[name], cfg.loss.beta, mask=level_mask, batch_axis=0)
    return trace, task_losses, conv_losses


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict(model: FeedbackModel, cfg: RunConfig, data: Sequence[Utterance], vocab: Vocab):
    """Noise-free predictions plus mean residual curves over ``data``."""
    rng = np.random.default_rng(EVAL_SEED)
    intents, slots = [], []
    lm_logp, lm_tgt, lm_mask = [], [], []
    resid = {t: np.zeros(cfg.K) for t in cfg.model.tasks}
    n = 0
    with T.no_grad():
        for b in batch(data, EVAL_BATCH, vocab):
            trace = model.iterate(b.ids, cfg.K, cfg.init, rng, mask=b.mask, train=False, feedback=cfg.feedback)
            for t in cfg.model.tasks:
                level_mask = b.mask if TASK_LEVELS[t] == "token" else None
                resid[t] += np.asarray(residual_curve(trace[t], level_mask, batch_axis=0)) * len(b)
            n += len(b)
            if "intent" in trace.outputs:
                ids = trace.final("intent").data.argmax(-1)
                intents.extend(vocab.intents[i] for i in ids)
            if "slot" in trace.outputs:
                ids = trace.final("slot").data.argmax(-1)
                for row, length in zip(ids, b.lengths):
                    slots.append([vocab.slots[i] for i in row[:length]])
            if "lm" in trace.outputs:
                lg = trace.logits["lm"].data
                z = lg - lg.max(-1, keepdims=True)
                lm_logp.append((z - np.log(np.exp(z).sum(-1, keepdims=True))).reshape(-1, lg.shape[-1]))
                lm_tgt.append(b.lm_targets.reshape(-1))
                lm_mask.append(b.mask.reshape(-1))
    lm = (np.concatenate(lm_logp), np.concatenate(lm_tgt), np.concatenate(lm_mask)) if lm_logp else None
    return intents, slots, lm, {t: (v / max(n, 1)).tolist() for t, v in resid.items()}


def evaluate(model: FeedbackModel, data: Sequence[Utterance], cfg: RunConfig, vocab: Vocab) -> MetricsReport:
    intents, slots, lm, resid = predict(model, cfg, data, vocab)
    rep = MetricsReport(residuals=resid, n_examples=len(data))
    if "intent" in cfg.model.tasks:
        rep.intent_acc = intent_accuracy(intents, [u.intent for u in data])
    if "slot" in cfg.model.tasks:
        rep.slot_p, rep.slot_r, rep.slot_f1 = slot_f1(slots, [u.slots for u in data])
    if "intent" in cfg.model.tasks and "slot" in cfg.model.tasks:
        rep.ema = exact_match_accuracy(intents, slots, [u.intent for u in data], [u.slots for u in data])
    if lm is not None:
        rep.ppl = perplexity(*lm)
    return rep


def evaluate_checkpoint(path, data: Sequence[Utterance], cfg: RunConfig, vocab: Vocab) -> MetricsReport:
    model = make_model(cfg, vocab, seed=0)
    ckpt.load_into(model, path)
    return evaluate(model, data, cfg, vocab)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class RunLog:
    """Append-only per-step records."""

    def __init__(self, cfg: RunConfig, seed: int, path=None):
        self.records: list[dict] = []
        self.meta = {"config_hash": cfg.digest(), "seed": seed, "ablation": cfg.ablation}
        self.path = Path(path) if path else None
        self.started = time.perf_counter()
        if self.path:
            self.path.write_text(json.dumps({"meta": self.meta}) + "\n", encoding="utf-8")

    def append(self, record: dict) -> None:
        if self.records and "step" in record and record["step"] < self.records[-1].get("step", -1):
            raise ValueError("RunLog steps must not decrease")
        self.records.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record) + "\n")

    @property
    def wall_clock(self) -> float:
        return time.perf_counter() - self.started

    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records if r.get("kind") == "step"]

    def curve(self, key: str) -> list[tuple[int, float]]:
        return [(r["step"], r[key]) for r in self.records if r.get("kind") == "eval" and r.get(key) is not None]


@dataclass
class TrainResult:
    model: FeedbackModel
    log: RunLog
    report: MetricsReport
    seed: int
    best_ema: float | None = None
    checkpoint: Path | None = None
    gate_histograms: dict[str, list[int]] = field(default_factory=dict)


def _selection_score(rep: MetricsReport) -> float:
    for key in ("ema", "intent_acc", "slot_f1"):
        v = getattr(rep, key)
        if v is not None:
            return v
    return -rep.ppl if rep.ppl is not None else 0.0


def train(cfg: RunConfig, data: Dataset, seed: int | None = None, out_dir=None) -> TrainResult:
    """Minibatch training of the K-step model; evaluates on ``data.test`` every ``eval_every`` steps."""
    validate(cfg)
    seed = cfg.seeds[0] if seed is None else seed
    if not data.train:
        raise DataError("empty training set")
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out / "config.yaml")
        data.vocab.save(out / "vocab")
    log = RunLog(cfg, seed, out / "log.jsonl" if out else None)
    model = make_model(cfg, data.vocab, seed)
    params = model.parameters()
    opt = make_optimizer(cfg.optim.name, params, cfg.optim.lr, cfg.optim.betas)
    combiner = LossCombiner(LossConfig(beta=cfg.loss.beta, conv_weight=cfg.loss.conv_weight,
                                       weighting=cfg.loss.weighting, ema_decay=cfg.loss.ema_decay))
    noise_rng = np.random.default_rng([seed, 1])
    hist = {r.name: np.zeros(r.gate.m, dtype=np.int64) for r in model.routes if r.gated}
    recent = {k: np.zeros_like(v) for k, v in hist.items()}

    best_score = -math.inf
    step = 0
    for epoch in range(cfg.optim.epochs):
        for k in recent:
            recent[k][:] = 0
        for b in batch(data.train, cfg.optim.batch_size, data.vocab, shuffle=True, seed=[seed, 2, epoch]):
            trace, task_losses, conv_losses = step_losses(model, cfg, b, noise_rng, train=True)
            total = combiner(task_losses, conv_losses)
            step += 1
            record = {"kind": "step", "step": step, "epoch": epoch, "loss": total.item(),
                      "task": {k: v.item() for k, v in task_losses.items()},
                      "conv": {k: v.item() for k, v in conv_losses.items()}}
            if not np.isfinite(total.item()):
                record["kind"] = "diverged"
                log.append(record)
                raise DivergenceError(f"non-finite loss at step {step} (seed {seed})", record)
            model.zero_grad()
            T.backward(total)
            opt.step()
            for name, picks in trace.selections.items():
                for p in picks:
                    c = np.bincount(np.ravel(p), minlength=len(hist[name]))
                    hist[name] += c
                    recent[name] += c
            log.append(record)
            if step % cfg.eval_every == 0:
                rep = evaluate(model, data.test, cfg, data.vocab)
                ev = {"kind": "eval", "step": step, **{k: v for k, v in rep.to_dict().items()
                                                        if k not in ("residuals", "n_examples")},
                      "final_residual": rep.final_residual()}
                if hist:
                    ev["gates"] = {k: v.tolist() for k, v in recent.items()}
                log.append(ev)
                if _selection_score(rep) > best_score:
                    best_score = _selection_score(rep)
                    if out:
                        ckpt.save_model(model, out / "best.ckpt")

    report = evaluate(model, data.test, cfg, data.vocab)
    final = {"kind": "eval", "step": step, **{k: v for k, v in report.to_dict().items()
                                               if k not in ("residuals", "n_examples")},
             "final_residual": report.final_residual()}
    if not log.records or log.records[-1].get("kind") != "eval" or log.records[-1]["step"] != step:
        log.append(final)
    for key in ("intent_acc", "slot_f1", "ema", "ppl"):
        curve = log.curve(key)
        if curve:
            report.setting_steps[key] = setting_steps(curve, SETTING_RANGE_PCT)
    report_dict = report.to_dict()
    report_dict["setting_steps.split"] = "test"
    log.append({"kind": "final", "step": step, "wall_clock": log.wall_clock, "report": report_dict,
                "gates": {k: v.tolist() for k, v in hist.items()}})

    if cfg.gated and cfg.gate.mode == "learned":
        for name, counts in recent.items():
            tot = counts.sum()
            if tot and counts.max() / tot < 0.6:
                warnings.warn(f"gate {name} has not concentrated (max frequency {counts.max() / tot:.2f})")

    path = None
    if out:
        path = out / "final.ckpt"
        ckpt.save_model(model, path)
        (out / "report.json").write_text(json.dumps(report_dict, indent=2, sort_keys=True), encoding="utf-8")
    best = best_score if math.isfinite(best_score) else report.ema
    return TrainResult(model, log, report, seed, best_ema=best, checkpoint=path,
                       gate_histograms={k: v.tolist() for k, v in hist.items()})


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------

TABLE_COLUMNS = (("slot_f1", "Slot/F1"), ("intent_acc", "Intent/ACC"), ("ema", "EMA"), ("ppl", "LM/PPL"))
PERCENT_KEYS = {"slot_f1", "intent_acc", "ema"}


@dataclass
class Cell:
    row: str
    seed: int
    report: dict | None = None
    error: str | None = None
    seconds: float = 0.0


@dataclass
class GridResult:
    rows: list[str]
    cells: list[Cell]
    columns: list[tuple[str, str]]

    def medians(self) -> dict[str, dict[str, float]]:
        out = {}
        for row in self.rows:
            reps = [c.report for c in self.cells if c.row == row and c.report is not None]
            out[row] = {key: float(np.median([r[key] for r in reps])) for key, _ in self.columns
                        if reps and all(key in r for r in reps)}
            out[row]["final_residual"] = float(np.median([r["final_residual"] for r in reps])) if reps else math.nan
            out[row]["n"] = len(reps)
        return out

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "columns": [k for k, _ in self.columns],
                           "median": self.medians(),
                           "cells": [c.__dict__ for c in self.cells]}, indent=2, default=str)

    def to_text(self) -> str:
        return render_table(self.rows, self.medians(), self.columns)


def render_table(rows: Sequence[str], medians: dict, columns: Sequence[tuple[str, str]]) -> str:
    head = ["#", "Method"] + [("%s (%%)" % title) if key in PERCENT_KEYS else title for key, title in columns]
    body = []
    for i, row in enumerate(rows, 1):
        vals = []
        for key, _ in columns:
            v = medians.get(row, {}).get(key)
            if v is None or (isinstance(v, float) and math.isnan(v)):
                vals.append("-")
            else:
                vals.append(f"{100 * v:.1f}" if key in PERCENT_KEYS else f"{v:.2f}")
        body.append([str(i), row] + vals)
    widths = [max(len(r[j]) for r in [head] + body) for j in range(len(head))]
    fmt = lambda r: "  ".join(c.ljust(w) if j < 2 else c.rjust(w) for j, (c, w) in enumerate(zip(r, widths)))
    rule = "-" * len(fmt(head))
    return "\n".join([fmt(head), rule] + [fmt(r) for r in body]) + "\n"


def columns_for(cfg: RunConfig) -> list[tuple[str, str]]:
    tasks = set(cfg.model.tasks)
    keep = {"slot_f1": "slot" in tasks, "intent_acc": "intent" in tasks,
            "ema": {"intent", "slot"} <= tasks, "ppl": "lm" in tasks}
    return [(k, title) for k, title in TABLE_COLUMNS if keep[k]]


def run_cell(cfg: RunConfig, data: Dataset, seed: int, out_dir=None) -> dict:
    res = train(cfg, data, seed=seed, out_dir=out_dir)
    d = res.report.to_dict()
    d["final_residual"] = res.report.final_residual()
    d["wall_clock"] = res.log.wall_clock
    d["gates"] = res.gate_histograms
    return d


def run_grid(named: Sequence[tuple[str, RunConfig]], seeds: Sequence[int], data: Dataset, out_dir=None,
             runner: Callable[..., dict] = run_cell) -> GridResult:
    """Train every (row, seed) cell; a failing cell is recorded and the rest continue."""
    if not named or not seeds:
        raise ValueError("grid needs at least one row and one seed")
    cells = []
    for row, cfg in named:
        for seed in seeds:
            cell_dir = Path(out_dir) / _slug(row) / f"seed{seed}" if out_dir else None
            t0 = time.perf_counter()
            try:
                rep = runner(cfg, data, seed, cell_dir)
                cells.append(Cell(row, seed, rep, seconds=time.perf_counter() - t0))
            except Exception as exc:  # noqa: BLE001 - per-cell isolation
                logger.exception("cell %s seed %d failed", row, seed)
                cells.append(Cell(row, seed, None, f"{type(exc).__name__}: {exc}", time.perf_counter() - t0))
    result = GridResult([r for r, _ in named], cells, columns_for(named[0][1]))
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "results.json").write_text(result.to_json(), encoding="utf-8")
        (Path(out_dir) / "results.txt").write_text(result.to_text(), encoding="utf-8")
    return result


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in name).strip("_").lower() or "row"


def ablate(base: RunConfig, flags: Sequence[str], seeds: Sequence[int], data: Dataset, out_dir=None,
           runner: Callable[..., dict] = run_cell) -> GridResult:
    """Ablation grid: one row per flag (TRIV, ITER, ITER+CONV, ITER+GG, FUL), median over seeds."""
    configs = [validate(apply_ablation(base, flag)) for flag in flags]
    return run_grid([(c.ablation, c) for c in configs], seeds, data, out_dir, runner)


def route_grid(base: RunConfig) -> list[tuple[str, RunConfig]]:
    """Feedback-route grid for the intent/slot/lm model.

    LI (LS) adds the route intent->lm (slot->lm); the "w/ feedback" variant
    also adds the reverse route from lm. BASIC has no route at all.
    """
    if set(base.model.tasks) != {"intent", "slot", "lm"}:
        raise ValueError("route grid needs the tasks intent, slot and lm")
    pos = 1
    forward = {"LI": [("intent", "lm")], "LS": [("slot", "lm")], "LS & LI": [("slot", "lm"), ("intent", "lm")]}
    rows = [("BASIC", [])]
    for name, fwd in forward.items():
        rev = [(t, s) for s, t in fwd]
        rows.append((f"{name} w/o feedback", fwd))
        rows.append((f"{name} w/ feedback", fwd + rev))
    out = []
    for name, pairs in rows:
        cfg = base.copy()
        cfg.model.routes = [{"source": s, "target": t, "position": pos} for s, t in pairs]
        out.append((name, validate(cfg)))
    return out


def validation_split(data: Dataset, fraction: float = 0.1) -> Dataset:
    """Hold out the tail of the training split; the test split is left untouched."""
    n_val = max(1, int(round(fraction * len(data.train))))
    if n_val >= len(data.train):
        raise DataError("training split too small for a validation hold-out")
    return Dataset(data.train[:-n_val], data.train[-n_val:], data.vocab, data.name + "/val")


def position_candidates(cfg: RunConfig) -> list[tuple[int, ...]]:
    """Every assignment of a fixed infusion position to each route."""
    ranges = [range(1, branch_depth(cfg, r["target"]) + 1) for r in cfg.model.routes]
    return list(itertools.product(*ranges))


def select_positions(cfg: RunConfig, data: Dataset, seed: int | None = None,
                     fraction: float = 0.1) -> tuple[RunConfig, dict]:
    """Pick fixed infusion positions by validation EMA over the full position grid.

    Returns the configuration with the winning positions and the score of
    every candidate. Gated configurations are returned unchanged.
    """
    if cfg.gated or not cfg.model.routes:
        return cfg, {}
    val = validation_split(data, fraction)
    scores = {}
    best, best_score = None, -math.inf
    for cand in position_candidates(cfg):
        trial = cfg.copy()
        for r, pos in zip(trial.model.routes, cand):
            r["position"] = pos
        res = train(validate(trial), val, seed=seed)
        score = _selection_score(res.report)
        scores[cand] = score
        if score > best_score:
            best, best_score = trial, score
    return best, scores


SWEEP_PARAMS = {"K": ("K",), "beta": ("loss", "beta"), "conv_weight": ("loss", "conv_weight"),
                "gate.temperature": ("gate", "temperature")}


def time_per_prediction(model: FeedbackModel, cfg: RunConfig, data: Sequence[Utterance], vocab: Vocab,
                        repeats: int = 3) -> float:
    batches = batch(data, EVAL_BATCH, vocab)
    best = math.inf
    with T.no_grad():
        for _ in range(repeats):
            rng = np.random.default_rng(EVAL_SEED)
            t0 = time.perf_counter()
            for b in batches:
                model.iterate(b.ids, cfg.K, cfg.init, rng, mask=b.mask, train=False, feedback=cfg.feedback)
            best = min(best, time.perf_counter() - t0)
    return best / max(len(data), 1)


def sweep_config(base: RunConfig, param: str, value) -> RunConfig:
    if param not in SWEEP_PARAMS:
        raise ValueError(f"cannot sweep {param!r}; choose from {sorted(SWEEP_PARAMS)}")
    cfg = base.copy()
    path = SWEEP_PARAMS[param]
    node = cfg
    for p in path[:-1]:
        node = getattr(node, p)
    setattr(node, path[-1], type(getattr(node, path[-1]))(value))
    if param == "K":
        # K = 1 leaves nothing to iterate: the cell becomes the static model
        if cfg.K == 1:
            cfg = apply_ablation(cfg, "TRIV")
        elif cfg.ablation == "TRIV":
            cfg = apply_ablation(cfg, "ITER")
    if param == "conv_weight":
        flag = cfg.ablation
        if cfg.loss.conv_weight > 0 and flag in ("ITER", "ITER+GG"):
            cfg.ablation = "ITER+CONV" if flag == "ITER" else "FUL"
        elif cfg.loss.conv_weight == 0 and flag in ("ITER+CONV", "FUL"):
            cfg.ablation = "ITER" if flag == "ITER+CONV" else "ITER+GG"
    return validate(cfg)


def sweep(base: RunConfig, param: str, values: Sequence, data: Dataset, seed: int | None = None,
          out_dir=None) -> dict:
    """One training run per value; summarises final residual and time per prediction."""
    if not values:
        raise ValueError("sweep needs at least one value")
    if param not in SWEEP_PARAMS:
        raise ValueError(f"cannot sweep {param!r}; choose from {sorted(SWEEP_PARAMS)}")
    seed = base.seeds[0] if seed is None else seed
    rows = []
    for v in values:
        row = {"param": param, "value": v}
        try:
            cfg = sweep_config(base, param, v)
            cell_dir = Path(out_dir) / f"{_slug(param)}_{_slug(str(v))}" if out_dir else None
            res = train(cfg, data, seed=seed, out_dir=cell_dir)
            conv = [sum(r["conv"].values()) for r in res.log.records if r.get("kind") == "step"]
            row.update(ablation=cfg.ablation, report=res.report.to_dict(),
                       final_residual=res.report.final_residual(),
                       conv_loss_max=max(conv) if conv else 0.0,
                       losses=res.log.losses(),
                       seconds_per_prediction=time_per_prediction(res.model, cfg, data.test, data.vocab))
        except Exception as exc:  # noqa: BLE001 - per-cell isolation
            logger.exception("sweep value %r failed", v)
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    summary = {"param": param, "values": list(values), "rows": rows}
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "sweep.json").write_text(json.dumps(summary, indent=2, default=str), encoding="utf-8")
        (Path(out_dir) / "sweep.txt").write_text(render_sweep(summary), encoding="utf-8")
    return summary


def render_sweep(summary: dict) -> str:
    lines = [f"{summary['param']:>12}  {'residual':>10}  {'us/pred':>9}  {'intent':>7}  {'slot_f1':>7}"]
    for r in summary["rows"]:
        if "error" in r:
            lines.append(f"{str(r['value']):>12}  error: {r['error']}")
            continue
        rep = r["report"]
        fmt = lambda k: f"{100 * rep[k]:.1f}" if k in rep else "-"
        lines.append(f"{str(r['value']):>12}  {r['final_residual']:>10.3g}  "
                     f"{1e6 * r['seconds_per_prediction']:>9.1f}  {fmt('intent_acc'):>7}  {fmt('slot_f1'):>7}")
    return "\n".join(lines) + "\n"
