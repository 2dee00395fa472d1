"""Command-line entry point: gen-data, train, eval, ablate, sweep, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .checkpoint import TopologyError
from .config import ABLATIONS, ConfigError, RunConfig, apply_overrides, load_config, validate
from .data import DataError, Vocab, gen_synthetic, load_atis_format, write_atis_format
from .metrics import MetricsReport
from .train import (DivergenceError, SWEEP_PARAMS, ablate, evaluate_checkpoint, load_dataset,
                    render_sweep, render_table, run_grid, route_grid, select_positions, sweep,
                    synthetic_spec, train)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("fbmtl")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = apply_overrides(cfg, args.override)
    if args.data:
        cfg.data.source, cfg.data.path = "path", str(args.data)
    if args.out:
        cfg.out = str(args.out)
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    return validate(cfg)


def _csv(text: str, cast=str) -> list:
    return [cast(v) for v in text.split(",") if v.strip()]


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = synthetic_spec(cfg)
    corpus = gen_synthetic(spec, cfg.data.n_train + cfg.data.n_test)
    write_atis_format(corpus[:cfg.data.n_train], out / "train.tsv")
    write_atis_format(corpus[cfg.data.n_train:], out / "test.tsv")
    print(f"wrote {cfg.data.n_train} train / {cfg.data.n_test} test utterances to {out} (rho={spec.rho})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    data = load_dataset(cfg)
    if args.select_positions:
        cfg, scores = select_positions(cfg, data, seed=cfg.seeds[0])
        for cand, score in scores.items():
            print(f"positions {cand}: validation score {score:.4f}")
    for seed in cfg.seeds:
        out = Path(cfg.out) / f"seed{seed}" if len(cfg.seeds) > 1 else Path(cfg.out)
        res = train(cfg, data, seed=seed, out_dir=out)
        print(json.dumps({"seed": seed, "out": str(out), **res.report.to_dict()}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    run = Path(args.run) if args.run else None
    if args.config is None and run is not None:
        args.config = run / "config.yaml"
    cfg = _config(args)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else (run / "final.ckpt" if run else None)
    if ckpt_path is None:
        raise ConfigError("eval needs --checkpoint or --run")
    vocab_dir = Path(args.vocab) if args.vocab else (run / "vocab" if run else ckpt_path.parent / "vocab")
    vocab = Vocab.load(vocab_dir)
    if cfg.data.source == "path":
        test, _ = load_atis_format(Path(cfg.data.path) / "test.tsv")
    else:
        test = load_dataset(cfg).test
    rep = evaluate_checkpoint(ckpt_path, test, cfg, vocab)
    print(rep.to_json())
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    data = load_dataset(cfg)
    seeds = _csv(args.seeds, int) if args.seeds else cfg.seeds
    if args.routes:
        result = run_grid(route_grid(cfg), seeds, data, cfg.out)
    else:
        result = ablate(cfg, _csv(args.flags), seeds, data, cfg.out)
    print(result.to_text(), end="")
    for c in result.cells:
        if c.error:
            print(f"cell {c.row} seed {c.seed} failed: {c.error}", file=sys.stderr)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    data = load_dataset(cfg)
    values = [yaml.safe_load(v) for v in _csv(args.values)]
    summary = sweep(cfg, args.param, values, data, seed=cfg.seeds[0], out_dir=cfg.out)
    print(render_sweep(summary), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.path)
    if path.is_dir():
        for name in ("results.json", "sweep.json", "report.json"):
            if (path / name).exists():
                path = path / name
                break
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read report {path}: {exc}") from exc
    if "median" in d:
        cols = [(k, t) for k, t in (("slot_f1", "Slot/F1"), ("intent_acc", "Intent/ACC"), ("ema", "EMA"),
                                    ("ppl", "LM/PPL")) if k in d["columns"]]
        print(render_table(d["rows"], d["median"], cols), end="")
    elif "rows" in d and "param" in d:
        print(render_sweep(d), end="")
    else:
        print(MetricsReport.from_dict(d).to_json())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fbmtl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", type=Path, help="YAML run configuration")
        sp.add_argument("--out", type=Path, help="output directory")
        sp.add_argument("--data", type=Path, help="directory with train.tsv and test.tsv")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dot-path override, e.g. loss.beta=0.5 (repeatable)")
        if seed:
            sp.add_argument("--seed", type=int)

    sp = sub.add_parser("gen-data", help="write a synthetic corpus in the tab-separated format")
    common(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train one model per configured seed")
    common(sp)
    sp.add_argument("--select-positions", action="store_true",
                    help="pick fixed infusion positions on a validation split first")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a saved checkpoint")
    common(sp, seed=False)
    sp.add_argument("--run", type=Path, help="run directory written by train")
    sp.add_argument("--checkpoint", type=Path)
    sp.add_argument("--vocab", type=Path, help="vocabulary directory (default: next to the checkpoint)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="ablation or route grid, median over seeds")
    common(sp, seed=False)
    sp.add_argument("--flags", default=",".join(ABLATIONS))
    sp.add_argument("--seeds", help="comma-separated seeds (default: config seeds)")
    sp.add_argument("--routes", action="store_true", help="run the intent/slot/lm route grid instead")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("sweep", help="one run per value of a parameter")
    common(sp)
    sp.add_argument("--param", required=True, choices=sorted(SWEEP_PARAMS))
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="print a results, sweep or report file")
    sp.add_argument("path", help="file or run directory")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, TopologyError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}\n{json.dumps(exc.record, default=str)}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
