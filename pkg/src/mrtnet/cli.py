"""Command-line entry point: synth, train, eval, predict, gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Sequence

from . import data
from .config import Config, load_config, parse_config_file, set_value, write_config
from .data import Annotation, SynthSpec, embed_query, load_embeddings, load_features, prepare
from .diffcore import ConfigError, ContractError
from .metrics import EvalResult
from .train import (Checkpoint, NumericalError, TrainResult, check_compatible, evaluate_model,
                    format_report, train, write_report)

log = logging.getLogger("mrtnet")

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


def _embeddings(cfg: Config):
    return load_embeddings(cfg.embeddings) if cfg.embeddings else None


def _load_samples(cfg: Config, annotations: str):
    if not annotations:
        raise ConfigError("no annotation file configured")
    if not cfg.features_dir:
        raise ConfigError("no features_dir configured")
    return data.load_samples(annotations, cfg.features_dir, cfg.n_model, cfg.d_q,
                             _embeddings(cfg), cfg.max_query_len)


def cmd_train(cfg: Config) -> TrainResult:
    # read everything up front so I/O problems surface before any training
    train_samples = _load_samples(cfg, cfg.annotations)
    val_samples = _load_samples(cfg, cfg.val_annotations) if cfg.val_annotations else None
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out_dir / "config.txt")
    with open(out_dir / "train_log.jsonl", "w", encoding="utf-8") as log_fh:
        def on_epoch(row: dict) -> None:
            log_fh.write(json.dumps(row, sort_keys=True) + "\n")

        result = train(cfg, train_samples, val_samples, on_epoch)
    result.checkpoint.save(out_dir / "checkpoint.npz")
    return result


def cmd_eval(cfg: Config, checkpoint: str | Path, annotations: str | None = None) -> EvalResult:
    ckpt = Checkpoint.load(checkpoint)
    check_compatible(ckpt, cfg)
    samples = _load_samples(cfg, annotations or cfg.annotations)
    result = evaluate_model(ckpt.model(), samples, cfg.batch_size)
    write_report(result, cfg.out_dir)
    return result


def cmd_predict(cfg: Config, checkpoint: str | Path, features_path: str | Path,
                query_tokens: Sequence[str], duration: float | None = None) -> dict[str, float]:
    ckpt = Checkpoint.load(checkpoint)
    check_compatible(ckpt, cfg)
    feats = load_features(features_path)
    duration = float(feats.shape[0]) if duration is None else float(duration)
    tokens = list(query_tokens)[:cfg.max_query_len]
    if not tokens:
        raise ConfigError("empty query")
    table = _embeddings(cfg)
    query, missing = embed_query(tokens, cfg.d_q, table)
    if table is not None and missing == len(tokens):
        log.warning("no query token found in the embedding table; using hash embeddings")
    sample = prepare(Annotation(Path(features_path).stem, duration, 0.0, 0.0, tokens),
                     feats, cfg.n_model, query)
    span, prob = ckpt.model().predict(data.collate([sample]))[0]
    return {"start": span.start_sec, "end": span.end_sec, "prob": prob}


def cmd_synth(out_dir: str | Path, spec: SynthSpec, split: int | None = None) -> dict[str, Path]:
    return data.write_corpus(out_dir, spec, split)


def cmd_gradcheck(step: float = 1e-4, seed: int = 0) -> dict[str, float]:
    from .gradcheck import run_suite

    return run_suite(step, seed)


# ------------------------------------------------------------------- argparse

_CFG_FIELDS = [f for f in fields(Config) if f.name != "extra"]


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--out", dest="out_dir", help="output directory")
    for f in _CFG_FIELDS:
        if f.name == "out_dir":
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            parser.add_argument(flag, dest=f.name, action="store_const", const="true")
        else:
            parser.add_argument(flag, dest=f.name)


def _config_from_args(args, checkpoint: str | None = None) -> Config:
    overrides = {f.name: getattr(args, f.name, None) for f in _CFG_FIELDS}
    if checkpoint is None:
        return load_config(args.config, overrides)
    # checkpoint snapshot < config file < flags
    cfg = Config.from_dict(Checkpoint.load(checkpoint).config)
    if args.config:
        for key, value in parse_config_file(args.config).items():
            set_value(cfg, key, value)
    for key, value in overrides.items():
        if value is not None:
            set_value(cfg, key, value)
    return cfg.validate()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrtnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write the best checkpoint")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint, writing report.txt/report.json")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--json", action="store_true", help="print the JSON report")

    p = sub.add_parser("predict", help="ground one query in one feature file")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True, help="MRTF feature file")
    p.add_argument("--duration", type=float, help="video length in seconds (default: one per row)")
    p.add_argument("--json", action="store_true")
    p.add_argument("query", nargs="+")

    p = sub.add_parser("synth", help="write a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=SynthSpec.seed)
    p.add_argument("--split", type=int, help="first SPLIT samples go to train.jsonl, rest to test.jsonl")
    for f in fields(SynthSpec):
        if f.name != "seed":
            p.add_argument("--" + f.name.replace("_", "-"), dest=f.name,
                           type=float if f.type == "float" else int, default=f.default)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _run(args) -> int:
    if args.command == "train":
        result = cmd_train(_config_from_args(args))
        ck = result.checkpoint
        print(f"best epoch {ck.epoch}, validation mIoU {ck.best_metric:.2f}")
        return EXIT_OK
    if args.command == "eval":
        cfg = _config_from_args(args, args.checkpoint)
        result = cmd_eval(cfg, args.checkpoint)
        if args.json:
            print(json.dumps(result.report(), sort_keys=True))
        else:
            print(format_report(result), end="")
        return EXIT_OK
    if args.command == "predict":
        cfg = _config_from_args(args, args.checkpoint)
        out = cmd_predict(cfg, args.checkpoint, args.features, args.query, args.duration)
        if args.json:
            print(json.dumps(out))
        else:
            print(f"{out['start']:.3f} {out['end']:.3f} {out['prob']:.6f}")
        return EXIT_OK
    if args.command == "synth":
        spec = SynthSpec(**{f.name: getattr(args, f.name) for f in fields(SynthSpec)})
        for name, path in cmd_synth(args.out, spec, args.split).items():
            print(f"{name}: {path}")
        return EXIT_OK
    if args.command == "gradcheck":
        results = cmd_gradcheck(args.step, args.seed)
        worst = 0.0
        for name, err in results.items():
            status = "ok" if err < args.tol else "FAIL"
            print(f"{name:16s} {err:.3e} {status}")
            worst = max(worst, err)
        return EXIT_OK if worst < args.tol else EXIT_NUMERIC
    raise AssertionError(args.command)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ContractError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
