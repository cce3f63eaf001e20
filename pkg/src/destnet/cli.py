"""Command-line entry point.

Subcommands: generate, train, evaluate, dump-attention, compare-fusing,
grid-search, grad-check. Flag values override config-file keys, which
override defaults. Exit codes: 0 success, 1 usage error, 2 data or model
validation failure, 3 numerical failure. Diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import sys
import time

from .config import build_config, expand_grid, load_config, parse_kv_file
from .data import load_dataset
from .errors import DataError, NumericError
from .evaluate import (
    compare_fusing,
    dump_attention,
    evaluate_model,
    fusing_table,
)
from .gradsuite import DEFAULT_TOLERANCE, grad_suite, suite_max_error
from .model import VARIANTS, assemble_batch, load_checkpoint, save_checkpoint
from .synth import SyntheticConfig, generate_synthetic
from .train import TrainConfig, grid_search, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; the contract is 1
        raise UsageError(message)


def _add_common(sub, *names):
    flags = {
        "config": ("--config", dict(metavar="PATH", help="key=value config file")),
        "data": ("--data", dict(metavar="PATH", help="training or input dataset")),
        "valid": ("--valid", dict(metavar="PATH", help="validation dataset")),
        "test": ("--test", dict(metavar="PATH", help="test dataset")),
        "checkpoint": ("--checkpoint", dict(metavar="PATH", help="model checkpoint")),
        "out": ("--out", dict(metavar="PATH", help="output path")),
        "seed": ("--seed", dict(type=int, help="seed override")),
        "variant": ("--variant", dict(choices=VARIANTS, help="model variant override")),
        "strategy": ("--strategy", dict(choices=("1", "2"), help="fusion strategy override")),
    }
    for name in names:
        flag, kw = flags[name]
        sub.add_argument(flag, **kw)


def build_parser() -> _Parser:
    parser = _Parser(prog="destnet",
                     description="Train and evaluate intention-destination models "
                                 "over fused multi-behavior travel logs.")
    subs = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")

    p = subs.add_parser("generate", parents=[], help="write a synthetic dataset")
    _add_common(p, "config", "out", "seed")
    p.set_defaults(func=_cmd_generate)

    p = subs.add_parser("train", help="train one model and write a checkpoint")
    _add_common(p, "config", "data", "valid", "checkpoint", "out", "seed",
                "variant", "strategy")
    p.set_defaults(func=_cmd_train)

    p = subs.add_parser("evaluate", help="score a checkpoint on a test set")
    _add_common(p, "checkpoint", "test", "out")
    p.set_defaults(func=_cmd_evaluate)

    p = subs.add_parser("dump-attention", help="export attention weights per event")
    _add_common(p, "checkpoint", "data", "out")
    p.set_defaults(func=_cmd_dump_attention)

    p = subs.add_parser("compare-fusing", help="single-stream vs fusing strategies table")
    _add_common(p, "config", "data", "valid", "test", "out", "seed")
    p.set_defaults(func=_cmd_compare_fusing)

    p = subs.add_parser("grid-search", help="train a config grid, report per-config AUC")
    _add_common(p, "config", "data", "valid", "out", "seed")
    p.set_defaults(func=_cmd_grid_search)

    p = subs.add_parser("grad-check", help="finite-difference check of every variant")
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    p.set_defaults(func=_cmd_grad_check)
    return parser


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) is None:
            raise UsageError(f"--{name} is required for this subcommand")


def _cmd_generate(args) -> int:
    cfg = load_config(SyntheticConfig, args.config, {"seed": args.seed})
    manifest = generate_synthetic(cfg, args.out)
    for split, path in manifest["paths"].items():
        print(f"{split}: {path} ({manifest['counts'][split]} records)")
    print(f"intents: {manifest['intents']}")
    return 0


def _train_config(args) -> TrainConfig:
    overrides = {"seed": args.seed, "variant": getattr(args, "variant", None),
                 "strategy": getattr(args, "strategy", None)}
    return load_config(TrainConfig, args.config, overrides)


def _cmd_train(args) -> int:
    _require(args, "data", "valid", "checkpoint")
    cfg = _train_config(args)
    spec = cfg.variant_spec()
    train_records = load_dataset(args.data, n_candidates=cfg.n_cities)
    valid_records = load_dataset(args.valid, n_candidates=cfg.n_cities)
    t0 = time.perf_counter()
    train_batch = assemble_batch(train_records, spec.streams, cfg.max_len)
    valid_batch = assemble_batch(valid_records, spec.streams, cfg.max_len)
    params, history = train(train_batch, valid_batch, cfg)
    save_checkpoint(params, args.checkpoint)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(history.to_lines(with_seconds=False))
    best = history.best_epoch
    print(f"checkpoint: {args.checkpoint}")
    print(f"best_epoch={best} valid_auc={history.valid_auc[best]:.6f}")
    print(f"trained in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    return 0


def _cmd_evaluate(args) -> int:
    _require(args, "checkpoint", "test")
    params = load_checkpoint(args.checkpoint)
    records = load_dataset(args.test, n_candidates=params.n_cities)
    batch = assemble_batch(records, params.spec.streams, params.max_len)
    report = evaluate_model(params, batch, model_label=params.spec.kind,
                            dataset_label=str(args.test))
    sys.stdout.write(report.to_lines(with_seconds=True))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(report.to_lines(with_seconds=False))
    return 0


def _cmd_dump_attention(args) -> int:
    _require(args, "checkpoint", "data", "out")
    params = load_checkpoint(args.checkpoint)
    records = load_dataset(args.data, n_candidates=params.n_cities)
    rows = dump_attention(params, records, args.out)
    print(f"wrote {rows} trace rows to {args.out}")
    return 0


def _cmd_compare_fusing(args) -> int:
    _require(args, "data", "valid", "test")
    cfg = _train_config(args)
    train_records = load_dataset(args.data, n_candidates=cfg.n_cities)
    valid_records = load_dataset(args.valid, n_candidates=cfg.n_cities)
    test_records = load_dataset(args.test, n_candidates=cfg.n_cities)
    rows, _ = compare_fusing(train_records, valid_records, test_records, cfg)
    table = fusing_table(rows)
    sys.stdout.write(table)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(table)
    return 0


def _cmd_grid_search(args) -> int:
    _require(args, "config", "data", "valid")
    entries = expand_grid(parse_kv_file(args.config))
    overrides = {"seed": args.seed}
    configs = [(label, build_config(TrainConfig, values, overrides))
               for label, values in entries]
    base = configs[0][1]
    train_records = load_dataset(args.data, n_candidates=base.n_cities)
    valid_records = load_dataset(args.valid, n_candidates=base.n_cities)
    _, rows = grid_search(train_records, valid_records, configs)
    width = max(len(label) for label, _ in rows)
    lines = [f"{'config'.ljust(width)}  valid_auc"]
    for label, value in rows:
        lines.append(f"{label.ljust(width)}  {value:.6f}")
    best_label = rows[max(range(len(rows)), key=lambda i: rows[i][1])][0]
    lines.append(f"best: {best_label}")
    table = "\n".join(lines) + "\n"
    sys.stdout.write(table)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(table)
    return 0


def _cmd_grad_check(args) -> int:
    results = grad_suite()
    for kind, per_tensor in results.items():
        worst = max(per_tensor.values())
        print(f"{kind}: max_rel_error={worst:.3e} over {len(per_tensor)} tensors")
    overall = suite_max_error(results)
    print(f"overall: max_rel_error={overall:.3e}")
    if overall >= args.tolerance:
        print(f"gradient check failed: {overall:.3e} >= {args.tolerance:.1e}",
              file=sys.stderr)
        return 3
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:  # --help and friends
        return int(exc.code or 0)
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename or exc}", file=sys.stderr)
        return 1
    except (DataError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
