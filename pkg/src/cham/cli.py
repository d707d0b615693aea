"""Command-line entry point: ``cham {gen,train,eval,gradcheck,attend}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Diagnostics go
to stderr; results go to stdout.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint
from .config import RunConfig, load_config
from .data import generate_dataset, load_manifest, read_features
from .export import write_attention_csv, write_pgm
from .model import export_attention, forward_sequence, predict
from .training import GRADCHECK_CONFIG, grad_check, train_loop

log = logging.getLogger("cham")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cham", description="Convolutional hierarchical attention model")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen", help="write a synthetic CHAMFEAT dataset and manifest.csv")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--per-class", required=True, type=int, help="training sequences per class")
    p.add_argument("--test-per-class", type=int, default=None,
                   help="test sequences per class (default: per-class // 2)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", type=Path, help="take grid, feature_channels, seq_len from here")

    p = sub.add_parser("train", help="train a model on the train split of a manifest")
    p.add_argument("--config", type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--metrics", type=Path)

    p = sub.add_parser("eval", help="per-class and overall accuracy on the test split")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)

    p = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    p.add_argument("--config", type=Path,
                   help="model config to check (default: tiny config, both g activations)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-per-tensor", type=int, default=None)

    p = sub.add_parser("attend", help="export per-step attention maps for one sequence")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--format", choices=("csv", "pgm"), default="csv")
    return parser


def _run_config(path) -> RunConfig:
    return load_config(path) if path is not None else RunConfig()


def cmd_gen(args) -> int:
    cfg = _run_config(args.config).model
    if args.per_class < 1:
        raise UsageError("--per-class must be >= 1")
    shape = (cfg.seq_len, cfg.grid, cfg.grid, cfg.feature_channels)
    manifest = generate_dataset(args.out, args.per_class, args.seed, shape, args.test_per_class)
    print(f"wrote {manifest}")
    return 0


def cmd_train(args) -> int:
    from .model import ChamModel

    run = _run_config(args.config)
    manifest, train, test = load_manifest(args.data, run.model.num_classes)
    model = ChamModel.init(run.model, run.train.seed)
    final, rows = train_loop(train, model, run.train, val=test, checkpoint_path=args.out,
                             metrics_path=args.metrics)
    last = rows[-1] if rows else None
    if last is not None:
        val = "n/a" if last.val_acc is None else f"{last.val_acc:.4f}"
        print(f"iter {last.iter} loss {last.loss:.6f} train_acc {last.train_acc:.4f} "
              f"val_acc {val}")
    print(f"wrote {args.out}")
    return 0


def evaluate(ckpt: Checkpoint, sequences):
    """Return ``(per-class (hits, total) list, hits, total)`` using :func:`predict`."""
    model = ckpt.to_model()
    n = model.config.num_classes
    per_class = [[0, 0] for _ in range(n)]
    for seq in sequences:
        guess, _ = predict(forward_sequence(model, seq, "eval"))
        per_class[seq.label][1] += 1
        per_class[seq.label][0] += int(guess == seq.label)
    hits = sum(h for h, _ in per_class)
    return per_class, hits, len(sequences)


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    _, _, test = load_manifest(args.data, ckpt.config.num_classes)
    per_class, hits, total = evaluate(ckpt, test)
    for c, (h, t) in enumerate(per_class):
        acc = f"{h / t:.4f}" if t else "n/a"
        print(f"class {c}: {h}/{t} accuracy {acc}")
    print(f"overall: {hits}/{total} accuracy {hits / total:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.config is None:
        configs = [GRADCHECK_CONFIG.replace(g_activation=g) for g in ("sigmoid", "tanh")]
    else:
        configs = [load_config(args.config).model]
    ok = True
    for cfg in configs:
        report = grad_check(cfg, seed=args.seed, max_per_tensor=args.max_per_tensor)
        print(report.format())
        ok = ok and report.passed
    return 0 if ok else 1


def cmd_attend(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.to_model()
    seq = read_features(args.input)
    trace = forward_sequence(model, seq, "eval")
    args.out.mkdir(parents=True, exist_ok=True)
    for t in range(1, len(trace.layer1) + 1):
        att = export_attention(trace, t)
        target = args.out / f"step_{t:03d}.{args.format}"
        if args.format == "csv":
            write_attention_csv(target, att)
        else:
            write_pgm(target, att)
    print(f"wrote {len(trace.layer1)} maps to {args.out}")
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "attend": cmd_attend}


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(message)s")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"cham {args.command}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, IndexError, FloatingPointError) as exc:
        print(f"cham {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
