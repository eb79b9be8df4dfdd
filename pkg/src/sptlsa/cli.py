"""Command-line entry point: ``sptlsa <subcommand> [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .autograd import NumericalError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import FormatError, load_dataset
from .diagnostics import diagnose, export_class_attention, write_attention_map
from .experiments import (SHIFT_HEADER, SHIFT_PRESETS, SHIFT_RATIOS, TEMPERATURE_MULTIPLIERS, RunManifest,
                          ablate, ablation_header, gradcheck_model, run, shift_sweep, temperature_header,
                          temperature_sweep, write_csv)
from .model import VARIANT_FLAGS, ConfigError, build_model, variant_config
from .tokenization import receptive_field
from .training import TrainConfig, evaluate

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOLERANCE = 1e-4

log = logging.getLogger("sptlsa")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _csv_floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t]


def _csv_ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t]


def _csv_names(text: str) -> list[str]:
    return [t for t in text.split(",") if t]


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="run manifest JSON (model/train/dataset sections)")
    common.add_argument("--seed", type=int, help="override the training/initialisation seed")
    common.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    common.add_argument("--dataset", type=Path, help="dataset directory or file")
    common.add_argument("--kind", choices=["cifar10-binary", "mnist-idx"], default="cifar10-binary")
    common.add_argument("--allow-partial", action="store_true",
                        help="accept dataset files with non-standard record counts")
    common.add_argument("--subset", type=int, help="deterministic training subset size")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (SPTLSA_THREADS overrides)")
    common.add_argument("--variant", choices=list(VARIANT_FLAGS), help="apply a named variant's flags")
    common.add_argument("--epochs", type=int, help="override the number of epochs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="sptlsa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("train", parents=[common], help="train one model from a manifest")

    p = sub.add_parser("eval", parents=[common], help="top-1 accuracy of a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])

    p = sub.add_parser("ablate", parents=[common], help="train the variant suite")
    p.add_argument("--variants", type=_csv_names, default=list(VARIANT_FLAGS))
    p.add_argument("--seeds", type=_csv_ints, default=[0, 1, 2])

    p = sub.add_parser("sweep-temp", parents=[common], help="fixed-temperature sweep")
    p.add_argument("--multipliers", type=_csv_floats, default=list(TEMPERATURE_MULTIPLIERS))
    p.add_argument("--seeds", type=_csv_ints, default=[0])

    p = sub.add_parser("sweep-shift", parents=[common], help="shift direction / ratio sweep")
    p.add_argument("--presets", type=_csv_names, default=list(SHIFT_PRESETS))
    p.add_argument("--ratios", type=_csv_floats, default=list(SHIFT_RATIOS))

    p = sub.add_parser("diagnose", parents=[common], help="per-layer KL and temperature profiles")
    p.add_argument("--checkpoint", type=Path, help="trained model (default: fresh model from --config)")
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--kld-support", choices=["feasible", "all"], default="feasible")

    p = sub.add_parser("attn-map", parents=[common], help="export class-token attention for one image")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--layer", type=int, default=-1)

    p = sub.add_parser("rf", help="receptive field of a conv-like tokenizer")
    p.add_argument("--rtrans", type=int, required=True)
    p.add_argument("--stride", type=int, required=True)
    p.add_argument("--kernel", type=int, required=True)

    p = sub.add_parser("gradcheck", parents=[common], help="full-model finite-difference check")
    p.add_argument("--seeds", type=int, default=10, help="number of seeds")
    p.add_argument("--coords", type=int, default=12, help="sampled coordinates per parameter")
    return parser


# ------------------------------------------------------------------ helpers

def _threads(args) -> int:
    env = os.environ.get("SPTLSA_THREADS")
    return int(env) if env else int(getattr(args, "threads", 1) or 1)


def _thread_limit(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=n)


def _manifest(args) -> RunManifest:
    manifest = RunManifest.load(args.config) if args.config else RunManifest()
    if args.variant:
        manifest.model = variant_config(manifest.model, args.variant)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.subset is not None:
        overrides["subset_size"] = args.subset
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if overrides:
        manifest.train = TrainConfig(**{**manifest.train.to_dict(), **overrides})
    manifest.threads = _threads(args)
    return manifest


def _datasets(args, manifest: RunManifest, need_eval: bool = True):
    path = args.dataset or manifest.dataset.get("path")
    if path is None:
        raise UsageError("--dataset is required")
    kind = args.kind if args.dataset or "kind" not in manifest.dataset else manifest.dataset["kind"]
    train_ds = load_dataset(path, kind, "train", strict=not args.allow_partial)
    eval_ds = None
    if need_eval:
        try:
            eval_ds = load_dataset(path, kind, "test", stats=(train_ds.mean, train_ds.std),
                                   strict=not args.allow_partial)
        except FileNotFoundError:
            log.warning("no test split under %s; training without evaluation", path)
    h, w, c = train_ds.image_shape
    manifest.model = manifest.model.replace(image_height=h, image_width=w, channels=c,
                                            num_classes=train_ds.num_classes)
    manifest.dataset = {"id": f"{kind}:{Path(path).name}", "kind": kind,
                        "content_hash": train_ds.content_hash()}
    return train_ds, eval_ds


def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# -------------------------------------------------------------- subcommands

def cmd_train(args) -> int:
    manifest = _manifest(args)
    train_ds, eval_ds = _datasets(args, manifest)
    out = args.out
    result = run(manifest, train_ds, eval_ds, out)
    print(f"manifest {manifest.digest()}")
    print(f"checkpoint {_file_hash(out / 'checkpoint.bin')}")
    print(f"metrics {_file_hash(out / 'metrics.csv')}")
    if result.metrics and result.metrics[-1]["eval_top1"] is not None:
        print(f"top1 {result.metrics[-1]['eval_top1']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    strict = not args.allow_partial
    train_ds = load_dataset(args.dataset, args.kind, "train", strict=strict)
    ds = train_ds if args.split == "train" else load_dataset(args.dataset, args.kind, "test",
                                                             stats=(train_ds.mean, train_ds.std), strict=strict)
    print(f"{evaluate(ckpt.to_model(), ds):.6f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    manifest = _manifest(args)
    unknown = [v for v in args.variants if v not in VARIANT_FLAGS]
    if unknown:
        raise UsageError(f"unknown variants {unknown}")
    train_ds, eval_ds = _datasets(args, manifest)
    rows, _ = ablate(manifest.model, manifest.train, train_ds, eval_ds, args.seeds, args.variants)
    args.out.mkdir(parents=True, exist_ok=True)
    path = write_csv(args.out / "ablation.csv", ablation_header(args.seeds), rows)
    print(path.read_text(), end="")
    return EXIT_OK


def cmd_sweep_temp(args) -> int:
    manifest = _manifest(args)
    train_ds, eval_ds = _datasets(args, manifest)
    rows = temperature_sweep(manifest.model, manifest.train, train_ds, eval_ds, args.multipliers, args.seeds)
    args.out.mkdir(parents=True, exist_ok=True)
    path = write_csv(args.out / "temperature_sweep.csv", temperature_header(args.seeds), rows)
    print(path.read_text(), end="")
    return EXIT_OK


def cmd_sweep_shift(args) -> int:
    manifest = _manifest(args)
    train_ds, eval_ds = _datasets(args, manifest)
    rows = shift_sweep(manifest.model, manifest.train, train_ds, eval_ds, args.presets, args.ratios)
    args.out.mkdir(parents=True, exist_ok=True)
    path = write_csv(args.out / "shift_sweep.csv", SHIFT_HEADER, rows)
    print(path.read_text(), end="")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    manifest = _manifest(args)
    train_ds, eval_ds = _datasets(args, manifest)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint).to_model()
    else:
        model = build_model(manifest.model, manifest.train.seed)
    source = eval_ds if eval_ds is not None else train_ds
    images = source.images(slice(0, args.samples))
    report = diagnose(model, images, exclude_masked_diagonal=args.kld_support == "feasible")
    args.out.mkdir(parents=True, exist_ok=True)
    header = ["layer", "mean_kld", "mean_tau", "sqrt_dk", "tau_ratio", "learnable"]
    path = write_csv(args.out / "diagnostics.csv", header, report.rows())
    print(path.read_text(), end="")
    return EXIT_OK


def cmd_attn_map(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.to_model()
    strict = not args.allow_partial
    train_ds = load_dataset(args.dataset, args.kind, "train", strict=strict)
    try:
        source = load_dataset(args.dataset, args.kind, "test", stats=(train_ds.mean, train_ds.std), strict=strict)
    except FileNotFoundError:
        source = train_ds
    if not 0 <= args.index < len(source):
        raise UsageError(f"--index {args.index} outside [0, {len(source)})")
    grid = export_class_attention(model, source.images(slice(args.index, args.index + 1)), args.layer)
    args.out.mkdir(parents=True, exist_ok=True)
    csv_path, pgm_path = write_attention_map(grid, args.out / f"attn_map_{args.index}")
    print(csv_path)
    print(pgm_path)
    return EXIT_OK


def cmd_rf(args) -> int:
    try:
        print(receptive_field(args.rtrans, args.stride, args.kernel))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    manifest = _manifest(args)
    base = manifest.train.seed
    worst = 0.0
    for seed in range(base, base + args.seeds):
        err = gradcheck_model(manifest.model, seed, max_coords=args.coords)
        print(f"seed {seed}: max relative error {err:.3e}")
        worst = max(worst, err)
    ok = worst < GRADCHECK_TOLERANCE
    print(f"{'PASS' if ok else 'FAIL'} worst {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "sweep-temp": cmd_sweep_temp,
    "sweep-shift": cmd_sweep_shift, "diagnose": cmd_diagnose, "attn-map": cmd_attn_map,
    "rf": cmd_rf, "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(_threads(args)):
            return COMMANDS[args.command](args)
    except json.JSONDecodeError as exc:
        print(f"error: invalid config JSON: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
