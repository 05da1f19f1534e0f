"""Command-line entry point.

Exit codes: 0 success, 2 config/validation error, 3 I/O or file-format
error, 4 numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .config import RunConfig, load_run_config, resolve_seed
from .errors import ConfigError, LoadError, NumericError, ParameterError, UsageError
from .model import init_model
from .modelio import DTYPE_STATE, DTYPE_TERNARY, load_model, read_records, save_model
from .retrieval import (
    ImageSet,
    gen_synthetic_dataset,
    load_dataset,
    memory_report,
    save_dataset,
    sweep,
    write_sweep_csv,
)
from .tensor import Prng
from .train import FreezeMask, default_freeze_mask, train_distill, train_finetune, write_loss_curve

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def _parse_sparsity_list(text: str) -> list[float]:
    try:
        levels = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--sparsity: cannot parse {text!r}") from exc
    if not levels:
        raise ConfigError("--sparsity: empty list")
    bad = [s for s in levels if not 0.0 <= s < 1.0]
    if bad:
        raise ConfigError(f"--sparsity: levels must lie in [0, 1), got {bad}")
    return levels


@contextmanager
def _atomic_outputs(*paths):
    """Yield temp paths; move them into place only if the block succeeds."""
    tmps = []
    try:
        for p in paths:
            p = Path(p)
            p.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=p.parent, prefix=f".{p.name}.", suffix=".tmp")
            os.close(fd)
            os.chmod(tmp, 0o644)
            tmps.append(Path(tmp))
        yield tmps
        for tmp, p in zip(tmps, paths):
            os.replace(tmp, p)
    finally:
        for tmp in tmps:
            if tmp.exists():
                tmp.unlink()


def _config(args) -> tuple[RunConfig, int]:
    cfg = load_run_config(args.config)
    return cfg, resolve_seed(args.seed, cfg.seed)


def _training_images(args, cfg: RunConfig, seed: int) -> ImageSet:
    if getattr(args, "data", None):
        ds = load_dataset(args.data)
    else:
        ds = gen_synthetic_dataset(cfg.dataset, seed=Prng(seed).derive("train-data").seed)
    return ImageSet.concat(ds.references, ds.queries)


def _curve_path(args) -> Path:
    return Path(args.curve) if args.curve else Path(args.out).with_suffix(".loss.csv")


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config)
    ds_cfg = cfg.dataset
    # a dataset-level seed is the most specific config value, but flag and env still win
    seed = resolve_seed(args.seed, ds_cfg.seed if ds_cfg.seed is not None else cfg.seed)
    ds = gen_synthetic_dataset(ds_cfg, seed=seed)
    save_dataset(ds, args.out, ds_cfg)
    print(f"places={ds_cfg.num_places} references={len(ds.references)} "
          f"queries={len(ds.queries)} -> {args.out}")
    return EXIT_OK


def cmd_pretrain_teacher(args) -> int:
    cfg, seed = _config(args)
    teacher = init_model(cfg.model.twin(quantized=False), Prng(seed).derive("teacher-init"))
    data = _training_images(args, cfg, seed)
    curve = _curve_path(args)
    with _atomic_outputs(args.out, curve) as (tmp_model, tmp_curve):
        records = train_finetune(teacher, data, cfg.train_teacher, FreezeMask.all(teacher),
                                 seed=Prng(seed).derive("teacher-train").seed)
        save_model(teacher, tmp_model)
        write_loss_curve(records, tmp_curve)
    print(f"steps={len(records)} final_loss={records[-1].loss:.6g} -> {args.out}")
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg, seed = _config(args)
    teacher = load_model(args.teacher)
    if args.resume:
        student = load_model(args.resume)
        if not student.latents:
            raise UsageError(f"{args.resume} has no stored training state to resume from")
    else:
        student = init_model(cfg.model.twin(quantized=True), Prng(seed).derive("student-init"))
    data = _training_images(args, cfg, seed)
    curve = _curve_path(args)
    with _atomic_outputs(args.out, curve) as (tmp_model, tmp_curve):
        records = train_distill(student, teacher, data, cfg.train_distill,
                                seed=Prng(seed).derive("distill").seed, resume=bool(args.resume))
        save_model(student, tmp_model, include_state=args.save_state)
        write_loss_curve(records, tmp_curve)
    final = records[-1].loss if records else float("nan")
    print(f"steps={len(records)} final_loss={final:.6g} -> {args.out}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg, seed = _config(args)
    model = load_model(args.model)
    data = _training_images(args, cfg, seed)
    curve = _curve_path(args)
    freeze = default_freeze_mask(model)
    with _atomic_outputs(args.out, curve) as (tmp_model, tmp_curve):
        records = train_finetune(model, data, cfg.train_finetune, freeze,
                                 seed=Prng(seed).derive("finetune").seed)
        save_model(model, tmp_model, include_state=args.save_state)
        write_loss_curve(records, tmp_curve)
    print(f"steps={len(records)} final_loss={records[-1].loss:.6g} -> {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    levels = _parse_sparsity_list(args.sparsity)
    model = load_model(args.model)
    if not model.quantized and any(s != 0 for s in levels):
        raise UsageError("full-precision models can only be evaluated at sparsity 0")
    dataset = load_dataset(args.data)
    model_bytes = Path(args.model).stat().st_size
    results = sweep(model, dataset, levels, threads=args.threads, model_bytes=model_bytes)
    with _atomic_outputs(args.out) as (tmp,):
        write_sweep_csv(results, tmp)
    for r in (results[0], results[-1]) if len(results) > 1 else results:
        print(f"sparsity={r.sparsity:.4f} recall@1={r.recall_at[1]:.4f} tops={r.tops_per_query:.6g}")
    by_s = {round(r.sparsity, 4): r for r in results}
    if 0.0 in by_s and 0.4 in by_s:
        delta = by_s[0.4].recall_at[1] - by_s[0.0].recall_at[1]
        print(f"delta recall@1 (s=0.4 vs s=0): {delta:+.4f}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    data = Path(args.model).read_bytes()
    cfg, records = read_records(data)
    kind = "student" if cfg.quantized else "teacher"
    print(f"{args.model}: {kind} model, image={cfg.image} patch={cfg.patch} dim={cfg.dim} "
          f"depth={cfg.depth} heads={cfg.heads}")
    print(f"{'tensor':<28} {'dtype':<8} {'shape':<10} {'bytes':>8} {'gamma':>12}")
    names = {0: "f32", 1: "ternary", 2: "state"}
    f32_equiv = len(data)
    for r in records:
        gamma = f"{r.gamma:.6g}" if r.dtype == DTYPE_TERNARY else ""
        shape = "x".join(map(str, r.shape))
        print(f"{r.name:<28} {names[r.dtype]:<8} {shape:<10} {r.total_bytes:>8} {gamma:>12}")
        if r.dtype == DTYPE_TERNARY:
            f32_equiv += 4 * int(np.prod(r.shape)) - r.payload_bytes
    state = sum(r.total_bytes for r in records if r.dtype == DTYPE_STATE)
    header = len(data) - sum(r.total_bytes for r in records)
    print(f"header bytes: {header}")
    print(f"tensor bytes: {sum(r.total_bytes for r in records)}"
          + (f" (training state: {state})" if state else ""))
    print(f"total bytes: {len(data)}")
    print(f"hypothetical f32 bytes: {f32_equiv} (ratio {f32_equiv / len(data):.3f})")
    if args.baseline:
        print()
        print(memory_report(args.model, args.baseline).format())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=1, help="worker cap (default 1)")
    common.add_argument("--seed", type=int, default=None,
                        help="overrides TAT_SEED and the config seed")

    parser = argparse.ArgumentParser(prog="ternvpr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain-teacher", parents=[common], help="train the full-precision teacher")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--curve")
    p.set_defaults(func=cmd_pretrain_teacher)

    p = sub.add_parser("distill", parents=[common], help="distill a ternary student")
    p.add_argument("--config")
    p.add_argument("--teacher", required=True)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--curve")
    p.add_argument("--resume", help="student file with stored training state")
    p.add_argument("--save-state", action="store_true", help="store latents and optimizer state")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("finetune", parents=[common], help="fine-tune head and last two blocks")
    p.add_argument("--config")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--curve")
    p.add_argument("--save-state", action="store_true")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("sweep", parents=[common], help="recall and MACs across sparsity levels")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sparsity", default="0,0.1,0.2,0.3,0.4,0.5,0.6")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("inspect", parents=[common], help="per-tensor storage table")
    p.add_argument("--model", required=True)
    p.add_argument("--baseline", help="full-precision model for a memory comparison")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except LoadError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ParameterError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
