"""Command line entry point: synth, train, eval, gradcheck, inspect.

Exit codes: 0 success, 1 usage, 2 invalid configuration or missing input
file (the message names the field path or file), 3 runtime failure
(divergence, corrupt checkpoint, failed gradient check). Progress lines go
to stderr, results to stdout or files.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional

from .checks import gradcheck_names, run_gradcheck
from .config import (ConfigError, RunConfig, build_model, config_digest,
                     dry_run_text, load_config)
from .data import read_manifest, synth_generate
from .trainer import (CheckpointError, TrainingDivergedError, evaluate,
                      load_checkpoint, load_model_params, train)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse reserved exit code 2 for usage; we remap usage to 1."""

    def error(self, message):
        raise _UsageError(f"{self.format_usage()}error: {message}")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _existing(path: str, flag: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(flag, f"file {p} is missing")
    return p


def _abs_records(records: List[dict], base: Path) -> List[dict]:
    """Resolve relative sample paths now so later loads need no root."""
    out = []
    for rec in records:
        p = Path(rec["path"])
        if not p.is_absolute():
            rec = dict(rec, path=str(base / p))
        out.append(rec)
    return out


def _manifest_records(path: Path) -> List[dict]:
    return _abs_records(read_manifest(path), path.parent)


def _training_data(cfg: RunConfig, config_dir: Path, out: Path):
    """Materialize the config's data section into train/val record lists."""
    if cfg.manifest is None and cfg.synth is None:
        raise ConfigError("data", "section is required for training")
    if cfg.synth is not None:
        manifest = synth_generate(cfg.synth.count, cfg.synth.size,
                                  cfg.synth.seed, out_dir=out / "data")
        _log(f"synthesized {cfg.synth.count} samples -> {manifest}")
        records = _manifest_records(manifest)
    else:
        records = _manifest_records(
            _existing(str(config_dir / cfg.manifest), "data.manifest"))
    val_records = None
    if cfg.val_manifest is not None:
        val_records = _manifest_records(
            _existing(str(config_dir / cfg.val_manifest), "data.val_manifest"))
    return records, val_records


def _cmd_synth(args) -> int:
    if args.count < 1:
        raise ConfigError("--count", f"must be >= 1, got {args.count}")
    if args.size < 16:
        raise ConfigError("--size", f"must be >= 16, got {args.size}")
    manifest = synth_generate(args.count, args.size, args.seed,
                              out_dir=Path(args.out))
    print(manifest)
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(_existing(args.config, "config"))
    if args.dry_run:
        print(dry_run_text(cfg))
        return 0
    digest = config_digest(cfg)
    out = Path(args.out)
    records, val_records = _training_data(cfg, Path(args.config).parent, out)
    resume = _existing(args.resume, "--resume") if args.resume else None
    model = build_model(cfg)
    _log(f"training {cfg.train.steps} steps on {len(records)} samples "
         f"(digest 0x{digest:016x})")
    hist = train(model, records, cfg.train, cfg.weights,
                 val_records=val_records, out_dir=out, config_digest=digest,
                 resume_from=resume, loss_eps=cfg.loss_eps)
    for rec in hist.records:
        if "val_loss" in rec:
            _log(f"step {rec['step'] + 1}: train {rec['train_loss']:.6f} "
                 f"val {rec['val_loss']:.6f} acc {rec['val_acc']:.4f}")
    print(f"final train loss {hist.train_losses[-1]:.6f}")
    print(f"checkpoint {out / 'checkpoint_final.scpf'}")
    print(f"history {out / 'history.csv'}")
    return 0


def _cmd_eval(args) -> int:
    cfg = load_config(_existing(args.config, "config"))
    expected = None if args.force else config_digest(cfg)
    ckpt = load_checkpoint(_existing(args.ckpt, "--ckpt"),
                           expected_digest=expected, force=args.force)
    model = build_model(cfg)
    n = load_model_params(model, ckpt)
    records = _manifest_records(_existing(args.data, "--data"))
    _log(f"restored {n} parameter arrays; evaluating {len(records)} samples")
    report = evaluate(model, records, cfg.weights,
                      batch_size=cfg.train.batch_size,
                      threads=cfg.train.threads, loss_eps=cfg.loss_eps)
    print(report.text_block())
    return 0


def _cmd_gradcheck(args) -> int:
    rows = run_gradcheck(args.op, tol=args.tol, seed=args.seed)
    failed = 0
    for name, report in rows:
        status = "PASS" if report.passed else "FAIL"
        failed += not report.passed
        print(f"{status} {name}: max_rel_err {report.max_rel_err:.3e} "
              f"over {report.n_elements} elements")
    print(f"{len(rows) - failed}/{len(rows)} checks passed (tol {args.tol:g})")
    return 0 if failed == 0 else 3


def _cmd_inspect(args) -> int:
    ckpt = load_checkpoint(_existing(args.ckpt, "--ckpt"))
    print(f"digest 0x{ckpt.config_digest:016x}")
    print(f"version {ckpt.version}")
    print(f"arrays {len(ckpt.arrays)}")
    for name in sorted(ckpt.arrays):
        arr = ckpt.arrays[name]
        shape = "x".join(str(d) for d in arr.shape)
        print(f"{name} {shape} {arr.dtype}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scopeformer",
                     description="Ensembled convolutional feature maps feeding "
                                 "a transformer encoder, end to end.")
    sub = parser.add_subparsers(dest="cmd", metavar="command")

    p = sub.add_parser("synth", help="generate a labeled synthetic corpus")
    p.add_argument("--out", default="synth_data", help="output directory")
    p.add_argument("--count", type=int, default=64, help="number of samples")
    p.add_argument("--size", type=int, default=64, help="image side in pixels")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(run=_cmd_synth)

    p = sub.add_parser("train", help="train a model described by a JSON config")
    p.add_argument("--config", required=True, help="run config (JSON)")
    p.add_argument("--out", default="run", help="output directory")
    p.add_argument("--resume", default=None, metavar="CKPT",
                   help="checkpoint to continue from")
    p.add_argument("--dry-run", action="store_true",
                   help="validate and report shapes/parameters, then stop")
    p.set_defaults(run=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--config", required=True, help="run config (JSON)")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="manifest of samples")
    p.add_argument("--force", action="store_true",
                   help="skip the config digest check")
    p.set_defaults(run=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--op", default="all", choices=gradcheck_names() + ["all"],
                   metavar="NAME", help="one op, or all")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(run=_cmd_gradcheck)

    p = sub.add_parser("inspect", help="list a checkpoint's arrays and digest")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.set_defaults(run=_cmd_inspect)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        print(err, file=sys.stderr)
        return 1
    if getattr(args, "run", None) is None:
        print(parser.format_usage(), file=sys.stderr)
        return 1
    try:
        return args.run(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (CheckpointError, TrainingDivergedError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
