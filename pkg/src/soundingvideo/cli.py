"""Command-line interface.

Subcommands: synth-data, train-ae, train-dit, sample, evaluate,
inspect-checkpoint. Exit codes: 0 success, 1 usage error (including unknown
flags and missing config files), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .archive import archive_hash, load_checkpoint
from .config import RunConfig, config_hash, default_config, load_config, overfit_config


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def _load_cfg(args) -> RunConfig:
    if args.config is None:
        return overfit_config() if getattr(args, "overfit", False) else default_config()
    path = Path(args.config)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    return load_config(path)


def build_parser() -> _Parser:
    parser = _Parser(prog="soundingvideo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file (defaults to built-in config)")
        p.add_argument("--overfit", action="store_true",
                       help="use the small overfit preset when no config is given")

    p = sub.add_parser("synth-data", help="materialize the synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-ae", help="train the multi-modal autoencoder")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.add_argument("--progress", action="store_true")

    p = sub.add_parser("train-dit", help="train the joint latent generator")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--ae-checkpoint", required=True)
    p.add_argument("--resume")
    p.add_argument("--force", action="store_true", help="ignore config-hash mismatches")
    p.add_argument("--progress", action="store_true")

    p = sub.add_parser("sample", help="generate sounding videos")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--ae-checkpoint", required=True)
    p.add_argument("--dit-checkpoint", required=True)
    p.add_argument("--task", default="svg", choices=["svg", "a2v", "v2a"])
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--phi", type=float, default=None, help="guidance scale")
    p.add_argument("--formulation", choices=["paper-literal", "standard"], default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--cond-index", type=int, default=None,
                   help="dataset index providing the condition (a2v/v2a)")
    p.add_argument("--force", action="store_true")
    p.add_argument("--mux", action="store_true", help="mux mp4 via ffmpeg if available")

    p = sub.add_parser("evaluate", help="run the metric suite")
    common(p)
    p.add_argument("--out", required=True, help="metrics JSONL path")
    p.add_argument("--ae-checkpoint", required=True)
    p.add_argument("--dit-checkpoint", required=True)
    p.add_argument("--consistency-batch", type=int, default=16)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint manifest")
    p.add_argument("path")
    return parser


def _run(args) -> int:
    # imports deferred so `--help` and usage errors stay fast
    if args.command == "inspect-checkpoint":
        params, manifest, optim = load_checkpoint(args.path)
        print(json.dumps(manifest, indent=2, sort_keys=True))
        print(f"parameters: {len(params)} tensors, "
              f"content hash {archive_hash(Path(args.path) / 'params.npz')[:16]}")
        for name, tensor in list(params.items())[:8]:
            print(f"  {name}: {tuple(tensor.shape)} {tensor.dtype}")
        if len(params) > 8:
            print(f"  ... {len(params) - 8} more")
        print(f"optimizer state: {'present' if optim is not None else 'absent'}")
        return 0

    cfg = _load_cfg(args)
    from .toy import ToyDataset

    if args.command == "synth-data":
        dataset = ToyDataset(cfg.data)
        out = dataset.materialize(args.out)
        from .training import write_run_manifest
        write_run_manifest(out, cfg, "synth-data")
        print(f"wrote {len(dataset)} samples to {out} (config {config_hash(cfg)})")
        return 0

    if args.command == "train-ae":
        from .training import train_autoencoder
        ckpt = train_autoencoder(cfg, ToyDataset(cfg.data), args.out,
                                 resume=args.resume, progress=args.progress)
        print(f"final checkpoint: {ckpt}")
        return 0

    if args.command == "train-dit":
        from .training import train_dit
        ckpt = train_dit(cfg, ToyDataset(cfg.data), args.ae_checkpoint, args.out,
                         resume=args.resume, force=args.force, progress=args.progress)
        print(f"final checkpoint: {ckpt}")
        return 0

    if args.command == "sample":
        from .generate import generate
        dirs = generate(cfg, args.ae_checkpoint, args.dit_checkpoint, args.out,
                        task=args.task, batch=args.batch, steps=args.steps,
                        guidance_scale=args.phi, formulation=args.formulation,
                        seed=args.seed, cond_index=args.cond_index,
                        force=args.force, mux=args.mux)
        print(f"wrote {len(dirs)} samples under {args.out}")
        return 0

    if args.command == "evaluate":
        from .evaluate import evaluate
        records = evaluate(cfg, args.ae_checkpoint, args.dit_checkpoint, args.out,
                           consistency_batch=args.consistency_batch, force=args.force)
        for rec in records:
            print(json.dumps(rec, sort_keys=True))
        return 0

    raise UsageError(f"unknown command {args.command!r}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _run(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure contract
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
