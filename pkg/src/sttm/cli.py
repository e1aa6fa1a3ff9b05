"""Command line entry points.

Exit codes: 0 on success, 2 for configuration problems, 3 for data problems
(unreadable tensors, malformed manifests, incompatible checkpoints).
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import ConfigError, RunConfig, load_config
from .datamodel import SynthSpec, write_synth
from .tensorio import DataError, load_manifest
from .trainer import (
    run_eval,
    run_pretrain,
    run_sample_prior,
    run_train_high,
    run_train_low,
    run_transfer,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sttm", description="Cross-subject fMRI decoding toolkit")
    parser.add_argument("--config", help="path to a JSON config; defaults apply when omitted")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    parser.add_argument("--out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="generate a synthetic dataset under --out")

    p = sub.add_parser("train-high", help="train subject adapters, backbone, tokenizer, projector, and prior")
    p.add_argument("--data", required=True, help="dataset manifest JSON")
    p.add_argument("--epochs", type=int, help="override configured epoch count")

    p = sub.add_parser("train-low", help="train the latent reconstruction pipeline")
    p.add_argument("--data", required=True)
    p.add_argument("--high-ckpt", help="high-level checkpoint supplying guidance")
    p.add_argument("--no-guidance", action="store_true", help="train without the semantic guidance path")
    p.add_argument("--epochs", type=int, help="override configured epoch count")

    p = sub.add_parser("pretrain", help="train-high followed by guided train-low")
    p.add_argument("--data", required=True)

    p = sub.add_parser("transfer", help="two-stage adapter transfer to a new subject")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="pretrained high-level checkpoint")
    p.add_argument("--subject", help="subject id to transfer; inferred when the manifest adds exactly one")

    p = sub.add_parser("sample-prior", help="write prior sample tensors for test items")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int, help="chains per item (default: config prior.sample_n)")
    p.add_argument("--limit", type=int, default=8, help="test items per subject")

    p = sub.add_parser("eval", help="retrieval, prior, and reconstruction report on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="high-level checkpoint")
    p.add_argument("--low-ckpt", help="optional low-level checkpoint")
    p.add_argument("--pool", type=int, default=50, help="retrieval pool size")
    p.add_argument("--iters", type=int, default=10, help="retrieval pool resamplings")
    p.add_argument("--k", type=int, default=1, help="retrieval top-k")

    p = sub.add_parser("validate", help="check a config (and optionally a manifest) without running anything")
    p.add_argument("--data", help="dataset manifest JSON to validate")

    return parser


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("seed must be non-negative")
        cfg.seed = args.seed
    return cfg


def _require_out(args, parser) -> str:
    if not args.out:
        parser.error(f"--out is required for {args.command}")
    return args.out


def _dispatch(args, parser) -> int:
    cfg = _load_cfg(args)
    if args.command == "synth":
        out = _require_out(args, parser)
        spec = SynthSpec(
            n_subjects=cfg.synth.n_subjects,
            latent_dim=cfg.synth.latent_dim,
            voxels_per_subject=cfg.synth.voxels_per_subject,
            n_train=cfg.synth.n_train,
            n_test=cfg.synth.n_test,
            noise_sigma=cfg.synth.noise_sigma,
            n_tokens=cfg.dims.K,
            embed_dim=cfg.dims.D,
            latent_channels=cfg.dims.C,
            latent_size=cfg.dims.S,
            seed=cfg.seed,
        )
        manifest_path = write_synth(spec, out)
        print(json.dumps({"manifest": str(manifest_path)}))
        return 0
    if args.command == "train-high":
        res = run_train_high(cfg, args.data, _require_out(args, parser), epochs=args.epochs)
        print(json.dumps(res))
        return 0
    if args.command == "train-low":
        if args.no_guidance:
            cfg.lowlevel.guidance = False
        res = run_train_low(cfg, args.data, _require_out(args, parser), high_ckpt_dir=args.high_ckpt, epochs=args.epochs)
        print(json.dumps(res))
        return 0
    if args.command == "pretrain":
        res = run_pretrain(cfg, args.data, _require_out(args, parser))
        print(json.dumps(res))
        return 0
    if args.command == "transfer":
        res = run_transfer(cfg, args.ckpt, args.data, _require_out(args, parser), subject_id=args.subject)
        print(json.dumps(res))
        return 0
    if args.command == "sample-prior":
        selected = run_sample_prior(cfg, args.ckpt, args.data, _require_out(args, parser), n=args.n, limit=args.limit)
        print(json.dumps(selected))
        return 0
    if args.command == "eval":
        report = run_eval(
            cfg,
            args.ckpt,
            args.data,
            _require_out(args, parser),
            low_ckpt_dir=args.low_ckpt,
            pool=args.pool,
            iterations=args.iters,
            k=args.k,
        )
        print(json.dumps(report, indent=2))
        return 0
    if args.command == "validate":
        checked = {"config": "ok"}
        if args.data:
            manifest = load_manifest(args.data)
            checked["manifest"] = "ok"
            checked["subjects"] = [s.id for s in manifest.subjects]
        print(json.dumps(checked))
        return 0
    parser.error(f"unknown command {args.command!r}")
    return 2


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _dispatch(args, parser)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
