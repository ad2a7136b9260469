"""Command-line interface.

Exit codes: 0 success, 2 validation error, 3 numeric failure (non-finite loss),
4 gradient-check failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from . import harness as hn
from .numerics import ContractError
from .synthdata import DatasetError


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON run config (mirrors RunConfig)")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--precision", choices=["f32", "f64"],
                   help="override precision mode")
    p.add_argument("--frames", type=int, help="override data.frames")


def _load_cfg(args) -> hn.RunConfig:
    cfg = hn.load_config(args.config) if args.config else hn.RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed,
                                  data=dataclasses.replace(cfg.data, seed=args.seed))
    if getattr(args, "precision", None) is not None:
        cfg = dataclasses.replace(cfg, precision=args.precision)
    if getattr(args, "frames", None) is not None:
        cfg = dataclasses.replace(cfg,
                                  data=dataclasses.replace(cfg.data, frames=args.frames))
    if getattr(args, "ablate_relations", False):
        cfg = dataclasses.replace(cfg, ablate_relations=True)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvpose",
        description="Multi-view pose transformer: data generation, training, "
                    "evaluation, gradient checking")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--num-samples", type=int, help="override data.num_samples")
    p.add_argument("--occlusion", type=float, help="override data.occlusion_q")

    p = sub.add_parser("train", help="train a model on a generated dataset")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--eval-dir", help="eval split (defaults to --data)")
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.add_argument("--ablate-relations", action="store_true",
                   help="train the spatial-only baseline")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--use-gt", action="store_true",
                   help="bypass the model and score ground truth as prediction")

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    _add_common(p)
    p.add_argument("--sample-per-param", type=int,
                   help="check a random element subset per parameter")
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("frame-study", help="train/evaluate across frame lengths")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--frames-list", default="8,32,128",
                   help="comma-separated frame lengths")
    p.add_argument("--eval-occlusion", type=float, default=0.3)

    p = sub.add_parser("inspect-checkpoint", help="print checkpoint manifest summary")
    p.add_argument("checkpoint")
    return parser


def _run(args) -> int:
    if args.command == "gen-data":
        cfg = _load_cfg(args)
        n = args.num_samples
        hn.generate_dataset(cfg, args.out, num_samples=n,
                            occlusion_q=args.occlusion)
        print(f"wrote dataset to {args.out}")
        return 0

    if args.command == "train":
        cfg = _load_cfg(args)
        result = hn.train(cfg, args.data, args.out, resume=args.resume,
                          eval_dir=args.eval_dir)
        print(f"trained {result.steps} steps; final loss "
              f"{result.losses[-1]:.6g}; checkpoint {result.final_checkpoint}")
        return 0

    if args.command == "eval":
        model, cfg, _ = hn.model_from_checkpoint(args.checkpoint)
        report = hn.evaluate(model, cfg, args.data, out_dir=args.out,
                             use_gt_as_pred=args.use_gt)
        print(json.dumps(report.overall, indent=1, sort_keys=True))
        return 0

    if args.command == "gradcheck":
        cfg = _load_cfg(args) if args.config else None
        ok, per_param = hn.gradcheck(cfg, sample_per_param=args.sample_per_param,
                                     tol=args.tol)
        worst = max(per_param, key=per_param.get)
        print(f"gradcheck {'PASS' if ok else 'FAIL'}: worst {worst} "
              f"rel err {per_param[worst]:.3e} (tol {args.tol:g})")
        return 0 if ok else 4

    if args.command == "frame-study":
        cfg = _load_cfg(args)
        f_list = tuple(int(x) for x in args.frames_list.split(","))
        rows = hn.frame_length_study(cfg, f_list, args.out,
                                     eval_occlusion_q=args.eval_occlusion)
        for r in rows:
            print(f"f={r['frames']:4d}  AP {r['AP']:.4f}  AR {r['AR']:.4f}  "
                  f"PCK {r['PCK']:.4f}  MSE {r['MSE']:.3e}")
        return 0

    if args.command == "inspect-checkpoint":
        manifest = hn.load_checkpoint(args.checkpoint)
        n_params = len(manifest["params"])
        n_elems = sum(int(np.prod(e["shape"])) for e in manifest["params"])
        print(f"schema_version: {manifest['schema_version']}")
        print(f"config_hash:    {manifest['config_hash']}")
        print(f"step:           {manifest['step']}")
        print(f"epoch:          {manifest['epoch']}")
        print(f"dtype:          {manifest['dtype']}")
        print(f"parameters:     {n_params} tensors, {n_elems} elements, "
              f"{manifest['payload_bytes']} bytes")
        print("offsets partition payload: ok")
        return 0

    raise AssertionError(f"unhandled command {args.command}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except (hn.ValidationError, DatasetError, ContractError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except hn.NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
