"""Command-line driver: ``rave train``, ``rave trace``, ``rave ablate``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from typing import Optional, Sequence

from .errors import RaveError
from .experiments import RunConfig, resolve_output_dir, run_ablate, run_trace, run_train
from .model import ToyModelSpec

log = logging.getLogger("rave")

LOCATION = {"pre": "pre_softmax", "post": "post_softmax"}
FORM = {"add": "additive", "mul": "multiplicative"}
STAGE = {"pd": "prefill_and_decode", "dec": "decode_only"}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config JSON (a previous run.json also works)")
    p.add_argument("--out", help="output directory (default: $RAVE_OUTPUT_ROOT/<name>)")
    p.add_argument("--name", help="run name used under $RAVE_OUTPUT_ROOT")
    p.add_argument("--variant", choices=["standard", "rave"])
    p.add_argument("--location", choices=sorted(LOCATION))
    p.add_argument("--form", choices=sorted(FORM))
    p.add_argument("--head-ratio", type=float)
    p.add_argument("--stage", choices=sorted(STAGE), help="pd = prefill+decoding, dec = decoding only")
    p.add_argument("--gamma", type=float)
    p.add_argument("--gate-init", choices=["zero", "half", "normal"])
    p.add_argument("--seed", type=int, help="data seed")
    p.add_argument("--model-seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--label-mode", choices=["image", "question"])
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rave", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a toy model, write checkpoint + loss CSV + sidecar")
    _add_common(p_train)

    p_trace = sub.add_parser("trace", help="decode with attention tracing, export mass curves")
    _add_common(p_trace)
    p_trace.add_argument("--checkpoint", required=True)
    p_trace.add_argument("--num-prompts", type=int)
    p_trace.add_argument("--max-new-tokens", type=int)
    p_trace.add_argument("--trace-seed", type=int)
    p_trace.add_argument("--no-system", action="store_true", help="drop the system segment from prompts")

    p_ablate = sub.add_parser("ablate", help="train every ablation variant, write results.csv")
    _add_common(p_ablate)
    p_ablate.add_argument("--grid", choices=["axes", "full"])
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    if args.config:
        cfg = RunConfig.load(args.config)
    elif args.command == "ablate":
        cfg = RunConfig(model=ToyModelSpec(n_heads=8, n_kv_heads=2), name="ablate")
    else:
        cfg = RunConfig(name=args.command)

    model_kw = {}
    if args.variant:
        model_kw["variant"] = args.variant
    if args.location:
        model_kw["location"] = LOCATION[args.location]
    if args.form:
        model_kw["form"] = FORM[args.form]
    if args.head_ratio is not None:
        model_kw["head_ratio"] = args.head_ratio
    if args.stage:
        model_kw["stage"] = STAGE[args.stage]
    if args.gamma is not None:
        model_kw["gamma"] = args.gamma
    train_kw = {k: v for k, v in (("seed", args.seed), ("steps", args.steps), ("lr", args.lr),
                                  ("batch_size", args.batch_size), ("label_mode", args.label_mode))
                if v is not None}
    top_kw = {k: v for k, v in (("gate_init", args.gate_init), ("model_seed", args.model_seed),
                                ("name", args.name)) if v is not None}
    trace_kw = {}
    if args.command == "trace":
        for key, attr in (("num_prompts", "num_prompts"), ("max_new_tokens", "max_new_tokens"),
                          ("seed", "trace_seed")):
            if getattr(args, attr) is not None:
                trace_kw[key] = getattr(args, attr)
        if args.no_system:
            trace_kw["drop_system"] = True
    if args.command == "ablate" and args.grid:
        top_kw["grid"] = args.grid

    return dataclasses.replace(
        cfg,
        model=dataclasses.replace(cfg.model, **model_kw),
        train=dataclasses.replace(cfg.train, **train_kw),
        trace=dataclasses.replace(cfg.trace, **trace_kw),
        **top_kw,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        out_dir = resolve_output_dir(args.out, cfg.name)
    except (RaveError, ValueError, TypeError) as exc:
        print(f"rave {args.command}: error: {exc}", file=sys.stderr)
        return 2

    try:
        if args.command == "train":
            metrics = run_train(cfg, out_dir)
            print(f"final_loss={metrics['final_loss']:.6f} eval_loss={metrics['loss']:.6f} "
                  f"accuracy={metrics['accuracy']:.4f} -> {out_dir}")
        elif args.command == "trace":
            # an explicit config must describe the checkpoint's model; without one, trust the checkpoint
            profiles = run_trace(_adopt_checkpoint_spec(cfg, args), args.checkpoint, out_dir,
                                 check_spec=bool(args.config))
            print(f"traced {len(profiles)} steps -> {out_dir}")
        else:
            rows = run_ablate(cfg, out_dir)
            failed = [r["name"] for r in rows if r["status"] != "ok"]
            print(f"{len(rows)} variants -> {out_dir / 'results.csv'}")
            if failed:
                print(f"rave ablate: error: failed variants: {', '.join(failed)}", file=sys.stderr)
                return 1
    except (RaveError, ValueError, OSError) as exc:
        print(f"rave {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def _adopt_checkpoint_spec(cfg: RunConfig, args) -> RunConfig:
    if args.config:
        return cfg
    from .checkpoint import load_checkpoint
    from .train import TrainConfig

    _, spec, _, meta = load_checkpoint(args.checkpoint)
    train_cfg = TrainConfig.from_dict(meta["train"]) if "train" in meta else cfg.train
    return dataclasses.replace(cfg, model=ToyModelSpec.from_dict(spec), train=train_cfg)


if __name__ == "__main__":
    sys.exit(main())
