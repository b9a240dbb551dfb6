"""Command line entry point: ``turngraph <command> [flags]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import pipeline as P
from .config import ConfigError, TrainConfig, load_config
from .data import SynthConfig, generate, load_records, save_records
from .records import RecordError
from .tensor import ShapeError


def _add_common(p: argparse.ArgumentParser, data=True, checkpoint=False, out=True) -> None:
    p.add_argument("--config", type=Path, help="flat key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int)
    if data:
        p.add_argument("--data", type=Path, required=True, help="JSONL video records")
    if checkpoint:
        p.add_argument("--checkpoint", type=Path)
    if out:
        p.add_argument("--out", type=Path, default=Path("runs/latest"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="turngraph")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic video records")
    g.add_argument("--out", type=Path, required=True, help="output JSONL path")
    g.add_argument("--seed", type=int)
    for f in dataclasses.fields(SynthConfig):
        if f.name != "seed":
            g.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=type(f.default))

    p = sub.add_parser("pretrain", help="contrastive pretraining")
    _add_common(p)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.add_argument("--sweep", action="store_true", help="run the augmentation ratio grid")
    p.add_argument("--grid", type=str, default="0.25,0.5,0.75")
    p.add_argument("--no-finetune", action="store_true", help="sweep: skip the QA stage")

    p = sub.add_parser("finetune", help="QA fine-tuning")
    _add_common(p, checkpoint=True)

    p = sub.add_parser("eval", help="QA accuracy of a fine-tuned checkpoint")
    _add_common(p, checkpoint=True, out=False)
    p.add_argument("--split", choices=("val", "train", "all"), default="val")

    p = sub.add_parser("probe-speaker", help="speaker-identity probe on factor vectors")
    _add_common(p, checkpoint=True, out=False)

    p = sub.add_parser("analyze-edges", help="edge reduction by turn count")
    _add_common(p, out=False)

    p = sub.add_parser("analyze-attention", help="cross- vs within-turn attention")
    _add_common(p, checkpoint=True, out=False)
    return parser


def _config(args) -> TrainConfig:
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(item, "expected KEY=VALUE")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def _need_checkpoint(args):
    if args.checkpoint is None:
        raise P.PipelineError(f"{args.command} needs --checkpoint")
    return args.checkpoint


def run(args) -> object:
    if args.command == "gen-data":
        fields = {f.name: getattr(args, f.name) for f in dataclasses.fields(SynthConfig)
                  if getattr(args, f.name, None) is not None}
        cfg = SynthConfig(**fields)
        cfg.validate()
        videos = generate(cfg)
        save_records(videos, args.out)
        return {"videos": len(videos), "path": str(args.out)}

    cfg = _config(args)
    videos = load_records(args.data)
    if args.command == "pretrain":
        if args.sweep:
            grid = [float(x) for x in args.grid.split(",") if x.strip()]
            return P.sweep_ratios(cfg, videos, args.out, grid, finetune=not args.no_finetune)
        recs = P.cmd_pretrain(cfg, videos, args.out, resume=args.resume)
        return {"epochs": len({r["epoch"] for r in recs}),
                "checkpoint": str(args.out / P.CHECKPOINT_NAME),
                "final": {r["key"]: r["value"] for r in recs[-4:]}}
    if args.command == "finetune":
        return P.cmd_finetune(cfg, videos, args.checkpoint, args.out)
    if args.command == "eval":
        return P.cmd_eval(_need_checkpoint(args), videos, args.split)
    if args.command == "probe-speaker":
        return dataclasses.asdict(P.cmd_probe_speaker(_need_checkpoint(args), videos))
    if args.command == "analyze-edges":
        return P.cmd_analyze_edges(videos, cfg.link_factors, cfg.max_seq_len)
    if args.command == "analyze-attention":
        return P.cmd_analyze_attention(_need_checkpoint(args), videos)
    raise P.PipelineError(f"unknown command {args.command}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except ConfigError as err:
        return _fail("config", str(err), key=err.key)
    except (P.PipelineError, RecordError, ShapeError, ValueError, OSError) as err:
        return _fail(type(err).__name__, str(err))
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def _fail(kind: str, message: str, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, **extra}), file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
