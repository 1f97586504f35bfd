"""Command line entry points: train, eval, viz, gradcheck.

Every subcommand resolves its config the same way: built-in defaults,
then an optional config file, then repeatable --set key=value overrides,
then --out for the output directory. Output filenames are fixed so runs
are comparable by path alone.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .config import RunConfig, apply_overrides, load_config, save_config
from .data import build_eval_set
from .gradcheck import run_suite
from .metrics import evaluate
from .model import Model
from .train import NonFiniteLossError, train
from .viz import render_episode


def _add_shared(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", metavar="PATH",
                     help="config file; missing keys keep their defaults")
    sub.add_argument("--set", metavar="KEY=VALUE", action="append",
                     default=[], dest="overrides",
                     help="override one config key (repeatable)")
    sub.add_argument("--out", metavar="DIR",
                     help="output directory (default: the config's out_dir)")


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.overrides:
        cfg = apply_overrides(cfg, args.overrides)
    if args.out:
        cfg = apply_overrides(cfg, [f"out_dir={args.out}"])
    return cfg


def _load_model(cfg: RunConfig, ckpt: str) -> Model:
    path = Path(ckpt)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    model = Model(cfg)
    load_checkpoint(path, model.params)
    return model


def _cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.txt")
    stride = max(1, cfg.iterations // 20)

    def progress(it, row):
        if it % stride == 0 or it == cfg.iterations - 1:
            print(row, flush=True)

    try:
        result = train(cfg, out, progress)
    except NonFiniteLossError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    print(f"wrote {out / 'loss.csv'} and {result.final_checkpoint}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    model = _load_model(cfg, args.ckpt)
    episodes = build_eval_set(args.split, cfg.eval_scenes, cfg.eval_seed)
    report = evaluate(model.detect, episodes)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "report.csv"
    with open(report_path, "w") as fh:
        for line in report.csv_lines():
            fh.write(line + "\n")
    print(report.summary())
    print(f"wrote {report_path}")
    return 0


def _cmd_viz(args) -> int:
    cfg = _resolve_config(args)
    model = _load_model(cfg, args.ckpt)
    episodes = build_eval_set(args.split, 8, args.episode_seed)
    if not episodes:
        print("error: no episode found for that seed", file=sys.stderr)
        return 1
    paths = render_episode(model, episodes[0], cfg.out_dir)
    for p in paths:
        print(f"wrote {p}")
    return 0


def _cmd_gradcheck(args) -> int:
    names = args.only or None
    rows = run_suite(names=names, report=lambda r: print(r.line(), flush=True))
    bad = [r for r in rows if not r.ok]
    print(f"{len(rows) - len(bad)}/{len(rows)} checks passed")
    return 1 if bad else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusedet",
        description="One-shot detector: training, evaluation, and inspection.")
    subs = parser.add_subparsers(dest="command", required=True)

    p_train = subs.add_parser("train", help="train a model from scratch")
    _add_shared(p_train)
    p_train.set_defaults(fn=_cmd_train)

    p_eval = subs.add_parser("eval", help="score a checkpoint on a split")
    _add_shared(p_eval)
    p_eval.add_argument("--ckpt", required=True, help="checkpoint to load")
    p_eval.add_argument("--split", default="novel", choices=("base", "novel"))
    p_eval.set_defaults(fn=_cmd_eval)

    p_viz = subs.add_parser("viz", help="render heatmaps and detections")
    _add_shared(p_viz)
    p_viz.add_argument("--ckpt", required=True, help="checkpoint to load")
    p_viz.add_argument("--episode-seed", type=int, default=0)
    p_viz.add_argument("--split", default="novel", choices=("base", "novel"))
    p_viz.set_defaults(fn=_cmd_viz)

    p_gc = subs.add_parser("gradcheck", help="verify gradients numerically")
    _add_shared(p_gc)
    p_gc.add_argument("--only", action="append",
                      help="run a single named check (repeatable)")
    p_gc.set_defaults(fn=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CheckpointError, ValueError, KeyError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
