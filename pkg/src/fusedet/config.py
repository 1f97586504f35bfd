"""Run configuration: one flat dataclass, serialized as plain key=value
lines so configs diff cleanly and round-trip exactly.

Defaults are the desk-scale recipe: attention width 32 with 4 heads, three
pyramid levels, 6 fusion blocks, SGD at lr 0.001 with momentum 0.9 and
weight decay 1e-4, batches of 4 episodes.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from typing import Dict, Tuple

from .head import DEFAULT_LEVEL_RANGES
from .necks import NeckConfig


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    neck_kind: str = "vfm+hfm"
    scale_strategy: str = "one-to-all"
    n_blocks: int = 6
    d: int = 32
    heads: int = 4
    ffn_hidden: int = 64
    query_levels: Tuple[int, ...] = (4, 5, 6)
    support_level: int = 5
    backbone_widths: Tuple[int, ...] = (16, 32, 32, 64, 64, 64)
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-4
    iterations: int = 2000
    batch_size: int = 4
    lambdas: Tuple[float, float, float] = (20.0, 2.0, 0.5)
    allow_negative: bool = False
    eval_scenes: int = 30
    eval_seed: int = 123
    level_ranges: Tuple[Tuple[int, float, float], ...] = tuple(
        (j, lo, hi) for j, (lo, hi) in sorted(DEFAULT_LEVEL_RANGES.items()))
    score_thresh: float = 0.2
    nms_iou: float = 0.5
    ckpt_every: int = 500
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.neck_config()  # validates kind, strategy, levels
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be positive")
        if len(self.lambdas) != 3 or any(v < 0 for v in self.lambdas):
            raise ValueError(f"bad loss weights {self.lambdas}")
        if not 0 < self.score_thresh < 1:
            raise ValueError(f"score_thresh {self.score_thresh} out of (0,1)")
        if not 0 < self.nms_iou <= 1:
            raise ValueError(f"nms_iou {self.nms_iou} out of (0,1]")
        covered = {j for j, _, _ in self.level_ranges}
        if covered != set(self.query_levels):
            raise ValueError(f"level_ranges cover {sorted(covered)}, "
                             f"need {self.query_levels}")
        if len(self.backbone_widths) < max(self.query_levels):
            raise ValueError("backbone too shallow for the requested levels")

    def neck_config(self) -> NeckConfig:
        return NeckConfig(self.neck_kind, self.scale_strategy, self.n_blocks,
                          tuple(self.query_levels), self.support_level)

    def ranges_dict(self) -> Dict[int, Tuple[float, float]]:
        return {j: (lo, hi) for j, lo, hi in self.level_ranges}


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_ranges(text: str) -> Tuple[Tuple[int, float, float], ...]:
    out = []
    for part in text.split(";"):
        j, lo, hi = part.split(":")
        out.append((int(j), float(lo), float(hi)))
    return tuple(out)


_PARSERS = {
    "seed": int, "neck_kind": str, "scale_strategy": str, "n_blocks": int,
    "d": int, "heads": int, "ffn_hidden": int,
    "query_levels": lambda s: tuple(int(v) for v in s.split(",")),
    "support_level": int,
    "backbone_widths": lambda s: tuple(int(v) for v in s.split(",")),
    "learning_rate": float, "momentum": float, "weight_decay": float,
    "iterations": int, "batch_size": int,
    "lambdas": lambda s: tuple(float(v) for v in s.split(",")),
    "allow_negative": lambda s: {"true": True, "false": False}[s.lower()],
    "eval_scenes": int, "eval_seed": int,
    "level_ranges": _parse_ranges,
    "score_thresh": float, "nms_iou": float,
    "ckpt_every": int, "out_dir": str,
}


def config_text(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "level_ranges":
            shown = ";".join(f"{j}:{_fmt(float(lo))}:{_fmt(float(hi))}"
                             for j, lo, hi in v)
        else:
            shown = _fmt(v)
        lines.append(f"{f.name}={shown}")
    return "\n".join(lines) + "\n"


def save_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w") as f:
        f.write(config_text(cfg))


def parse_config(text: str, base: RunConfig = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _PARSERS:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        try:
            updates[key] = _PARSERS[key](value.strip())
        except (ValueError, KeyError, IndexError) as e:
            raise ValueError(f"line {lineno}: bad value for {key}: {e}")
    return replace(cfg, **updates)


def load_config(path: str) -> RunConfig:
    with open(path) as f:
        return parse_config(f.read())


def apply_overrides(cfg: RunConfig, pairs) -> RunConfig:
    """Each pair is a 'key=value' string, same syntax as the file format."""
    return parse_config("\n".join(pairs), base=cfg)
