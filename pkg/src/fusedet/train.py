"""Training loop: episode batches, SGD with momentum, CSV logging.

Every source of randomness is derived from the run seed, so two runs of
the same config produce byte-identical loss curves and checkpoints. A
non-finite loss aborts immediately with the iteration and the term that
went bad; limping on with NaNs in the velocity buffers helps nobody.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import Episode, sample_training_episode
from .model import Model
from .params import ParamGroup

LOSS_HEADER = "iter,cls,reg,ctn,total"
LOSS_TERMS = ("cls", "reg", "ctn", "total")


class NonFiniteLossError(RuntimeError):
    """Loss stopped being a number; carries where and which term."""

    def __init__(self, iteration: int, term: str, value: float):
        super().__init__(
            f"non-finite loss at iteration {iteration}: {term} = {value}")
        self.iteration = iteration
        self.term = term
        self.value = value


class MomentumSGD:
    """Classic momentum update: v = mu*v - lr*(g + wd*p), then p += v."""

    def __init__(self, params: ParamGroup, lr: float,
                 momentum: float = 0.0, weight_decay: float = 0.0):
        self._entries = list(params.named_params())
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: Dict[str, np.ndarray] = {
            name: np.zeros_like(p.data) for name, p in self._entries}

    def step(self) -> None:
        for name, p in self._entries:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.momentum * self._velocity[name] - self.lr * g
            self._velocity[name] = v
            p.data = p.data + v

    def zero_grad(self) -> None:
        for _, p in self._entries:
            p.grad = None


@dataclasses.dataclass
class TrainResult:
    model: Model
    loss_rows: List[str]
    checkpoint_paths: List[Path]
    final_checkpoint: Path


def batch_episodes(cfg: RunConfig, iteration: int) -> List[Episode]:
    """The batch for one iteration, each slot with its own seed stream.

    With allow_negative on, half the slots draw their target from the full
    pool instead of the classes present in the query, so a slice of every
    batch teaches the detector to stay silent when the support's class is
    absent; the other half keeps guaranteed positives so box supervision
    never dries up.
    """
    episodes = []
    for slot in range(cfg.batch_size):
        rng = np.random.default_rng(
            np.random.SeedSequence((cfg.seed, iteration, slot)))
        unconstrained = cfg.allow_negative and rng.uniform() < 0.5
        episodes.append(sample_training_episode(
            rng, allow_negative=unconstrained))
    return episodes


def format_loss_row(iteration: int, values) -> str:
    cls, reg, ctn, total = values
    return f"{iteration},{cls:.6f},{reg:.6f},{ctn:.6f},{total:.6f}"


def check_finite(iteration: int, values) -> None:
    for term, value in zip(LOSS_TERMS, values):
        if not np.isfinite(value):
            raise NonFiniteLossError(iteration, term, value)


def train(cfg: RunConfig, out_dir: Path,
          progress: Optional[Callable[[int, str], None]] = None) -> TrainResult:
    """Run the full schedule, writing loss.csv and periodic checkpoints.

    progress, if given, is called with (iteration, csv_row) after every
    update; the CLI uses it to echo the curve without buffering.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = Model(cfg)
    opt = MomentumSGD(model.params, cfg.learning_rate,
                      cfg.momentum, cfg.weight_decay)
    rows: List[str] = []
    ckpts: List[Path] = []
    loss_path = out_dir / "loss.csv"
    with open(loss_path, "w") as fh:
        fh.write(LOSS_HEADER + "\n")
        for it in range(cfg.iterations):
            episodes = batch_episodes(cfg, it)
            opt.zero_grad()
            with T.Tape():
                breakdown = model.loss_on_batch(episodes)
                values = breakdown.values()
                check_finite(it, values)
                T.backward(breakdown.total)
            opt.step()
            row = format_loss_row(it, values)
            rows.append(row)
            fh.write(row + "\n")
            fh.flush()  # keep the curve tailable during long runs
            if progress is not None:
                progress(it, row)
            done = it + 1
            if cfg.ckpt_every and done % cfg.ckpt_every == 0:
                path = out_dir / f"ckpt-{done}.bin"
                save_checkpoint(path, model.params)
                ckpts.append(path)
    final = out_dir / f"ckpt-{cfg.iterations}.bin"
    if not ckpts or ckpts[-1] != final:
        save_checkpoint(final, model.params)
        ckpts.append(final)
    return TrainResult(model, rows, ckpts, final)
