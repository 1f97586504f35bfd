"""Driver for the fusion-scheme and attention-depth studies.

Each run is a (neck kind, block depth, seed) cell trained for the full
schedule and scored on the novel split. Finished cells are recognized by
their artifacts and reused, so the study can be resumed after an
interruption and the acceptance tests do not retrain what a previous
invocation already produced. Training is deterministic, which makes the
reuse transparent: rerunning a cell would write byte-identical files.

Run the whole grid from the shell with

    python3 -m fusedet.experiments --root runs/ablation
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path
from typing import Dict, Iterable, List, Tuple

from .config import RunConfig, config_text, save_config
from .data import build_eval_set
from .metrics import evaluate
from .train import train

FUSION_KINDS = ("vfm+hfm", "fpn+hfm", "vfm+correlation", "vfm+reweighting")
DEPTH_BLOCKS = (2, 6)
SEEDS = (0, 1, 2)
EVAL_SCENES = 60
EVAL_SEED = 123


def study_config(kind: str, n_blocks: int, seed: int) -> RunConfig:
    """One cell of the study grid; everything else stays at defaults."""
    return RunConfig(seed=seed, neck_kind=kind, n_blocks=n_blocks,
                     iterations=2000, ckpt_every=1000,
                     eval_scenes=EVAL_SCENES, eval_seed=EVAL_SEED,
                     out_dir=run_tag(kind, n_blocks, seed))


def run_tag(kind: str, n_blocks: int, seed: int) -> str:
    return f"{kind.replace('+', '-')}-n{n_blocks}-s{seed}"


def grid() -> List[Tuple[str, int, int]]:
    cells = [(kind, 6, seed) for kind in FUSION_KINDS for seed in SEEDS]
    cells += [("vfm+hfm", 2, seed) for seed in SEEDS]
    return cells


def _artifacts_valid(cell_dir: Path, cfg: RunConfig) -> bool:
    config_path = cell_dir / "config.txt"
    result_path = cell_dir / "result.json"
    loss_path = cell_dir / "loss.csv"
    if not (config_path.is_file() and result_path.is_file()
            and loss_path.is_file()):
        return False
    if config_path.read_text() != config_text(cfg):
        return False
    if len(loss_path.read_text().splitlines()) != cfg.iterations + 1:
        return False
    try:
        result = json.loads(result_path.read_text())
    except json.JSONDecodeError:
        return False
    return "novel_ap50" in result and "train_seconds" in result


def ensure_run(kind: str, n_blocks: int, seed: int, root: Path,
               progress=None) -> Dict:
    """Train and evaluate one cell unless its artifacts already exist."""
    cfg = study_config(kind, n_blocks, seed)
    cell_dir = Path(root) / run_tag(kind, n_blocks, seed)
    if _artifacts_valid(cell_dir, cfg):
        return json.loads((cell_dir / "result.json").read_text())

    cell_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, cell_dir / "config.txt")
    t0 = time.perf_counter()
    result = train(cfg, cell_dir, progress)
    train_seconds = time.perf_counter() - t0

    episodes = build_eval_set("novel", cfg.eval_scenes, cfg.eval_seed)
    report = evaluate(result.model.detect, episodes)
    with open(cell_dir / "report.csv", "w") as fh:
        for line in report.csv_lines():
            fh.write(line + "\n")

    summary = {
        "kind": kind,
        "n_blocks": n_blocks,
        "seed": seed,
        "novel_ap50": 100.0 * report.mean_ap,
        "per_class": {str(k): (None if v is None else 100.0 * v)
                      for k, v in report.per_class.items()},
        "train_seconds": train_seconds,
        "first_loss": float(result.loss_rows[0].split(",")[-1]),
        "last_loss": float(result.loss_rows[-1].split(",")[-1]),
    }
    with open(cell_dir / "result.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def seed_mean(results: Iterable[Dict]) -> float:
    values = [r["novel_ap50"] for r in results]
    return sum(values) / len(values)


def collect(root: Path, cells=None, progress=None) -> Dict[Tuple[str, int], List[Dict]]:
    """Results grouped by (kind, n_blocks), running whatever is missing."""
    out: Dict[Tuple[str, int], List[Dict]] = {}
    for kind, n_blocks, seed in (cells or grid()):
        r = ensure_run(kind, n_blocks, seed, root, progress)
        out.setdefault((kind, n_blocks), []).append(r)
    return out


def format_table(groups: Dict[Tuple[str, int], List[Dict]]) -> str:
    lines = [f"{'configuration':<24s} {'novel AP50 by seed':<26s} {'mean':>6s}"]
    for (kind, n_blocks), results in sorted(groups.items()):
        by_seed = " ".join(f"{r['novel_ap50']:6.2f}"
                           for r in sorted(results, key=lambda r: r["seed"]))
        lines.append(f"{kind} (N={n_blocks})".ljust(24)
                     + f"{by_seed:<26s} {seed_mean(results):6.2f}")
    return "\n".join(lines)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--root", default="runs/ablation")
    parser.add_argument("--only", action="append", default=None,
                        help="run only cells whose tag contains this "
                             "substring (repeatable)")
    args = parser.parse_args(argv)
    cells = grid()
    if args.only:
        cells = [c for c in cells
                 if any(s in run_tag(*c) for s in args.only)]

    def progress(it, row):
        if it % 200 == 0:
            print(f"  {row}", flush=True)

    root = Path(args.root)
    groups: Dict[Tuple[str, int], List[Dict]] = {}
    for kind, n_blocks, seed in cells:
        tag = run_tag(kind, n_blocks, seed)
        print(f"[{tag}]", flush=True)
        r = ensure_run(kind, n_blocks, seed, root, progress)
        print(f"  novel AP50 {r['novel_ap50']:.2f} "
              f"({r['train_seconds']:.0f}s train)", flush=True)
        groups.setdefault((kind, n_blocks), []).append(r)
    print()
    print(format_table(groups))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
