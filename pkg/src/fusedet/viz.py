"""Visual reports: fused-feature heatmaps and detection overlays.

Everything renders to PPM because that is the one image format a few
lines of numpy can write exactly; no display stack enters the picture.
"""

from __future__ import annotations

from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .data import Episode, nearest_resize
from .head import Detection
from .model import Model
from .ppm import write_ppm
from .tensor import Tensor


def feature_heatmap(feat, image_hw: Tuple[int, int]) -> np.ndarray:
    """Collapse a (C,H,W) map to a grayscale (3,image_h,image_w) image.

    Channels are averaged, then the map is min-max normalized; a flat map
    has no contrast to show, so it renders mid-gray. Nearest upsampling
    keeps the cell structure visible instead of smearing it.
    """
    data = feat.data if isinstance(feat, Tensor) else np.asarray(feat)
    if data.ndim == 4:
        if data.shape[0] != 1:
            raise ValueError(f"expected one image, got batch {data.shape[0]}")
        data = data[0]
    if data.ndim != 3:
        raise ValueError(f"expected (C,H,W) features, got {data.shape}")
    mean = data.astype(np.float64).mean(axis=0)
    lo, hi = float(mean.min()), float(mean.max())
    if hi - lo < 1e-12:
        norm = np.full_like(mean, 0.5)
    else:
        norm = (mean - lo) / (hi - lo)
    gray = nearest_resize(norm[None], image_hw)[0]
    return np.repeat(gray[None], 3, axis=0)


def draw_detections(image, detections: Sequence[Detection],
                    color=(1.0, 0.1, 0.1)) -> np.ndarray:
    """Burn one-pixel box borders into a copy of a (3,H,W) image."""
    base = image.data if isinstance(image, Tensor) else np.asarray(image)
    out = np.array(base, dtype=np.float64, copy=True)
    _, h, w = out.shape
    col = np.asarray(color, dtype=np.float64)
    for det in detections:
        x1 = int(np.clip(np.floor(det.x1), 0, w - 1))
        y1 = int(np.clip(np.floor(det.y1), 0, h - 1))
        x2 = int(np.clip(np.ceil(det.x2) - 1, 0, w - 1))
        y2 = int(np.clip(np.ceil(det.y2) - 1, 0, h - 1))
        for c in range(3):
            out[c, y1, x1:x2 + 1] = col[c]
            out[c, y2, x1:x2 + 1] = col[c]
            out[c, y1:y2 + 1, x1] = col[c]
            out[c, y1:y2 + 1, x2] = col[c]
    return out


def render_episode(model: Model, episode: Episode, out_dir) -> List[Path]:
    """Write per-level fused-feature heatmaps plus a detection overlay.

    Returns the written paths: heatmap-l{j}.ppm for each query level and
    overlay.ppm with the surviving detections drawn on the query image.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fused = model.fused_pyramid(episode.query.image, episode.support)
    hw = fused.image_hw
    paths: List[Path] = []
    for j in fused.level_ids:
        img = feature_heatmap(fused.levels[j], hw)
        path = out_dir / f"heatmap-l{j}.ppm"
        write_ppm(path, img)
        paths.append(path)
    detections = model.detect(episode)
    overlay = draw_detections(episode.query.image, detections)
    path = out_dir / "overlay.ppm"
    write_ppm(path, overlay)
    paths.append(path)
    return paths
