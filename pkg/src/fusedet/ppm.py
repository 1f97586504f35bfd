"""Binary PPM (P6) image files, the only image format this package touches.

Images are float arrays shaped (3, H, W) with values in [0, 1]; files store
8-bit RGB. Round-tripping quantizes to the 1/255 grid.
"""

from __future__ import annotations

import numpy as np


def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got {img.shape}")
    _, h, w = img.shape
    bytes_ = (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(bytes_.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(blob) and not blob[end:end + 1].isspace():
            end += 1
        fields.append(blob[pos:end])
        pos = end
    pos += 1  # single whitespace byte after maxval
    if fields[0] != b"P6":
        raise ValueError(f"not a binary PPM file: magic {fields[0]!r}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    raw = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos)
    return raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0
