"""Global float-mode switch.

Training and evaluation run in float32. Gradient checking needs float64 so
that central differences resolve below the 1e-4 acceptance threshold. The
mode is process-global: set FUSEDET_FP64=1 in the environment before import,
or flip it programmatically with set_float64().
"""

import os

import numpy as np

_FLOAT = np.float64 if os.environ.get("FUSEDET_FP64", "") not in ("", "0") else np.float32


def float_dtype():
    """Active float dtype for newly created tensors."""
    return _FLOAT


def set_float64(enabled: bool) -> None:
    global _FLOAT
    _FLOAT = np.float64 if enabled else np.float32


def is_float64() -> bool:
    return _FLOAT == np.float64
