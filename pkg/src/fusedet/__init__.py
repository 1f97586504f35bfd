"""One-shot object detection by cross-scale and cross-sample attention fusion.

Everything runs on a small numpy tensor engine with reverse-mode
differentiation; the convolution hot paths are numba-compiled with a pure
numpy fallback (set FUSEDET_NO_NUMBA=1 to force the fallback).
"""

__version__ = "0.1.0"
