"""Convolution kernel backend, selected once at import.

Two interchangeable implementations exist: a compiled extension (C im2col
packing around one BLAS GEMM) and a numpy fallback (strided-slice im2col
plus batched matmul). Benchmarks (see benchmarks/bench_kernels.py) show the
extension winning for deep layers (large C*kh*kw) and numpy for shallow
ones, so the default "auto" mode routes per shape; IMPRINTLAB_KERNELS can
force either pure backend, and "numpy" is the automatic fallback when the
extension is not built.
"""

import importlib
import os

from . import _convnp

_choice = os.environ.get("IMPRINTLAB_KERNELS", "auto").lower()
if _choice not in ("auto", "cython", "numpy"):
    raise ValueError(f"IMPRINTLAB_KERNELS must be auto|cython|numpy, got {_choice!r}")

_convcy = None
if _choice in ("auto", "cython"):
    try:
        _convcy = importlib.import_module("._convcy", __name__)
    except ImportError:
        if _choice == "cython":
            raise

if _convcy is None:
    BACKEND = "numpy"
elif _choice == "cython":
    BACKEND = "cython"
else:
    BACKEND = "auto"

# patch-size threshold above which the compiled path wins (measured)
_K_SPLIT = 48


def _pick(w_shape):
    if BACKEND == "numpy":
        return _convnp
    if BACKEND == "cython":
        return _convcy
    k = w_shape[1] * w_shape[2] * w_shape[3]
    return _convcy if k >= _K_SPLIT else _convnp


def conv2d_forward(x, w, stride=1, pad=0):
    return _pick(w.shape).conv2d_forward(x, w, stride, pad)


def conv2d_backward_x(dy, w, x_shape, stride=1, pad=0):
    return _pick(w.shape).conv2d_backward_x(dy, w, x_shape, stride, pad)


def conv2d_backward_w(dy, x, w_shape, stride=1, pad=0):
    return _pick(w_shape).conv2d_backward_w(dy, x, w_shape, stride, pad)


__all__ = ["BACKEND", "conv2d_forward", "conv2d_backward_x", "conv2d_backward_w"]
