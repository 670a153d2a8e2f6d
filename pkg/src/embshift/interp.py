"""Nearest, bilinear and bicubic upsampling in 1D and 2D.

Semantics follow the common deep-learning default (``align_corners=False``):
output sample ``j`` of an ``n -> m`` resize reads source coordinate
``(j + 0.5) * n / m - 0.5``, and taps falling outside ``[0, n - 1]`` are
clamped to the border (edge replication). Bicubic uses cubic convolution
with ``a = -0.75``. Nearest uses the half-pixel-centre rule, which at integer
scale is pure element duplication.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .tensor import as_tensor

CUBIC_A = -0.75


class Method(str, Enum):
    NEAREST = "nearest"
    BILINEAR = "bilinear"
    BICUBIC = "bicubic"


class Dims(str, Enum):
    ONE_D = "1d"
    TWO_D = "2d"


@dataclass(frozen=True)
class UpsampleSpec:
    method: Method
    out_size: tuple[int, ...]
    dims: Dims

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "dims", Dims(self.dims))
        size = self.out_size
        if isinstance(size, (int, np.integer)):
            size = (int(size),)
        size = tuple(int(s) for s in size)
        expected = 1 if self.dims is Dims.ONE_D else 2
        if len(size) != expected:
            raise ValueError(f"{self.dims.value} upsampling needs {expected} output sizes, got {size}")
        if any(s < 1 for s in size):
            raise ValueError(f"output sizes must be positive, got {size}")
        object.__setattr__(self, "out_size", size)


def cubic_kernel(d, a: float = CUBIC_A):
    d = np.abs(np.asarray(d, dtype=np.float64))
    near = ((a + 2) * d - (a + 3)) * d * d + 1
    far = ((a * d - 5 * a) * d + 8 * a) * d - 4 * a
    return np.where(d <= 1, near, np.where(d < 2, far, 0.0))


def resample_weights(in_size: int, out_size: int, method) -> tuple[np.ndarray, np.ndarray]:
    """Tap indices and weights, each ``[out_size, taps]``, for one axis."""
    method = Method(method)
    if out_size < in_size:
        raise ValueError(f"downsampling {in_size} -> {out_size} is not supported")
    scale = in_size / out_size
    dst = np.arange(out_size, dtype=np.float64)
    last = in_size - 1

    if method is Method.NEAREST:
        idx = np.minimum(np.floor((dst + 0.5) * scale).astype(np.int64), last)
        return idx[:, None], np.ones((out_size, 1))

    src = (dst + 0.5) * scale - 0.5
    if method is Method.BILINEAR:
        src = np.maximum(src, 0.0)
        i0 = np.floor(src).astype(np.int64)
        frac = src - i0
        idx = np.stack([i0, i0 + 1], axis=1)
        w = np.stack([1.0 - frac, frac], axis=1)
    else:
        i0 = np.floor(src).astype(np.int64)
        t = src - i0
        idx = i0[:, None] + np.arange(-1, 3)[None, :]
        w = cubic_kernel(np.stack([t + 1, t, 1 - t, 2 - t], axis=1))
    return np.clip(idx, 0, last), w


def resample_axis(x: np.ndarray, axis: int, out_size: int, method) -> np.ndarray:
    """Upsample ``x`` along one axis; other axes are treated as batch."""
    x = np.asarray(x, dtype=np.float64)
    idx, w = resample_weights(x.shape[axis], out_size, method)
    moved = np.moveaxis(x, axis, -1)
    out = np.einsum("...mt,mt->...m", moved[..., idx], w)
    return np.moveaxis(out, -1, axis)


def upsample1d(t, spec: UpsampleSpec) -> np.ndarray:
    x = as_tensor(t)
    if spec.dims is not Dims.ONE_D:
        raise ValueError("upsample1d needs a 1d spec")
    if x.ndim != 1:
        raise ValueError(f"upsample1d expects a rank-1 tensor, got rank {x.ndim}")
    return resample_axis(x, 0, spec.out_size[0], spec.method)


def upsample2d(t, spec: UpsampleSpec, *, order: str = "rows") -> np.ndarray:
    """Separable 2D upsampling of ``[H, W]`` or ``[H, W, C]``.

    ``order="rows"`` resamples along each row (the W axis) first, then along
    columns; ``order="cols"`` does the opposite. Both agree to rounding.
    """
    x = as_tensor(t)
    if spec.dims is not Dims.TWO_D:
        raise ValueError("upsample2d needs a 2d spec")
    if x.ndim not in (2, 3):
        raise ValueError(f"upsample2d expects [H, W] or [H, W, C], got shape {x.shape}")
    out_h, out_w = spec.out_size
    if out_h < x.shape[0] or out_w < x.shape[1]:
        raise ValueError(f"downsampling {x.shape[:2]} -> {spec.out_size} is not supported")
    return upsample_grid(x, (out_h, out_w), spec.method, axes=(0, 1), order=order)


def upsample_grid(x, out_hw: Sequence[int], method, *, axes=(-2, -1), order: str = "rows") -> np.ndarray:
    """2D upsampling over two arbitrary axes; leading/trailing axes are batch."""
    ax_h, ax_w = axes
    out_h, out_w = out_hw
    if order == "rows":
        return resample_axis(resample_axis(x, ax_w, out_w, method), ax_h, out_h, method)
    if order == "cols":
        return resample_axis(resample_axis(x, ax_h, out_h, method), ax_w, out_w, method)
    raise ValueError(f"order must be 'rows' or 'cols', got {order!r}")


def upsample(t, spec: UpsampleSpec) -> np.ndarray:
    if spec.dims is Dims.ONE_D:
        return upsample1d(t, spec)
    return upsample2d(t, spec)


def duplication_decompose(t_in, t_out) -> bool:
    """True iff ``t_out`` is, as a multiset, exactly ``s`` copies of ``t_in``."""
    a = as_tensor(t_in)
    b = as_tensor(t_out)
    if a.ndim != 1 or b.ndim != 1:
        raise ValueError("duplication_decompose expects rank-1 tensors")
    s, rem = divmod(b.size, a.size)
    if rem or s < 1:
        raise ValueError(f"output length {b.size} is not an integer multiple of {a.size}")
    return bool(np.array_equal(np.sort(np.tile(a, s)), np.sort(b)))
