"""Seeded image augmentations with known effects on mean and variance.

Images are ``[H, W, C]`` (or ``[H, W]``) float tensors. Every function is a
pure function of its inputs and the ``SeededRng`` it receives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .interp import Method, upsample_grid
from .tensor import SeededRng, _gen, as_tensor

DEFAULT_AREA_RANGE = (0.02, 1 / 3)
DEFAULT_ASPECT_RANGE = (0.3, 10 / 3)
ERASE_ATTEMPTS = 10


@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    name: str = "custom"

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("NormStats needs three channel means and stds")
        if any(s <= 0 for s in self.std):
            raise ValueError(f"std components must be positive, got {self.std}")
        object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
        object.__setattr__(self, "std", tuple(float(v) for v in self.std))

    @classmethod
    def named(cls, name: str) -> "NormStats":
        try:
            return NORM_PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown normalization preset {name!r}") from None


DEFAULT_IMAGENET = NormStats((0.485, 0.456, 0.406), (0.229, 0.224, 0.225), "default_imagenet")
INCEPTION = NormStats((0.5, 0.5, 0.5), (0.5, 0.5, 0.5), "inception")
IDENTITY = NormStats((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), "identity")
NORM_PRESETS = {s.name: s for s in (DEFAULT_IMAGENET, INCEPTION, IDENTITY)}


class EraseMode(str, Enum):
    CONST = "const"
    RAND = "rand"
    PIXEL = "pixel"


def _same_shape(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mixup(a, b, lam: float) -> np.ndarray:
    if not 0.0 < lam < 1.0:
        raise ValueError(f"mixup ratio must lie in (0, 1), got {lam}")
    a, b = _same_shape(a, b)
    return lam * a + (1.0 - lam) * b


def extended_mixup(a, b, lam_i: float, lam_j: float) -> np.ndarray:
    a, b = _same_shape(a, b)
    return lam_i * a + lam_j * b


def mixup_variance_factor(lam: float) -> float:
    return lam * lam + (1.0 - lam) ** 2


def beta_mixup_variance_factor(alpha: float) -> float:
    """E[lam^2 + (1 - lam)^2] for lam ~ Beta(alpha, alpha)."""
    # E[lam (1 - lam)] = alpha^2 / (2 alpha (2 alpha + 1))
    return 1.0 - alpha / (2 * alpha + 1)


def _broadcast_mask(mask: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if mask.shape == shape:
        return mask
    if mask.shape == shape[:2] and len(shape) == 3:
        return mask[:, :, None]
    raise ValueError(f"mask shape {mask.shape} does not match image shape {shape}")


def cutmix(a, b, mask) -> np.ndarray:
    """``M * a + (1 - M) * b``; a 2D mask is broadcast over channels."""
    a, b = _same_shape(a, b)
    m = as_tensor(mask)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("cutmix mask must be binary")
    m = _broadcast_mask(m, a.shape)
    return m * a + (1.0 - m) * b


def cutmix_box(shape: Sequence[int], lam: float, rng) -> tuple[int, int, int, int, int, int]:
    """Sample a cut rectangle: returns ``(y0, y1, x0, x1, cut_h, cut_w)``.

    The unclipped side lengths are ``sqrt(1 - lam)`` of the image sides; the
    centre is uniform over pixels and the box is clipped at the borders.
    """
    if not 0.0 < lam < 1.0:
        raise ValueError(f"cutmix ratio must lie in (0, 1), got {lam}")
    h, w = int(shape[0]), int(shape[1])
    ratio = math.sqrt(1.0 - lam)
    cut_h, cut_w = int(round(h * ratio)), int(round(w * ratio))
    g = _gen(rng)
    cy = int(g.integers(0, h))
    cx = int(g.integers(0, w))
    y0, y1 = np.clip([cy - cut_h // 2, cy - cut_h // 2 + cut_h], 0, h)
    x0, x1 = np.clip([cx - cut_w // 2, cx - cut_w // 2 + cut_w], 0, w)
    return int(y0), int(y1), int(x0), int(x1), cut_h, cut_w


def sample_cutmix_mask(shape: Sequence[int], lam: float, rng) -> np.ndarray:
    """Binary ``[H, W]`` mask: ones everywhere except the sampled rectangle."""
    y0, y1, x0, x1, _, _ = cutmix_box(shape, lam, rng)
    mask = np.ones((int(shape[0]), int(shape[1])))
    mask[y0:y1, x0:x1] = 0.0
    return mask


def erase_box(h: int, w: int, area_range, aspect_range, g: np.random.Generator):
    """Random-erasing rectangle ``(top, left, eh, ew)`` or None after all attempts fail."""
    area = h * w
    log_lo, log_hi = math.log(aspect_range[0]), math.log(aspect_range[1])
    for _ in range(ERASE_ATTEMPTS):
        target = g.uniform(*area_range) * area
        aspect = math.exp(g.uniform(log_lo, log_hi))
        eh = int(round(math.sqrt(target * aspect)))
        ew = int(round(math.sqrt(target / aspect)))
        if 0 < eh < h and 0 < ew < w:
            top = int(g.integers(0, h - eh + 1))
            left = int(g.integers(0, w - ew + 1))
            return top, left, eh, ew
    return None


def _check_ranges(area_range, aspect_range):
    lo, hi = area_range
    if not 0.0 < lo <= hi < 1.0:
        raise ValueError(f"area_range must be a non-empty subrange of (0, 1), got {area_range}")
    lo, hi = aspect_range
    if not 0.0 < lo <= hi:
        raise ValueError(f"aspect_range must be a non-empty positive range, got {aspect_range}")


def random_erase(
    t,
    mode: EraseMode | str = EraseMode.PIXEL,
    prob: float = 0.25,
    area_range=DEFAULT_AREA_RANGE,
    aspect_range=DEFAULT_ASPECT_RANGE,
    rng: SeededRng | None = None,
) -> np.ndarray:
    mode = EraseMode(mode)
    if not 0.0 <= prob <= 1.0:
        raise ValueError(f"erase probability must lie in [0, 1], got {prob}")
    _check_ranges(area_range, aspect_range)
    x = as_tensor(t, copy=True)
    if x.ndim not in (2, 3):
        raise ValueError(f"random_erase expects [H, W] or [H, W, C], got shape {x.shape}")
    g = _gen(rng if rng is not None else SeededRng())
    if g.random() >= prob:
        return x
    box = erase_box(x.shape[0], x.shape[1], area_range, aspect_range, g)
    if box is None:
        return x
    top, left, eh, ew = box
    region = (slice(top, top + eh), slice(left, left + ew))
    if mode is EraseMode.CONST:
        x[region] = 0.0
    elif mode is EraseMode.RAND:
        x[region] = g.standard_normal()
    else:
        x[region] = g.standard_normal(x[region].shape)
    return x


def expected_erase_fraction(
    shape=(224, 224),
    area_range=DEFAULT_AREA_RANGE,
    aspect_range=DEFAULT_ASPECT_RANGE,
    draws: int = 20000,
    seed: int = 0,
) -> float:
    """Mean erased area fraction given that erasing fires (failed placements count as 0)."""
    _check_ranges(area_range, aspect_range)
    h, w = int(shape[0]), int(shape[1])
    g = SeededRng(seed, 0).generator()
    total = 0
    for _ in range(draws):
        box = erase_box(h, w, area_range, aspect_range, g)
        if box is not None:
            total += box[2] * box[3]
    return total / (draws * h * w)


def normalize(t, stats: NormStats) -> np.ndarray:
    x = as_tensor(t)
    if x.shape[-1] != len(stats.mean):
        raise ValueError(f"channel count {x.shape[-1]} does not match {len(stats.mean)} normalization stats")
    return (x - np.asarray(stats.mean)) / np.asarray(stats.std)


def random_resize_crop(
    t,
    scale_range=(1.0, 1.0),
    out_size: Sequence[int] | None = None,
    method: Method | str = Method.BICUBIC,
    rng: SeededRng | None = None,
    *,
    center: bool = False,
) -> np.ndarray:
    """Upsample by a factor drawn uniformly from ``scale_range``, then crop.

    The crop window is uniformly placed, or centred when ``center`` is set
    (the usual test-time resize + centre-crop).
    """
    x = as_tensor(t)
    if x.ndim not in (2, 3):
        raise ValueError(f"random_resize_crop expects [H, W] or [H, W, C], got shape {x.shape}")
    lo, hi = scale_range
    if not 1.0 <= lo <= hi:
        raise ValueError(f"scale_range must satisfy 1 <= lo <= hi (upsampling only), got {scale_range}")
    h, w = x.shape[:2]
    oh, ow = (h, w) if out_size is None else (int(out_size[0]), int(out_size[1]))
    g = _gen(rng if rng is not None else SeededRng())
    s = g.uniform(lo, hi) if hi > lo else lo
    rh, rw = int(round(h * s)), int(round(w * s))
    if rh < oh or rw < ow or oh < 1 or ow < 1:
        raise ValueError(f"cannot crop {oh}x{ow} from a {rh}x{rw} resize")
    up = upsample_grid(x, (rh, rw), method, axes=(0, 1))
    if center:
        top, left = (rh - oh) // 2, (rw - ow) // 2
    else:
        top = int(g.integers(0, rh - oh + 1))
        left = int(g.integers(0, rw - ow + 1))
    return up[top:top + oh, left:left + ow].copy()
