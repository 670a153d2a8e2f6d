"""Toy ViT front end: patch projection, embedding sum, layer norm and its Jacobian.

Also holds the two dropout placements compared for the patch/positional
embedding sum, and PatchDropout (row subsetting without rescaling).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import SeededRng, _gen, as_tensor, stats

LN_EPS = 1e-6
PE_INIT_STD = 0.02


@dataclass(frozen=True)
class PatchProjection:
    kernel: np.ndarray  # [P, P, C_in, D]
    bias: np.ndarray  # [D]

    def __post_init__(self):
        k = as_tensor(self.kernel)
        b = as_tensor(self.bias)
        if k.ndim != 4 or k.shape[0] != k.shape[1]:
            raise ValueError(f"kernel must be [P, P, C_in, D], got {k.shape}")
        if b.shape != (k.shape[3],):
            raise ValueError(f"bias must be [{k.shape[3]}], got {b.shape}")
        object.__setattr__(self, "kernel", k)
        object.__setattr__(self, "bias", b)

    @property
    def patch_size(self) -> int:
        return self.kernel.shape[0]

    @classmethod
    def random(cls, patch_size: int, c_in: int, dim: int, rng: SeededRng) -> "PatchProjection":
        g = _gen(rng)
        fan_in = patch_size * patch_size * c_in
        kernel = g.standard_normal((patch_size, patch_size, c_in, dim)) / math.sqrt(fan_in)
        return cls(kernel, np.zeros(dim))


def patch_project(img, proj: PatchProjection) -> np.ndarray:
    """Strided convolution with stride == patch size, as reshape + contraction."""
    x = as_tensor(img)
    if x.ndim == 2:
        x = x[:, :, None]
    h, w, c = x.shape
    p = proj.patch_size
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {p}")
    if c != proj.kernel.shape[2]:
        raise ValueError(f"image has {c} channels, kernel expects {proj.kernel.shape[2]}")
    patches = x.reshape(h // p, p, w // p, p, c)
    return np.einsum("iajbc,abcd->ijd", patches, proj.kernel) + proj.bias


def init_pos_embed(grid: tuple[int, int], dim: int, rng: SeededRng, std: float = PE_INIT_STD) -> np.ndarray:
    return _gen(rng).normal(0.0, std, size=(*grid, dim))


def _token_sigma(var, eps):
    # eps floors the variance so well-conditioned tokens standardize exactly
    return np.sqrt(np.maximum(var, eps))


def layer_norm(t, eps: float = LN_EPS) -> np.ndarray:
    """Per-token standardization over the last axis, without affine parameters."""
    x = as_tensor(t)
    if x.shape[-1] < 2:
        raise ValueError("layer norm needs at least 2 features per token")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    return xc / _token_sigma(var, eps)


def ln_jacobian(z, eps: float = LN_EPS) -> np.ndarray:
    """d LN(z) / dz for a single token ``z`` of length D, as a ``[D, D]`` matrix."""
    z = as_tensor(z)
    if z.ndim != 1:
        raise ValueError("ln_jacobian expects a single token")
    d = z.size
    zc = z - z.mean()
    var = float(np.mean(zc * zc))
    sigma = float(_token_sigma(var, eps))
    centering = np.eye(d) - 1.0 / d
    if var < eps:
        return centering / sigma
    y = zc / sigma
    return (centering - np.outer(y, y) / d) / sigma


def ln_grad_wrt_p(x, p, eps: float = LN_EPS, v=None) -> np.ndarray:
    """Jacobian of ``LN(x + p)`` with respect to ``p``.

    Returns the full ``[D, D]`` matrix, or the Jacobian-vector product ``J @ v``
    when ``v`` is given (use that for large D).
    """
    x, p = as_tensor(x), as_tensor(p)
    if x.shape != p.shape or x.ndim != 1:
        raise ValueError("x and p must be single tokens of equal length")
    if v is None:
        return ln_jacobian(x + p, eps)
    v = as_tensor(v)
    z = x + p
    zc = z - z.mean()
    var = float(np.mean(zc * zc))
    sigma = float(_token_sigma(var, eps))
    vc = v - v.mean()
    if var < eps:
        return vc / sigma
    y = zc / sigma
    return (vc - y * float(y @ v) / z.size) / sigma


def finite_difference_jacobian(f, p, step: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of ``f`` at ``p``: column j is d f / d p_j."""
    p = as_tensor(p)
    cols = []
    for j in range(p.size):
        e = np.zeros_like(p)
        e[j] = step
        cols.append((f(p + e) - f(p - e)) / (2 * step))
    return np.stack(cols, axis=1)


def contribution_ratio(x, p) -> float:
    """Var[x] / Var[p]: the relative weight of patch vs positional embedding after LN."""
    x, p = as_tensor(x), as_tensor(p)
    if x.shape != p.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {p.shape}")
    vp = stats(p).variance
    if vp == 0.0:
        raise ValueError("positional embedding has zero variance")
    return stats(x).variance / vp


def patch_dropout(x, keep_fraction: float, rng) -> np.ndarray:
    """Keep a uniform random subset of ``ceil(keep * N)`` token rows, in original order."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ValueError(f"patch_dropout expects [N, D], got shape {x.shape}")
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep fraction must lie in (0, 1], got {keep_fraction}")
    n_keep = math.ceil(keep_fraction * x.shape[0])
    rows = np.sort(_gen(rng).choice(x.shape[0], size=n_keep, replace=False))
    return x[rows]


def inverted_dropout(x, rate: float, g: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(x * mask / (1 - rate), mask)``."""
    mask = (g.random(np.shape(x)) >= rate).astype(np.float64)
    return x * mask / (1.0 - rate), mask


@dataclass(frozen=True)
class DropoutComparison:
    rate: float
    ratio_before: float
    ratio_single: float  # dropout on x only
    ratio_joint: float  # one dropout mask on the sum x + p
    tolerance: float = 0.05

    @property
    def single_preserved(self) -> bool:
        return abs(self.ratio_single / self.ratio_before - 1.0) <= self.tolerance

    @property
    def joint_preserved(self) -> bool:
        return abs(self.ratio_joint / self.ratio_before - 1.0) <= self.tolerance


def dropout_sum_vs_single(x, p, rate: float, rng) -> DropoutComparison:
    """Var[x'] / Var[p'] under dropout on x alone vs dropout on the sum.

    Dropout on the sum is modelled as one shared mask over both summands,
    which is exactly what a mask on ``x + p`` does to each of them.
    """
    if not 0.0 < rate < 1.0:
        raise ValueError(f"dropout rate must lie in (0, 1), got {rate}")
    x, p = as_tensor(x), as_tensor(p)
    if x.shape != p.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {p.shape}")
    g = _gen(rng)
    before = contribution_ratio(x, p)
    x_single, _ = inverted_dropout(x, rate, g)
    single = contribution_ratio(x_single, p)
    _, mask = inverted_dropout(x, rate, g)
    scale = mask / (1.0 - rate)
    joint = contribution_ratio(x * scale, p * scale)
    return DropoutComparison(rate, before, single, joint)
