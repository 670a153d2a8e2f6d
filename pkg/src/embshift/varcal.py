"""Variance/mean ratio estimation for upsampling and the 1/sqrt(k) embedding rescale."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from .interp import Dims, Method, UpsampleSpec, resample_axis, upsample2d, upsample_grid
from .tensor import SeededRng, Stats, as_tensor, stats

# Published variance ratios, keyed by (method, dims).
REFERENCE_K = {
    (Method.BICUBIC, Dims.TWO_D): 0.7295,
    (Method.BILINEAR, Dims.TWO_D): 0.3927,
    (Method.NEAREST, Dims.TWO_D): 1.0,
    (Method.BICUBIC, Dims.ONE_D): 0.8541,
    (Method.BILINEAR, Dims.ONE_D): 0.6267,
    (Method.NEAREST, Dims.ONE_D): 1.0,
}
REFERENCE_RESCALE = {
    (Method.BICUBIC, Dims.TWO_D): 1.1708,
    (Method.BILINEAR, Dims.TWO_D): 1.5957,
    (Method.NEAREST, Dims.TWO_D): 1.0,
    (Method.BICUBIC, Dims.ONE_D): 1.0820,
    (Method.BILINEAR, Dims.ONE_D): 1.2632,
    (Method.NEAREST, Dims.ONE_D): 1.0,
}

CANONICAL_SCALE = 2.0
CANONICAL_SIZE = 4096
CANONICAL_TRIALS = 1000
CANONICAL_SEED = 0
SEPARABILITY_TOL = 0.02
PE_MEAN_TOL = 0.05
_CHUNK = 50


def thread_count() -> int:
    """Worker cap from ``EMBSHIFT_THREADS``; results never depend on it."""
    env = os.environ.get("EMBSHIFT_THREADS", "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"EMBSHIFT_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


@dataclass(frozen=True)
class RatioEstimate:
    method: Method
    dims: Dims
    k: float
    K: float = 1.0
    trials: int = 0
    scale_factor: float = CANONICAL_SCALE
    std_error: float = 0.0
    size: int = CANONICAL_SIZE

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "dims", Dims(self.dims))
        if not self.k > 0:
            raise ValueError(f"variance ratio must be positive, got {self.k}")

    @property
    def rescale(self) -> float:
        return 1.0 / math.sqrt(self.k)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["method"] = self.method.value
        d["dims"] = self.dims.value
        d["rescale"] = self.rescale
        return d


def _grid_side(n: int, dims: Dims) -> tuple[int, ...]:
    if dims is Dims.ONE_D:
        return (n,)
    side = math.isqrt(n)
    if side * side != n:
        raise ValueError(f"2d measurement needs a square element count, got {n}")
    return (side, side)


def _trial_ratios(method, in_shape, out_shape, rng: SeededRng, start: int, stop: int):
    v = np.stack([rng.substream(t).generator().standard_normal(in_shape) for t in range(start, stop)])
    if len(in_shape) == 1:
        up = resample_axis(v, 1, out_shape[0], method)
    else:
        up = upsample_grid(v, out_shape, method, axes=(1, 2))
    axes = tuple(range(1, v.ndim))
    var_ratio = up.var(axis=axes) / v.var(axis=axes)
    # Shifting the input to mean 1 shifts every output by 1 (all kernels sum to one).
    mean_ratio = (up.mean(axis=axes) + 1.0) / (v.mean(axis=axes) + 1.0)
    return var_ratio, mean_ratio


def measure_k(
    method: Method | str,
    dims: Dims | str,
    scale_factor: float = CANONICAL_SCALE,
    n: int = CANONICAL_SIZE,
    trials: int = CANONICAL_TRIALS,
    rng: SeededRng | None = None,
) -> RatioEstimate:
    """Monte-Carlo variance ratio k and mean ratio K of an upsampling method.

    ``n`` is the element count of each synthetic input: a length-``n`` vector
    in 1D, a ``sqrt(n) x sqrt(n)`` grid in 2D. k averages
    ``Var[UP(v)] / Var[v]`` over ``v ~ N(0, 1)``; K averages
    ``E[UP(v)] / E[v]`` over the same draws shifted to mean one.
    """
    method, dims = Method(method), Dims(dims)
    if not scale_factor > 1.0:
        raise ValueError(f"scale factor must exceed 1 (upsampling only), got {scale_factor}")
    if n < 1024:
        raise ValueError(f"need at least 1024 elements per trial, got {n}")
    if trials < 100:
        raise ValueError(f"need at least 100 trials, got {trials}")
    rng = rng if rng is not None else SeededRng(CANONICAL_SEED)
    in_shape = _grid_side(n, dims)
    out_shape = tuple(int(round(s * scale_factor)) for s in in_shape)

    bounds = [(s, min(s + _CHUNK, trials)) for s in range(0, trials, _CHUNK)]
    with ThreadPoolExecutor(max_workers=min(thread_count(), len(bounds))) as pool:
        parts = list(pool.map(lambda b: _trial_ratios(method, in_shape, out_shape, rng, *b), bounds))
    var_ratios = np.concatenate([p[0] for p in parts])
    mean_ratios = np.concatenate([p[1] for p in parts])
    return RatioEstimate(
        method=method,
        dims=dims,
        k=float(np.mean(var_ratios)),
        K=float(np.mean(mean_ratios)),
        trials=trials,
        scale_factor=float(scale_factor),
        std_error=float(np.std(var_ratios, ddof=1) / math.sqrt(trials)),
        size=n,
    )


def measure_k_grid(
    method: Method | str,
    in_hw: tuple[int, int],
    out_hw: tuple[int, int],
    trials: int = CANONICAL_TRIALS,
    rng: SeededRng | None = None,
) -> RatioEstimate:
    """k for one concrete ``in_hw -> out_hw`` resize, e.g. a 14x14 embedding grid.

    Border clamping weighs more on small grids, so k here can sit a few
    percent above the large-grid value returned by :func:`measure_k`.
    """
    method = Method(method)
    in_hw, out_hw = tuple(int(v) for v in in_hw), tuple(int(v) for v in out_hw)
    if out_hw[0] < in_hw[0] or out_hw[1] < in_hw[1] or out_hw == in_hw:
        raise ValueError(f"{in_hw} -> {out_hw} is not an upsampling")
    if trials < 100:
        raise ValueError(f"need at least 100 trials, got {trials}")
    rng = rng if rng is not None else SeededRng(CANONICAL_SEED)
    bounds = [(s, min(s + _CHUNK, trials)) for s in range(0, trials, _CHUNK)]
    parts = [_trial_ratios(method, in_hw, out_hw, rng, *b) for b in bounds]
    var_ratios = np.concatenate([p[0] for p in parts])
    mean_ratios = np.concatenate([p[1] for p in parts])
    return RatioEstimate(
        method=method,
        dims=Dims.TWO_D,
        k=float(np.mean(var_ratios)),
        K=float(np.mean(mean_ratios)),
        trials=trials,
        scale_factor=out_hw[0] / in_hw[0],
        std_error=float(np.std(var_ratios, ddof=1) / math.sqrt(trials)),
        size=in_hw[0] * in_hw[1],
    )


def measure_table(rng: SeededRng | None = None, **kwargs) -> dict[tuple[Method, Dims], RatioEstimate]:
    """All six (method, dims) estimates at the canonical protocol."""
    return {(m, d): measure_k(m, d, rng=rng, **kwargs) for d in Dims for m in Method}


def empirical_k(pe, spec: UpsampleSpec) -> float:
    """k measured on an actual embedding grid ``[H, W, D]`` instead of noise."""
    x = as_tensor(pe)
    return stats(upsample2d(x, spec)).variance / stats(x).variance


@dataclass(frozen=True)
class SeparabilityCheck:
    method: Method
    k_1d: float
    k_2d: float
    gap: float
    tolerance: float
    passed: bool


def check_separability(estimates: Iterable[RatioEstimate], tolerance: float = SEPARABILITY_TOL) -> list[SeparabilityCheck]:
    """Compare k_2d against k_1d squared for every method present."""
    by_method: dict[Method, dict[Dims, float]] = {}
    for est in estimates:
        by_method.setdefault(Method(est.method), {})[Dims(est.dims)] = est.k
    checks = []
    for method, ks in by_method.items():
        missing = [d.value for d in Dims if d not in ks]
        if missing:
            raise ValueError(f"{method.value}: missing estimate for dims {missing}")
        gap = abs(ks[Dims.TWO_D] - ks[Dims.ONE_D] ** 2)
        checks.append(SeparabilityCheck(method, ks[Dims.ONE_D], ks[Dims.TWO_D], gap, tolerance, gap <= tolerance))
    return checks


def rescale_pe(pe, spec: UpsampleSpec, k: float) -> np.ndarray:
    """Upsample an ``[H, W, D]`` embedding grid and divide by sqrt(k)."""
    if not k > 0:
        raise ValueError(f"variance ratio must be positive, got {k}")
    x = as_tensor(pe)
    if x.ndim != 3:
        raise ValueError(f"rescale_pe expects an [H, W, D] grid, got shape {x.shape}")
    return upsample2d(x, spec) / math.sqrt(k)


def split_cls_token(pe_flat, grid: tuple[int, int], cls_tokens: int = 1) -> tuple[np.ndarray, np.ndarray]:
    x = as_tensor(pe_flat)
    if x.ndim != 2:
        raise ValueError(f"expected a [N, D] token table, got shape {x.shape}")
    if cls_tokens not in (0, 1):
        raise ValueError(f"leading token count must be 0 or 1, got {cls_tokens}")
    h, w = grid
    if x.shape[0] != cls_tokens + h * w:
        raise ValueError(f"{x.shape[0]} tokens != {cls_tokens} leading + {h}x{w} grid")
    return x[:cls_tokens].copy(), x[cls_tokens:].reshape(h, w, x.shape[1]).copy()


def rescale_pe_tokens(pe_flat, grid: tuple[int, int], spec: UpsampleSpec, k: float, cls_tokens: int = 1) -> np.ndarray:
    """Token-table variant: leading tokens pass through untouched."""
    cls, g = split_cls_token(pe_flat, grid, cls_tokens)
    out = rescale_pe(g, spec, k)
    return np.concatenate([cls, out.reshape(-1, out.shape[-1])])


@dataclass(frozen=True)
class PEMeanCheck:
    stats: Stats
    threshold: float
    flagged: bool


def pe_mean_report(pe, tolerance: float = PE_MEAN_TOL) -> PEMeanCheck:
    """Flag embeddings whose mean is not small relative to their spread."""
    s = stats(pe)
    threshold = tolerance * s.std
    return PEMeanCheck(s, threshold, abs(s.mean) > threshold)
