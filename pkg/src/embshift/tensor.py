"""Dense float64 tensors, exact statistics, seeded RNG streams and the VSPE file format.

Tensors are plain NumPy arrays. ``as_tensor`` is the single gate that
enforces the carrier contract (rank 1-4, every dimension >= 1, float64,
row-major); every public operation in the package funnels inputs through it.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MAX_RANK = 4
VSPE_MAGIC = b"VSPE"
VSPE_VERSION = 1


class VSPEFormatError(ValueError):
    """Raised when a VSPE file is truncated, mis-tagged or inconsistent."""


def as_tensor(x, *, copy: bool = False) -> np.ndarray:
    t = np.array(x, dtype=np.float64, order="C", copy=copy or None)
    if t.ndim < 1 or t.ndim > MAX_RANK:
        raise ValueError(f"tensor rank must be in 1..{MAX_RANK}, got {t.ndim}")
    if any(d < 1 for d in t.shape):
        raise ValueError(f"all dimensions must be >= 1, got shape {t.shape}")
    return t


@dataclass(frozen=True)
class Stats:
    """Population mean and variance (divide-by-n) of a flattened tensor."""

    mean: float
    variance: float
    count: int

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)


def stats(t) -> Stats:
    """Two-pass population statistics: mean first, then centered second moment."""
    x = as_tensor(t).ravel()
    mean = float(np.mean(x))
    var = float(np.mean(np.square(x - mean)))
    return Stats(mean=mean, variance=var, count=x.size)


@dataclass(frozen=True)
class SeededRng:
    """Value-type handle on a reproducible random stream.

    The stream is a Philox counter-based generator keyed by
    ``(master_seed, stream_id)`` through ``numpy.random.SeedSequence``, so the
    same pair produces the same numbers on any platform and in any thread.
    Each call to :meth:`generator` restarts the stream from the beginning.
    """

    master_seed: int = 0
    stream_id: int = 0

    def __post_init__(self):
        for name in ("master_seed", "stream_id"):
            v = getattr(self, name)
            if not 0 <= v < 2**64:
                raise ValueError(f"{name} must be an unsigned 64-bit integer, got {v}")

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.master_seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.Philox(seq))

    def substream(self, index: int) -> "SeededRng":
        """Independent child stream, e.g. one per Monte-Carlo trial."""
        seq = np.random.SeedSequence(self.stream_id, spawn_key=(index,))
        child = int(seq.generate_state(1, dtype=np.uint64)[0])
        return SeededRng(self.master_seed, child)


def _gen(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, SeededRng):
        return rng.generator()
    raise TypeError(f"expected SeededRng or numpy Generator, got {type(rng).__name__}")


def randn(shape: int | Sequence[int], rng) -> np.ndarray:
    if isinstance(shape, int):
        shape = (shape,)
    shape = tuple(int(s) for s in shape)
    if not 1 <= len(shape) <= MAX_RANK or any(s < 1 for s in shape):
        raise ValueError(f"invalid shape {shape}")
    return _gen(rng).standard_normal(shape)


def concat(a, b, *rest) -> np.ndarray:
    parts = [as_tensor(v) for v in (a, b, *rest)]
    for p in parts:
        if p.ndim != 1:
            raise ValueError(f"concat expects rank-1 tensors, got rank {p.ndim}")
    return np.concatenate(parts)


def crop(t, offsets: Sequence[int], sizes: Sequence[int]) -> np.ndarray:
    x = as_tensor(t)
    if len(offsets) != x.ndim or len(sizes) != x.ndim:
        raise ValueError(f"need {x.ndim} offsets and sizes, got {len(offsets)} and {len(sizes)}")
    index = []
    for dim, off, size in zip(x.shape, offsets, sizes):
        if size < 1:
            raise ValueError(f"crop size must be >= 1, got {size}")
        if off < 0 or off + size > dim:
            raise ValueError(f"crop [{off}, {off + size}) out of bounds for dimension {dim}")
        index.append(slice(off, off + size))
    return x[tuple(index)].copy()


def shuffle(t, rng) -> np.ndarray:
    x = as_tensor(t)
    if x.ndim != 1:
        raise ValueError(f"shuffle expects a rank-1 tensor, got rank {x.ndim}")
    return _gen(rng).permutation(x)


# VSPE v1: "VSPE" | u8 version | u8 rank | rank x u32 LE dims | f32 LE payload


def dumps_vspe(t) -> bytes:
    x = as_tensor(t)
    header = VSPE_MAGIC + struct.pack("<BB", VSPE_VERSION, x.ndim)
    header += struct.pack(f"<{x.ndim}I", *x.shape)
    # numpy's float64 -> float32 cast rounds to nearest-even
    return header + x.astype("<f4").tobytes(order="C")


def loads_vspe(buf: bytes) -> np.ndarray:
    if len(buf) < 6 or buf[:4] != VSPE_MAGIC:
        raise VSPEFormatError("not a VSPE file (bad magic)")
    version, rank = buf[4], buf[5]
    if version != VSPE_VERSION:
        raise VSPEFormatError(f"unsupported VSPE version {version}")
    if not 1 <= rank <= MAX_RANK:
        raise VSPEFormatError(f"invalid rank {rank}")
    head = 6 + 4 * rank
    if len(buf) < head:
        raise VSPEFormatError("truncated header")
    dims = struct.unpack_from(f"<{rank}I", buf, 6)
    if any(d < 1 for d in dims):
        raise VSPEFormatError(f"invalid dimensions {dims}")
    n = math.prod(dims)
    if len(buf) != head + 4 * n:
        raise VSPEFormatError(f"payload size {len(buf) - head} does not match dims {dims}")
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=head)
    return data.astype(np.float64).reshape(dims)


def save_vspe(path: str | Path, t) -> None:
    Path(path).write_bytes(dumps_vspe(t))


def load_vspe(path: str | Path) -> np.ndarray:
    return loads_vspe(Path(path).read_bytes())
