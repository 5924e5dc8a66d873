"""Index-addressable Gaussian noise and Monte-Carlo smoothed embeddings.

Noise vector ``i`` of a stream is a pure function of (seed, stream_id, i):
Philox4x64 keyed by (seed, stream_id) supplies ``blocks`` counter blocks of
four 64-bit words per vector, starting at counter ``i * blocks``. Each word is
mapped to a uniform on (0, 1) from its top 53 bits, and consecutive uniform
pairs (u1, u2) become two normals by Box-Muller:
``sqrt(-2 ln u1) * (cos 2 pi u2, sin 2 pi u2)``.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DependenceError, DomainError, InvariantError, ProtosmoothError

CHUNK = 4096
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class NoiseStream:
    seed: int
    sigma: float
    dim: int
    stream_id: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise DomainError(f"sigma must be positive, got {self.sigma!r}")
        if self.dim < 1:
            raise DomainError("noise dimension must be >= 1")

    @property
    def blocks(self) -> int:
        return math.ceil(2 * math.ceil(self.dim / 2) / 4)

    def batch(self, start: int, n: int) -> np.ndarray:
        """Noise vectors for indices ``start .. start+n-1`` as an (n, dim) array."""
        if start < 0 or n < 0:
            raise DomainError("noise indices must be non-negative")
        words = 4 * self.blocks
        bitgen = np.random.Philox(
            key=[self.seed & _MASK64, self.stream_id & _MASK64],
            counter=[start * self.blocks, 0, 0, 0],
        )
        raw = bitgen.random_raw(n * words).reshape(n, words)
        u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
        radius = np.sqrt(-2.0 * np.log(u[:, 0::2]))
        angle = 2.0 * math.pi * u[:, 1::2]
        z = np.empty_like(u)
        z[:, 0::2] = radius * np.cos(angle)
        z[:, 1::2] = radius * np.sin(angle)
        return self.sigma * z[:, : self.dim]

    def sample(self, index: int) -> np.ndarray:
        return self.batch(index, 1)[0]


def sample_noise(stream: NoiseStream, index: int) -> np.ndarray:
    return stream.sample(index)


@dataclass(frozen=True)
class SmoothedEstimate:
    mean: np.ndarray
    n_samples: int
    first_index: int
    last_index: int

    def disjoint_from(self, other: "SmoothedEstimate") -> bool:
        return self.last_index < other.first_index or other.last_index < self.first_index


@dataclass(frozen=True)
class PairedSquareObservation:
    value: float
    class_id: object
    index_pair: tuple
    # effective Hoeffding count: the pair is a two-sample average over `weight` samples each
    weight: int = 1


@lru_cache(maxsize=8)
def _executor(workers: int) -> ThreadPoolExecutor:
    return ThreadPoolExecutor(max_workers=workers, thread_name_prefix="protosmooth")


def _chunks(start: int, n: int):
    """Split [start, start+n) at absolute multiples of CHUNK."""
    end = start + n
    lo = start
    while lo < end:
        hi = min(end, (lo // CHUNK + 1) * CHUNK)
        yield lo, hi - lo
        lo = hi


def mean_embedding(model, x, stream: NoiseStream, start: int, n: int, workers: int = 1) -> SmoothedEstimate:
    """Mean of f(x + eps_i) over stream indices [start, start+n).

    Partial sums are formed over fixed index chunks and added in ascending
    order, so the result is bit-identical for any ``workers``.
    """
    if n < 1:
        raise DomainError("mean_embedding needs n >= 1")

    def partial(chunk):
        lo, m = chunk
        try:
            rows = model.noisy_embeddings(x, stream, lo, m)
        except ProtosmoothError as exc:
            raise type(exc)(f"{exc} [noise indices {lo}..{lo + m - 1}]") from exc
        return rows.sum(axis=0)

    chunks = list(_chunks(start, n))
    if workers > 1 and len(chunks) > 1:
        parts = list(_executor(workers).map(partial, chunks))
    else:
        parts = [partial(c) for c in chunks]
    total = parts[0].copy()
    for p in parts[1:]:
        total += p
    mean = total / n
    if np.linalg.norm(mean) > 1.0 + 1e-9:
        raise InvariantError(f"smoothed mean has norm {np.linalg.norm(mean)!r} > 1")
    return SmoothedEstimate(mean, n, start, start + n - 1)


def paired_square_estimate(a: SmoothedEstimate, b: SmoothedEstimate, c, class_id=None) -> PairedSquareObservation:
    """<a - c, b - c>, an unbiased estimate of ||g(x) - c||^2 for independent a, b."""
    if not a.disjoint_from(b):
        raise DependenceError(
            f"estimates share noise indices: [{a.first_index}, {a.last_index}] vs "
            f"[{b.first_index}, {b.last_index}]"
        )
    c = np.asarray(c, dtype=np.float64)
    value = float(np.dot(a.mean - c, b.mean - c))
    if not -1.0 - 1e-9 <= value <= 4.0 + 1e-9:
        raise InvariantError(f"paired observation {value!r} outside [-1, 4]")
    return PairedSquareObservation(
        value, class_id,
        ((a.first_index, a.last_index), (b.first_index, b.last_index)),
        min(a.n_samples, b.n_samples),
    )
