"""Deterministic float64 primitives and counter-based random streams.

Vectors are plain 1-D ``numpy`` arrays of dtype float64. Every function here
returns a fresh array and never writes into its inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError

Vec64 = np.ndarray
Matrix = np.ndarray

# Philox4x64 counter word reserved for substream indexing (see RngStream.at).
_SUBSTREAM_WORD = 1


def as_vec(values) -> Vec64:
    """Copy ``values`` into a new contiguous float64 vector."""
    out = np.array(values, dtype=np.float64, copy=True)
    if out.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {out.shape}")
    return out


def axpy(a: float, x: Vec64, y: Vec64) -> Vec64:
    """Return ``a*x + y`` as a new vector."""
    if x.shape != y.shape:
        raise DimensionError(f"axpy length mismatch: {x.shape} vs {y.shape}")
    return a * x + y


def l2_norm(x: Vec64) -> float:
    """Euclidean norm, exactly rounded before the square root.

    Values are first scaled by a power of two near the largest magnitude
    (an exact operation), so squares neither overflow nor underflow, and
    ``fsum`` makes the sum independent of element order.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return 0.0
    peak = float(np.max(np.abs(x)))
    if not math.isfinite(peak):
        return math.nan if np.isnan(x).any() else math.inf
    if peak == 0.0:
        return 0.0
    exp = math.frexp(peak)[1]
    scaled = np.ldexp(x, -exp)
    return math.ldexp(math.sqrt(math.fsum(np.square(scaled).tolist())), exp)


def matvec(m: Matrix, x: Vec64) -> Vec64:
    if m.ndim != 2 or m.shape[1] != x.shape[0]:
        raise DimensionError(f"matvec shape mismatch: {m.shape} @ {x.shape}")
    return m @ x


def softmax(x: Vec64) -> Vec64:
    """Softmax along the last axis, computed with max-subtraction."""
    x = np.asarray(x, dtype=np.float64)
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(x: Vec64) -> Vec64:
    x = np.asarray(x, dtype=np.float64)
    z = x - np.max(x, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    Backed by numpy's Philox4x64 counter-based generator: the pair is used as
    the 128-bit key, so distinct stream ids are independent streams of the
    same master seed. ``at(i)`` jumps to a disjoint counter range, which gives
    random access to the i-th substream without drawing the ones before it.
    """

    seed: int
    stream_id: int = 0
    substream: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id", "substream"):
            v = getattr(self, name)
            if not 0 <= v < 2**64:
                raise ParameterError(f"{name} must be a 64-bit unsigned integer, got {v}")

    def generator(self) -> np.random.Generator:
        counter = [0, 0, 0, 0]
        counter[_SUBSTREAM_WORD] = self.substream
        bitgen = np.random.Philox(key=[self.seed, self.stream_id], counter=counter)
        return np.random.Generator(bitgen)

    def split(self, stream_id: int) -> RngStream:
        return RngStream(self.seed, stream_id)

    def at(self, index: int) -> RngStream:
        return RngStream(self.seed, self.stream_id, index)


def gaussian(rng: np.random.Generator | RngStream, n: int, mean: float = 0.0, std: float = 1.0) -> Vec64:
    """Draw ``n`` normal samples. An ``RngStream`` is read from its start;
    a ``Generator`` is advanced."""
    if std < 0:
        raise ParameterError(f"std must be non-negative, got {std}")
    if n < 0:
        raise ParameterError(f"n must be non-negative, got {n}")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    z = gen.standard_normal(n)
    return mean + std * z
