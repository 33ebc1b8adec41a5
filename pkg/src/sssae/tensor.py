"""Dense float64 substrate shared by every other module.

Matrices and vectors are plain ``numpy.ndarray`` objects of dtype float64,
stored row-major (C order).  Randomness always comes from a
``numpy.random.Generator`` driven by the PCG64 bit generator, seeded through
``SeedSequence`` so that a given integer seed produces the same stream on
every platform.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64

# stream identifiers mixed into the seed so that init / shuffling /
# corruption / label splits never share a stream
STREAM_INIT = 1
STREAM_SHUFFLE = 2
STREAM_CORRUPT = 3
STREAM_SPLIT = 4
STREAM_SYNTH = 5


class ShapeError(ValueError):
    """Raised when array dimensions do not line up."""


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Return a PCG64 generator for ``seed`` and optional sub-stream keys."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    entropy = [int(seed)] + [int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def as_matrix(rows) -> np.ndarray:
    m = np.ascontiguousarray(rows, dtype=DTYPE)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-d matrix, got shape {m.shape}")
    return m


def as_vector(values) -> np.ndarray:
    v = np.ascontiguousarray(values, dtype=DTYPE)
    if v.ndim != 1:
        raise ShapeError(f"expected a 1-d vector, got shape {v.shape}")
    return v


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Matrix-vector product ``m @ v`` with an explicit shape check."""
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeError(f"cannot multiply matrix {m.shape} by vector {v.shape}")
    return m @ v


def affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``w @ x + b`` for a single vector, or row-wise for a batch of rows."""
    if x.shape[-1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(
            f"incompatible shapes: input {x.shape}, weights {w.shape}, bias {b.shape}"
        )
    if x.ndim == 1:
        return matvec(w, x) + b
    return x @ w.T + b


def tanh_map(v: np.ndarray) -> np.ndarray:
    return np.tanh(v)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, shifted by the max logit."""
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def uniform_init(rng: np.random.Generator, rows: int, cols: int, scale: float) -> np.ndarray:
    """Matrix of i.i.d. draws from U[-scale, +scale]."""
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    return rng.uniform(-scale, scale, size=(rows, cols)).astype(DTYPE, copy=False)
