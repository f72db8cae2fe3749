"""Vector primitives on the unit hypersphere.

Every dot product in the package goes through :func:`ordered_dot` or
:func:`ordered_matmul`, which accumulate in float64 in ascending index
order.  The batched and scalar paths therefore agree bit-for-bit and results
do not depend on the BLAS build or thread count.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import DimensionMismatch, EmptyInput, ZeroVector

ZERO_NORM = 1e-12

Vector = NDArray[np.float64]
Matrix = NDArray[np.float64]


def as_vector(v: ArrayLike) -> Vector:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionMismatch(f"expected a 1-d vector, got shape {arr.shape}")
    return arr


def as_matrix(vectors: ArrayLike | Sequence[ArrayLike], dim: int | None = None) -> Matrix:
    """Stack vectors into a (count, dim) float64 array, checking dimensions."""
    if isinstance(vectors, np.ndarray):
        arr = np.asarray(vectors, dtype=np.float64)
        if arr.ndim == 1 and arr.size == 0:
            arr = arr.reshape(0, dim or 0)
    else:
        rows = [as_vector(v) for v in vectors]
        if not rows:
            return np.zeros((0, dim or 0))
        if len({r.shape[0] for r in rows}) != 1:
            raise DimensionMismatch("vectors in one collection differ in dimension")
        arr = np.vstack(rows)
    if arr.ndim != 2:
        raise DimensionMismatch(f"expected a 2-d array, got shape {arr.shape}")
    if dim is not None and arr.shape[0] and arr.shape[1] != dim:
        raise DimensionMismatch(f"expected dimension {dim}, got {arr.shape[1]}")
    return arr


def ordered_dot(u: ArrayLike, v: ArrayLike) -> float:
    a = as_vector(u)
    b = as_vector(v)
    if a.shape != b.shape:
        raise DimensionMismatch(f"dimensions differ: {a.shape[0]} vs {b.shape[0]}")
    acc = 0.0
    for x, y in zip(a.tolist(), b.tolist()):
        acc += x * y
    return acc


def ordered_matmul(a: Matrix, b: Matrix) -> Matrix:
    """Return ``a @ b.T`` accumulated over the shared axis in ascending order."""
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    out = np.zeros((a.shape[0], b.shape[0]))
    for k in range(a.shape[1]):
        out += np.multiply.outer(a[:, k], b[:, k])
    return out


def row_norms(x: Matrix) -> Vector:
    sq = np.zeros(x.shape[0])
    for k in range(x.shape[1]):
        sq += x[:, k] * x[:, k]
    return np.sqrt(sq)


def l2_normalize(v: ArrayLike) -> Vector:
    """Scale ``v`` onto the unit sphere.

    Raises:
        ZeroVector: if the norm is below 1e-12.
        DimensionMismatch: if ``v`` has fewer than two entries.
    """
    a = as_vector(v)
    if a.shape[0] < 2:
        raise DimensionMismatch("embeddings need at least 2 dimensions")
    norm = math.sqrt(ordered_dot(a, a))
    if norm < ZERO_NORM:
        raise ZeroVector("cannot normalize a zero vector")
    return a / norm


def normalize_rows(x: ArrayLike) -> Matrix:
    """Row-wise :func:`l2_normalize`; identical results row by row."""
    arr = as_matrix(x)
    if arr.shape[1] < 2:
        raise DimensionMismatch("embeddings need at least 2 dimensions")
    norms = row_norms(arr)
    if arr.shape[0] and norms.min() < ZERO_NORM:
        raise ZeroVector(f"row {int(np.argmin(norms))} has zero norm")
    return arr / norms[:, None]


def clamp_unit(c):
    return np.clip(c, -1.0, 1.0)


def cosine(u: ArrayLike, v: ArrayLike) -> float:
    """Dot product of two unit vectors, clamped to [-1, 1]."""
    return float(min(1.0, max(-1.0, ordered_dot(u, v))))


def angle(u: ArrayLike, v: ArrayLike) -> float:
    return math.acos(cosine(u, v))


def pairwise_cosine(anchors: ArrayLike | Sequence[ArrayLike],
                    candidates: ArrayLike | Sequence[ArrayLike]) -> Matrix:
    """Cosine matrix with ``out[i, j] == cosine(anchors[i], candidates[j])``."""
    a = as_matrix(anchors)
    b = as_matrix(candidates)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise EmptyInput("pairwise_cosine needs non-empty inputs")
    return clamp_unit(ordered_matmul(a, b))
