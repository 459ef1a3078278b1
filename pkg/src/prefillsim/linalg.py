"""Deterministic dense linear algebra helpers.

All arrays are float64 and all randomness flows through PCG64, so a given
seed produces bit-identical values on every platform. Matrices are plain
``numpy.ndarray`` objects in row-major layout; this module only adds the
seeded constructors and small numeric utilities the adapter math needs.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DomainError, RankError, ShapeError

__all__ = [
    "rng_from_seed",
    "kaiming_uniform",
    "random_orthonormal_rows",
    "vector_norms",
    "sign_quotient",
    "finite_difference_grad",
]


def rng_from_seed(seed: int, stream: int = 0) -> np.random.Generator:
    """Return a PCG64 generator for (seed, stream).

    Distinct ``stream`` values give statistically independent streams from
    the same master seed.
    """
    if seed < 0:
        raise DomainError(f"seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, stream))))


def kaiming_uniform(rows: int, cols: int, seed: int) -> np.ndarray:
    """Sample a (rows, cols) matrix uniformly from [-b, b], b = sqrt(6 / cols).

    The fan-in is the column count, i.e. the dimension the matrix consumes.
    """
    if rows < 1 or cols < 1:
        raise ShapeError(f"matrix dims must be positive, got {rows}x{cols}")
    bound = np.sqrt(6.0 / cols)
    return rng_from_seed(seed).uniform(-bound, bound, size=(rows, cols))


def random_orthonormal_rows(r: int, d: int, seed: int) -> np.ndarray:
    """Return an (r, d) matrix with orthonormal rows, r <= d.

    A Gaussian matrix is orthogonalised by modified Gram-Schmidt with one
    reorthogonalisation pass, which keeps row_i . row_j within about 1e-14
    of the identity even at d = 256.
    """
    if r < 1:
        raise RankError(f"need at least one row, got r={r}")
    if r > d:
        raise RankError(f"cannot fit {r} orthonormal rows in dimension {d}")
    q = rng_from_seed(seed).normal(size=(r, d))
    for _ in range(2):
        for i in range(r):
            for j in range(i):
                q[i] -= (q[i] @ q[j]) * q[j]
            norm = np.linalg.norm(q[i])
            if norm == 0.0:  # unreachable for Gaussian draws, kept as a guard
                raise RankError("degenerate draw while orthogonalising")
            q[i] /= norm
    return q


def vector_norms(v: np.ndarray) -> tuple[float, float]:
    """(l1, l2) norms of a vector; rejects anything that is not 1-D-like."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 2 and 1 in v.shape:
        v = v.ravel()
    if v.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {v.shape}")
    return float(np.abs(v).sum()), float(np.linalg.norm(v))


def sign_quotient(x: np.ndarray, eps: float) -> np.ndarray:
    """Elementwise x / (|x| + eps), a smooth stand-in for sign(x).

    Exactly zero entries map to zero. eps must be positive.
    """
    if eps <= 0.0:
        raise DomainError(f"eps must be positive, got {eps}")
    x = np.asarray(x, dtype=np.float64)
    out = x / (np.abs(x) + eps)
    # the true quotient is strictly inside (-1, 1) but can round to +-1.0
    # when eps is below one ulp of |x|; clamp to keep the contract exact
    edge = np.nextafter(1.0, 0.0)
    return np.clip(out, -edge, edge)


def finite_difference_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6
) -> np.ndarray:
    """Central-difference gradient of a scalar function of a matrix.

    Perturbs one entry at a time, so cost is 2 * x.size evaluations of f.
    Intended for verifying analytic gradients in tests, not for training.
    """
    if h <= 0.0:
        raise DomainError(f"step h must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        grad[idx] = (f(xp) - f(xm)) / (2.0 * h)
    return grad
