"""Dense matrix primitives used by the merging pipeline.

Everything operates on float64 numpy arrays in row-major order.  Reductions
use a fixed accumulation order, so identical inputs give bit-identical
results no matter how many worker threads call in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack

SYMMETRY_RTOL = 1e-10
EFFECTIVE_RANK_RTOL = 1e-12


class AsymmetricMatrixError(ValueError):
    """A matrix that must be symmetric exceeded the asymmetry tolerance."""


class NotPositiveDefiniteError(ValueError):
    """Cholesky factorization failed.

    ``pivot`` is the 1-based order of the leading minor that is not
    positive definite, as reported by LAPACK.
    """

    def __init__(self, pivot: int):
        super().__init__(f"matrix is not positive definite (failing pivot {pivot})")
        self.pivot = pivot


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """Validate and return a finite, contiguous float64 2-D array."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must have positive extents, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite entries")
    return np.ascontiguousarray(arr)


def _require_symmetric(a: np.ndarray) -> None:
    scale = float(np.abs(a).max())
    asym = float(np.abs(a - a.T).max())
    if asym > SYMMETRY_RTOL * max(scale, 1e-300):
        raise AsymmetricMatrixError(
            f"matrix is not symmetric (relative asymmetry {asym / max(scale, 1e-300):.3e})"
        )


def solve_right(b, a) -> np.ndarray:
    """Solve ``X @ a = b`` for X, with ``a`` symmetric positive definite.

    Solved through a Cholesky factorization of ``a``; the explicit inverse
    is never formed.  Satisfies ``||X a - b||_F <= 1e-8 * (1 + ||b||_F)``
    for well-conditioned inputs.

    Raises AsymmetricMatrixError or NotPositiveDefiniteError when ``a``
    violates its preconditions; callers own any fallback policy.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"a must be square, got shape {a.shape}")
    if b.shape[1] != a.shape[0]:
        raise ValueError(f"incompatible shapes: b is {b.shape}, a is {a.shape}")
    _require_symmetric(a)
    c, info = lapack.dpotrf(a, lower=1)
    if info != 0:
        raise NotPositiveDefiniteError(int(info))
    xt, info = lapack.dpotrs(c, np.ascontiguousarray(b.T), lower=1)
    if info != 0:
        raise ValueError(f"triangular solve failed (info={info})")
    return np.ascontiguousarray(xt.T)


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``m = u @ diag(s) @ v.T`` with ``s`` descending."""

    u: np.ndarray  # d_out x r, orthonormal columns
    s: np.ndarray  # length r, descending, non-negative
    v: np.ndarray  # d_in x r, orthonormal columns


def svd_thin(m) -> SvdResult:
    """Thin singular value decomposition of a finite matrix."""
    m = as_matrix(m, "m")
    u, s, vh = np.linalg.svd(m, full_matrices=False)
    return SvdResult(u=np.ascontiguousarray(u), s=s, v=np.ascontiguousarray(vh.T))


@dataclass(frozen=True)
class SpectrumStats:
    """Summary statistics of a singular value spectrum.

    ``condition_number`` is the max/min ratio over nonzero values (1.0 for
    an all-zero spectrum, where the ratio is vacuous).  ``num_effective``
    counts values at least ``1e-12`` times the largest.
    """

    singular_values: np.ndarray  # sorted descending
    condition_number: float
    num_effective: int

    def energy_fraction(self, p: float) -> float:
        """Fraction of total squared energy in the top p-quantile of values.

        The quantile keeps ``floor(p * r)`` values, matching the rank rule
        used by spectral refinement.  Returns 1.0 for a zero spectrum.
        """
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"p must be in [0, 1], got {p}")
        sv = self.singular_values
        total = float(np.dot(sv, sv))
        if total == 0.0:
            return 1.0
        k = int(math.floor(p * len(sv)))
        top = sv[:k]
        return float(np.dot(top, top) / total)


def spectrum_stats(s) -> SpectrumStats:
    """Compute conditioning and energy statistics for singular values ``s``."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("singular values must be a non-empty 1-D array")
    if not np.isfinite(s).all() or (s < 0).any():
        raise ValueError("singular values must be finite and non-negative")
    sv = np.sort(s)[::-1].copy()
    nonzero = sv[sv > 0.0]
    cond = 1.0 if nonzero.size == 0 else float(nonzero[0] / nonzero[-1])
    num_effective = int(np.count_nonzero(sv >= EFFECTIVE_RANK_RTOL * sv[0]))
    return SpectrumStats(singular_values=sv, condition_number=cond, num_effective=num_effective)


def trace(a) -> float:
    """Trace of a square matrix, accumulated in float64."""
    a = as_matrix(a, "a")
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"trace requires a square matrix, got shape {a.shape}")
    return float(np.trace(a))


def frobenius_sq(m) -> float:
    """Squared Frobenius norm, accumulated in float64 in row-major order."""
    m = as_matrix(m, "m")
    flat = m.ravel()
    return float(np.dot(flat, flat))
