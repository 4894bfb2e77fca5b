"""Shared builders for the test suite."""

from __future__ import annotations

import numpy as np

from acemerge import Checkpoint


def random_spd(rng, d, lo=1e-2, hi=1e2):
    """SPD matrix with log-uniform eigenvalues in [lo, hi]."""
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    eigvals = np.exp(rng.uniform(np.log(lo), np.log(hi), d))
    return (q * eigvals) @ q.T


def random_checkpoint(rng, num_tensors=3, include_scalar=False):
    tensors = {}
    if include_scalar:
        tensors["scalar"] = np.float64(rng.standard_normal())
    for i in range(num_tensors):
        rank = int(rng.integers(0, 5))
        shape = tuple(int(rng.integers(1, 5)) for _ in range(rank))
        dtype = np.float32 if rng.integers(0, 2) else np.float64
        tensors[f"tensor.{i}"] = rng.standard_normal(shape).astype(dtype)
    return Checkpoint(tensors, metadata={"origin": "test"})


def heterogeneous_instance(rng, d_out, d_in, scales=(0.1, 1.0, 10.0)):
    """Base plus experts whose displacement energies span decades."""
    base = rng.standard_normal((d_out, d_in))
    experts = [base + s * rng.standard_normal((d_out, d_in)) for s in scales]
    return base, experts
