"""Per-task covariance estimation from weight displacements.

The estimate for a task is the centered Gram matrix of its displacement
rows.  A heterogeneity coefficient over log displacement energies decides
whether estimates are trace-normalized before Tikhonov regularization.

Proportionality constants are dropped throughout: a uniform scale cancels
in the closed-form merge, and trace normalization absorbs non-uniform ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import as_matrix, frobenius_sq, trace


class DegenerateExpertError(ValueError):
    """An expert's weight displacement is identically zero."""


class UndefinedGammaError(ValueError):
    """Mean log-energy is zero, so the heterogeneity ratio is undefined."""


class DegenerateCovarianceError(ValueError):
    """A covariance estimate has zero trace and cannot be normalized."""


@dataclass(frozen=True)
class TaskVector:
    """Weight displacement of one fine-tuned expert relative to the base."""

    delta: np.ndarray  # d_out x d_in, float64
    task_id: str = ""
    layer_id: str = ""


@dataclass(frozen=True)
class CovarianceEstimate:
    """Symmetric PSD input-covariance proxy for one (layer, task) pair.

    ``trace_raw`` always carries the trace of the raw estimate, surviving
    normalization so the regularization coefficient can be energy-adjusted.
    """

    sigma: np.ndarray
    trace_raw: float
    normalized: bool = False
    eps_effective: float = 0.0


@dataclass(frozen=True)
class HeterogeneityStats:
    """Scale-divergence statistics over a task set's displacement energies."""

    gamma: float
    log_energies: np.ndarray
    mean_log: float
    var_log: float
    trace_avg: float


def task_vector(base, expert, task_id: str = "", layer_id: str = "") -> TaskVector:
    """Displacement ``expert - base``, promoted to float64."""
    base = as_matrix(base, "base")
    expert = as_matrix(expert, "expert")
    if base.shape != expert.shape:
        raise ValueError(f"shape mismatch: base {base.shape} vs expert {expert.shape}")
    return TaskVector(delta=expert - base, task_id=task_id, layer_id=layer_id)


def empirical_covariance(tv: TaskVector) -> CovarianceEstimate:
    """Centered Gram matrix of the displacement rows.

    Rows are treated as samples: the column-wise mean over the d_out rows
    is subtracted, then the Gram product is formed with unit constant.
    The result is symmetrized exactly and is PSD by construction.
    """
    delta = as_matrix(tv.delta, "delta")
    mu = delta.mean(axis=0)
    centered = delta - mu
    gram = centered.T @ centered
    sigma = (gram + gram.T) / 2.0
    return CovarianceEstimate(sigma=sigma, trace_raw=trace(sigma))


def heterogeneity(
    tvs: list[TaskVector], sigmas: list[CovarianceEstimate]
) -> HeterogeneityStats:
    """Variance-to-squared-mean ratio of log displacement energies.

    Energies are Frobenius norms squared of the raw displacements (the
    trace form of the same quantity).  Uses the population variance, which
    makes the single-task case well-defined (gamma = 0).
    """
    if not tvs:
        raise ValueError("at least one task is required")
    if len(tvs) != len(sigmas):
        raise ValueError("task vectors and covariance estimates must align")
    energies = []
    for tv in tvs:
        energy = frobenius_sq(tv.delta)
        if energy <= 0.0:
            raise DegenerateExpertError(
                f"degenerate expert: zero displacement for task {tv.task_id!r}"
            )
        energies.append(energy)
    log_energies = np.log(np.asarray(energies, dtype=np.float64))
    mean_log = float(log_energies.mean())
    var_log = float(log_energies.var())
    if var_log == 0.0:
        gamma = 0.0
    elif mean_log == 0.0:
        raise UndefinedGammaError("undefined gamma: mean log-energy is zero")
    else:
        gamma = var_log / mean_log**2
    trace_avg = float(np.mean([cov.trace_raw for cov in sigmas]))
    return HeterogeneityStats(
        gamma=gamma,
        log_energies=log_energies,
        mean_log=mean_log,
        var_log=var_log,
        trace_avg=trace_avg,
    )


def trace_normalize(cov: CovarianceEstimate) -> CovarianceEstimate:
    """Scale the estimate to unit trace; ``trace_raw`` keeps the original."""
    if cov.trace_raw <= 0.0:
        raise DegenerateCovarianceError("degenerate covariance: trace is zero")
    return CovarianceEstimate(
        sigma=cov.sigma / cov.trace_raw,
        trace_raw=cov.trace_raw,
        normalized=True,
        eps_effective=cov.eps_effective,
    )


def regularize(cov: CovarianceEstimate, eps: float, heterogeneous: bool) -> CovarianceEstimate:
    """Add a Tikhonov ridge scaled for the active branch.

    Heterogeneous: the estimate must be trace-normalized and the ridge is
    energy-adjusted to ``eps / trace_raw``.  Homogeneous: the raw estimate
    gets a plain ``eps`` ridge (normalization is skipped on that branch).
    """
    if eps <= 0.0:
        raise ValueError(f"eps must be positive, got {eps}")
    if heterogeneous:
        if not cov.normalized:
            raise ValueError("heterogeneous regularization expects a trace-normalized estimate")
        if cov.trace_raw <= 0.0:
            raise DegenerateCovarianceError("degenerate covariance: trace is zero")
        eps_effective = eps / cov.trace_raw
    else:
        if cov.normalized:
            raise ValueError("homogeneous regularization operates on the raw estimate")
        eps_effective = eps
    sigma = cov.sigma + eps_effective * np.eye(cov.sigma.shape[0])
    return CovarianceEstimate(
        sigma=sigma,
        trace_raw=cov.trace_raw,
        normalized=cov.normalized,
        eps_effective=eps_effective,
    )
