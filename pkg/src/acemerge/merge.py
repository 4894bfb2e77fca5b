"""Layer fusion: collective prior, closed-form solve, spectral refinement.

The per-layer pipeline follows three stages: adaptive scaling (estimate
covariances, measure heterogeneity, normalize/regularize accordingly), the
collective structural prior, and fusion with an optional low-rank spectral
correction on the heterogeneous branch.  ``merge_model`` orchestrates the
pipeline over a whole checkpoint.
"""

from __future__ import annotations

import fnmatch
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import baselines
from .container import Checkpoint, shape_diff
from .covariance import (
    CovarianceEstimate,
    DegenerateExpertError,
    empirical_covariance,
    heterogeneity,
    regularize,
    task_vector,
    trace_normalize,
)
from .linalg import (
    NotPositiveDefiniteError,
    SpectrumStats,
    as_matrix,
    solve_right,
    spectrum_stats,
    svd_thin,
    trace,
)

METHODS = ("ace", "average", "task_arith", "cov_proxy_tv", "cov_proxy_tv_norm")
BRANCHES = ("homogeneous", "heterogeneous")

DEFAULT_EPS = 1e-5
DEFAULT_TAU = 0.3
DEFAULT_K_FRAC = 0.3

# Fallback ladder labels recorded in diagnostics when the SPD solve of the
# merge denominator needs help.
FALLBACK_JITTER = "jitter-retry"
FALLBACK_GENERAL = "general-solve"
FALLBACK_DEGENERATE = "degenerate-experts-average"


@dataclass(frozen=True)
class MergeConfig:
    """Hyperparameters and method selection for a merge run."""

    eps: float = DEFAULT_EPS
    tau: float = DEFAULT_TAU
    k_frac: float = DEFAULT_K_FRAC
    method: str = "ace"
    task_arith_lambda: float = 1.0
    layer_include: tuple[str, ...] = ()
    force_branch: str | None = None

    def __post_init__(self):
        if self.eps <= 0.0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if not np.isfinite(self.tau):
            raise ValueError("tau must be finite")
        if not 0.0 <= self.k_frac <= 1.0:
            raise ValueError(f"k_frac must be in [0, 1], got {self.k_frac}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.force_branch is not None and self.force_branch not in BRANCHES:
            raise ValueError(f"force_branch must be one of {BRANCHES} or None")
        object.__setattr__(self, "layer_include", tuple(self.layer_include))

    def to_json(self) -> dict:
        return {
            "eps": self.eps,
            "tau": self.tau,
            "k_frac": self.k_frac,
            "method": self.method,
            "task_arith_lambda": self.task_arith_lambda,
            "layer_include": list(self.layer_include),
            "force_branch": self.force_branch,
        }


@dataclass
class LayerDiagnostics:
    """Per-layer record of the branch taken and spectrum statistics."""

    gamma: float | None = None
    branch: str | None = None
    trace_avg: float | None = None
    pre_spectrum: SpectrumStats | None = None
    final_spectrum: SpectrumStats | None = None
    refinement_rank: int = 0
    sigma_iso: float = 0.0
    principal_alignment: list[float] = field(default_factory=list)
    fallback: str | None = None

    def to_json(self) -> dict:
        def cond(stats):
            return None if stats is None else stats.condition_number

        def top5(stats):
            return None if stats is None else stats.energy_fraction(0.05)

        return {
            "gamma": self.gamma,
            "branch": self.branch,
            "k": self.refinement_rank,
            "sigma_iso": self.sigma_iso,
            "pre_condition_number": cond(self.pre_spectrum),
            "final_condition_number": cond(self.final_spectrum),
            "energy_top5pct_pre": top5(self.pre_spectrum),
            "energy_top5pct_final": top5(self.final_spectrum),
            "principal_alignment": list(self.principal_alignment),
            "fallback": self.fallback,
        }


@dataclass
class LayerMergeOutput:
    merged: np.ndarray
    diagnostics: LayerDiagnostics


def collective_prior(
    sigmas: list[CovarianceEstimate], trace_avg: float, heterogeneous: bool
) -> np.ndarray:
    """Rank-one prior broadcasting the mean column energy of the aggregate.

    Every row equals the column means of the summed covariances; on the
    heterogeneous branch (where the inputs are the scaled estimates) the
    result is additionally divided by the average raw trace.
    """
    if not sigmas:
        raise ValueError("at least one covariance estimate is required")
    aggregate = sigmas[0].sigma.copy()
    for cov in sigmas[1:]:
        aggregate += cov.sigma
    d_in = aggregate.shape[0]
    row = aggregate.sum(axis=0) / d_in
    prior = np.outer(np.ones(d_in), row)
    if heterogeneous:
        if trace_avg <= 0.0:
            raise ValueError(f"trace_avg must be positive on the heterogeneous branch, got {trace_avg}")
        prior /= trace_avg
    return prior


def solve_fallback_ladder(
    numerator: np.ndarray, denominator: np.ndarray
) -> tuple[np.ndarray, str | None]:
    """SPD solve with a recorded fallback ladder.

    (1) Cholesky solve of the symmetric system; (2) on failure, add a
    ``1e-10 * tr(D)/d`` jitter ridge and retry once; (3) on failure, a
    pivoted general solve.  Returns the solution and the label of the step
    that succeeded (None for the direct solve).
    """
    try:
        return solve_right(numerator, denominator), None
    except NotPositiveDefiniteError:
        pass
    d = denominator.shape[0]
    jitter = 1e-10 * trace(denominator) / d
    bumped = denominator + jitter * np.eye(d)
    try:
        return solve_right(numerator, bumped), FALLBACK_JITTER
    except NotPositiveDefiniteError:
        pass
    solution = np.linalg.solve(bumped.T, numerator.T).T
    return np.ascontiguousarray(solution), FALLBACK_GENERAL


def preliminary_solution(
    experts: list[np.ndarray],
    sigmas_reg: list[CovarianceEstimate],
    c_agg: np.ndarray,
) -> np.ndarray:
    """Closed-form merge of experts under regularized covariances.

    Solves ``X (sum sigma_reg + sym(C_agg)) = sum W_t sigma_reg_t``.  The
    prior is rank-one and not symmetric in general, so the denominator is
    symmetrized before the SPD solve, preserving its quadratic-form action.
    """
    solution, _ = _assemble_and_solve(experts, sigmas_reg, c_agg)
    return solution


def _assemble_and_solve(experts, sigmas_reg, c_agg):
    if not experts:
        raise ValueError("empty expert list")
    if len(experts) != len(sigmas_reg):
        raise ValueError("experts and covariance estimates must align")
    c_agg = as_matrix(c_agg, "c_agg")
    numerator = np.zeros_like(as_matrix(experts[0], "experts[0]"))
    denominator = np.zeros_like(c_agg)
    for i, (expert, cov) in enumerate(zip(experts, sigmas_reg)):
        expert = as_matrix(expert, f"experts[{i}]")
        numerator += expert @ cov.sigma
        denominator += cov.sigma
    denominator += (c_agg + c_agg.T) / 2.0
    return solve_fallback_ladder(numerator, denominator)


def structural_residual(
    experts: list[np.ndarray],
    sigmas_scaled: list[CovarianceEstimate],
    sigmas_reg: list[CovarianceEstimate],
) -> np.ndarray:
    """First-order correction ``sum W_t (sigma_scaled_t - mean(sigma_reg))``.

    The scaled estimates sit inside the parenthesis while the mean is taken
    over the regularized ones; implemented exactly as specified.
    """
    if not experts or len(experts) != len(sigmas_scaled) or len(experts) != len(sigmas_reg):
        raise ValueError("experts, scaled and regularized estimates must align")
    sigma_bar = sigmas_reg[0].sigma.copy()
    for cov in sigmas_reg[1:]:
        sigma_bar += cov.sigma
    sigma_bar /= len(sigmas_reg)
    residual = np.zeros_like(as_matrix(experts[0], "experts[0]"))
    for expert, cov in zip(experts, sigmas_scaled):
        residual += as_matrix(expert, "expert") @ (cov.sigma - sigma_bar)
    return residual


def spectral_refinement(
    w_pre: np.ndarray, delta_res: np.ndarray, k_frac: float
) -> tuple[np.ndarray, float, int]:
    """Low-rank correction that flattens the top of the fused spectrum.

    Fuses the residual into the preliminary solution, keeps the top
    ``k = floor(k_frac * min(d_out, d_in))`` principal directions, and
    re-weights them uniformly with their mean singular value.  ``k = 0``
    returns an exact zero correction.
    """
    w_pre = as_matrix(w_pre, "w_pre")
    delta_res = as_matrix(delta_res, "delta_res")
    if w_pre.shape != delta_res.shape:
        raise ValueError("w_pre and delta_res must share a shape")
    if not 0.0 <= k_frac <= 1.0:
        raise ValueError(f"k_frac must be in [0, 1], got {k_frac}")
    rank = min(w_pre.shape)
    k = int(np.floor(k_frac * rank))
    if k == 0:
        return np.zeros_like(w_pre), 0.0, 0
    fused = w_pre + delta_res
    decomp = svd_thin(fused)
    sigma_iso = float(decomp.s[:k].mean())
    correction = sigma_iso * (decomp.u[:, :k] @ decomp.v[:, :k].T)
    return correction, sigma_iso, k


def merge_layer(base, experts: list[np.ndarray], cfg: MergeConfig) -> LayerMergeOutput:
    """Run the full adaptive pipeline on one weight matrix.

    Estimates covariances from task vectors, branches on the heterogeneity
    coefficient against ``cfg.tau`` (or ``cfg.force_branch``), solves the
    closed form with the collective prior, and applies spectral refinement
    on the heterogeneous branch.  If any expert displacement is exactly
    zero the heterogeneity coefficient is undefined and the layer falls
    back to weight averaging, flagged in diagnostics.
    """
    base = as_matrix(base, "base")
    if not experts:
        raise ValueError("empty expert list")
    experts = [as_matrix(w, f"experts[{i}]") for i, w in enumerate(experts)]
    for w in experts:
        if w.shape != base.shape:
            raise ValueError("experts must share the base shape")

    try:
        tvs = [task_vector(base, w, task_id=str(i)) for i, w in enumerate(experts)]
        sigmas = [empirical_covariance(tv) for tv in tvs]
        stats = heterogeneity(tvs, sigmas)
    except DegenerateExpertError:
        merged = baselines.weight_average(experts)
        spectrum = spectrum_stats(svd_thin(merged).s)
        diags = LayerDiagnostics(
            final_spectrum=spectrum,
            fallback=FALLBACK_DEGENERATE,
        )
        return LayerMergeOutput(merged=merged, diagnostics=diags)

    branch = cfg.force_branch or (
        "heterogeneous" if stats.gamma > cfg.tau else "homogeneous"
    )
    heterogeneous = branch == "heterogeneous"

    if heterogeneous:
        scaled = [trace_normalize(cov) for cov in sigmas]
        reg = [regularize(cov, cfg.eps, heterogeneous=True) for cov in scaled]
        c_agg = collective_prior(scaled, stats.trace_avg, heterogeneous=True)
    else:
        reg = [regularize(cov, cfg.eps, heterogeneous=False) for cov in sigmas]
        c_agg = collective_prior(sigmas, stats.trace_avg, heterogeneous=False)

    w_pre, fallback = _assemble_and_solve(experts, reg, c_agg)
    pre_decomp = svd_thin(w_pre)
    pre_spectrum = spectrum_stats(pre_decomp.s)

    if heterogeneous:
        delta_res = structural_residual(experts, scaled, reg)
        correction, sigma_iso, k = spectral_refinement(w_pre, delta_res, cfg.k_frac)
        merged = w_pre + correction if k > 0 else w_pre.copy()
    else:
        merged = w_pre.copy()
        sigma_iso, k = 0.0, 0

    if k > 0:
        final_decomp = svd_thin(merged)
        final_spectrum = spectrum_stats(final_decomp.s)
        alignment = _principal_alignment(pre_decomp.u, final_decomp.u)
    else:
        final_spectrum = pre_spectrum
        alignment = [1.0] * min(5, min(base.shape))

    diags = LayerDiagnostics(
        gamma=stats.gamma,
        branch=branch,
        trace_avg=stats.trace_avg,
        pre_spectrum=pre_spectrum,
        final_spectrum=final_spectrum,
        refinement_rank=k,
        sigma_iso=sigma_iso,
        principal_alignment=alignment,
        fallback=fallback,
    )
    return LayerMergeOutput(merged=merged, diagnostics=diags)


def _principal_alignment(u_pre: np.ndarray, u_final: np.ndarray, count: int = 5) -> list[float]:
    # Absolute cosines: SVD sign choices are arbitrary, direction is what matters.
    n = min(count, u_pre.shape[1], u_final.shape[1])
    return [abs(float(u_pre[:, i] @ u_final[:, i])) for i in range(n)]


def _merge_matrix_layer(base_arr, expert_arrs, cfg: MergeConfig):
    if cfg.method == "ace":
        return merge_layer(base_arr, expert_arrs, cfg)
    if cfg.method == "average":
        merged = baselines.weight_average(expert_arrs)
    elif cfg.method == "task_arith":
        merged = baselines.task_arithmetic(base_arr, expert_arrs, cfg.task_arith_lambda)
    elif cfg.method == "cov_proxy_tv":
        merged = baselines.cov_proxy_merge(
            base_arr, expert_arrs, baselines.ProxyKind("tv_outer"), cfg.eps
        )
    else:
        merged = baselines.cov_proxy_merge(
            base_arr, expert_arrs, baselines.ProxyKind("tv_outer_norm"), cfg.eps
        )
    diags = LayerDiagnostics(final_spectrum=spectrum_stats(svd_thin(merged).s))
    return LayerMergeOutput(merged=merged, diagnostics=diags)


def _layer_selected(name: str, arr: np.ndarray, cfg: MergeConfig) -> bool:
    if arr.ndim != 2 or min(arr.shape) < 1:
        return False
    if not cfg.layer_include:
        return True
    return any(fnmatch.fnmatchcase(name, pattern) for pattern in cfg.layer_include)


def merge_model(
    base: Checkpoint,
    experts: list[Checkpoint],
    cfg: MergeConfig,
    threads: int = 1,
) -> tuple[Checkpoint, dict]:
    """Merge whole checkpoints layer by layer.

    Rank-2 tensors matching ``cfg.layer_include`` (all of them when the
    filter is empty) go through the selected method; every other tensor is
    merged by elementwise weight averaging.  Outputs are cast back to the
    base tensor's dtype.  Layers may be processed by ``threads`` workers;
    results are always assembled in lexicographic layer order, and within
    a layer all task reductions are sequential, so output bytes do not
    depend on the worker count.
    """
    if not experts:
        raise ValueError("empty expert list")
    for i, expert in enumerate(experts):
        diffs = shape_diff(base, expert)
        if diffs:
            raise ValueError(f"architecture mismatch for expert {i}: {diffs}")
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")

    names = base.names()
    merge_names = [n for n in names if _layer_selected(n, base[n], cfg)]
    merge_set = set(merge_names)
    average_names = [n for n in names if n not in merge_set]

    def run_layer(name: str) -> LayerMergeOutput:
        base_arr = base[name].astype(np.float64)
        expert_arrs = [e[name].astype(np.float64) for e in experts]
        return _merge_matrix_layer(base_arr, expert_arrs, cfg)

    outputs: dict[str, LayerMergeOutput] = {}
    if threads > 1 and len(merge_names) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for name, result in zip(merge_names, pool.map(run_layer, merge_names)):
                outputs[name] = result
    else:
        for name in merge_names:
            outputs[name] = run_layer(name)

    merged_ckpt = Checkpoint(metadata=base.metadata)
    report_layers: dict[str, dict] = {}
    for name in names:
        dtype = base[name].dtype
        if name in outputs:
            merged_ckpt.add(name, outputs[name].merged.astype(dtype))
            report_layers[name] = outputs[name].diagnostics.to_json()
        else:
            total = np.zeros(base[name].shape, dtype=np.float64)
            for expert in experts:
                total += expert[name].astype(np.float64)
            merged_ckpt.add(name, (total / len(experts)).astype(dtype))

    report = {
        "config": cfg.to_json(),
        "layers": report_layers,
        "averaged": average_names,
    }
    return merged_ckpt, report


def merging_loss(w_bar, experts: list[np.ndarray], sigmas: list[np.ndarray]) -> float:
    """Quadratic merging objective ``sum_t tr[(W - W_t) Sigma_t (W - W_t)^T]``."""
    w_bar = as_matrix(w_bar, "w_bar")
    if len(experts) != len(sigmas):
        raise ValueError("experts and covariances must align")
    total = 0.0
    for expert, sigma in zip(experts, sigmas):
        diff = w_bar - as_matrix(expert, "expert")
        total += float(np.einsum("ij,jk,ik->", diff, as_matrix(sigma, "sigma"), diff))
    return total
