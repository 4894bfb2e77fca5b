"""Data-free model merging with adaptive covariance estimation.

Merges fine-tuned experts into one checkpoint using only their weights:
per-task covariances estimated from weight displacements, a heterogeneity
gate on regularization, a collective structural prior, a closed-form
solve, and optional spectral refinement.  Ships baselines expressed
through the same closed form, a bit-exact tensor container, and a
synthetic harness that verifies the underlying mathematics.
"""

from .baselines import ProxyKind, cov_proxy_merge, task_arithmetic, weight_average
from .container import (
    Checkpoint,
    ContainerFormatError,
    read_container,
    shape_diff,
    write_container,
)
from .covariance import (
    CovarianceEstimate,
    DegenerateCovarianceError,
    DegenerateExpertError,
    HeterogeneityStats,
    TaskVector,
    UndefinedGammaError,
    empirical_covariance,
    heterogeneity,
    regularize,
    task_vector,
    trace_normalize,
)
from .harness import (
    SyntheticDataset,
    SyntheticTaskSpec,
    CovarianceTrackingReport,
    brute_force_merge,
    delta_w_statistics,
    generate_task,
    limiting_case_suite,
    simulate_finetune,
    verify_covariance_tracking,
)
from .linalg import (
    AsymmetricMatrixError,
    NotPositiveDefiniteError,
    SpectrumStats,
    SvdResult,
    frobenius_sq,
    solve_right,
    spectrum_stats,
    svd_thin,
    trace,
)
from .merge import (
    LayerDiagnostics,
    LayerMergeOutput,
    MergeConfig,
    collective_prior,
    merge_layer,
    merge_model,
    merging_loss,
    preliminary_solution,
    spectral_refinement,
    structural_residual,
)

__version__ = "0.1.0"
