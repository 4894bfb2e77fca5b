"""Reference merging methods expressed through the closed-form template.

Each baseline is the weighted least-squares merge with a particular
covariance proxy plugged in: the identity (weight averaging), or Gram
matrices of the task vectors, optionally norm-weighted.  Proxies use the
uncentered Gram exactly as written, distinct from the centered estimator
in :mod:`acemerge.covariance`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .covariance import DegenerateExpertError
from .linalg import as_matrix, frobenius_sq, solve_right

PROXY_VARIANTS = ("isotropic", "tv_outer", "tv_outer_norm")


@dataclass(frozen=True)
class ProxyKind:
    """Covariance proxy selector: isotropic(k), raw or norm-weighted Gram."""

    variant: str
    k: float = 1.0

    def __post_init__(self):
        if self.variant not in PROXY_VARIANTS:
            raise ValueError(f"unknown proxy variant {self.variant!r}")
        if self.variant == "isotropic" and self.k <= 0.0:
            raise ValueError(f"isotropic proxy needs k > 0, got {self.k}")


def weight_average(experts: list[np.ndarray]) -> np.ndarray:
    """Elementwise mean of the expert matrices."""
    if not experts:
        raise ValueError("empty expert list")
    experts = [as_matrix(w, f"experts[{i}]") for i, w in enumerate(experts)]
    total = experts[0].copy()
    for w in experts[1:]:
        if w.shape != experts[0].shape:
            raise ValueError("experts must share a shape")
        total += w
    return total / len(experts)


def task_arithmetic(base, experts: list[np.ndarray], lam: float = 1.0) -> np.ndarray:
    """Base plus the scaled sum of task vectors."""
    base = as_matrix(base, "base")
    merged = base.copy()
    for i, expert in enumerate(experts):
        expert = as_matrix(expert, f"experts[{i}]")
        if expert.shape != base.shape:
            raise ValueError("experts must share the base shape")
        merged += lam * (expert - base)
    return merged


def _proxy_sigma(proxy: ProxyKind, delta: np.ndarray, d_in: int) -> np.ndarray:
    if proxy.variant == "isotropic":
        return proxy.k * np.eye(d_in)
    gram = delta.T @ delta
    gram = (gram + gram.T) / 2.0
    if proxy.variant == "tv_outer":
        return gram
    energy = frobenius_sq(delta)
    if energy <= 0.0:
        raise DegenerateExpertError(
            "degenerate expert: zero displacement cannot be norm-weighted"
        )
    return gram / energy


def cov_proxy_merge(base, experts: list[np.ndarray], proxy: ProxyKind, eps: float) -> np.ndarray:
    """Closed-form merge with the selected proxy for every task covariance.

    Each proxy gets an ``eps * I`` ridge before entering both the numerator
    and the denominator, so uniform constants cancel exactly (isotropic
    proxies reproduce plain averaging for any k).  No scaling, aggregate
    prior, or refinement is applied.
    """
    if eps <= 0.0:
        raise ValueError(f"eps must be positive, got {eps}")
    if not experts:
        raise ValueError("empty expert list")
    base = as_matrix(base, "base")
    d_out, d_in = base.shape
    numerator = np.zeros((d_out, d_in))
    denominator = np.zeros((d_in, d_in))
    ridge = eps * np.eye(d_in)
    for i, expert in enumerate(experts):
        expert = as_matrix(expert, f"experts[{i}]")
        if expert.shape != base.shape:
            raise ValueError("experts must share the base shape")
        sigma = _proxy_sigma(proxy, expert - base, d_in) + ridge
        numerator += expert @ sigma
        denominator += sigma
    return solve_right(numerator, denominator)
