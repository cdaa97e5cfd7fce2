"""Empirical HSIC with RBF kernels.

    HSIC(A, B) = (K - 1)^-2 * tr(K_A C K_B C),   C = I - 11^T / K

with ``k(a, a') = exp(-gamma * ||a - a'||^2)``. Bandwidths default to the
median heuristic gamma = 1 / (2 m^2), m the median nonzero pairwise distance.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.spatial.distance import pdist, squareform

MEDIAN = "median-heuristic"


class DegenerateSamplesError(ValueError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "rbf"
    bandwidth: Union[float, str] = MEDIAN

    def __post_init__(self):
        if self.kind != "rbf":
            raise ValueError(f"only rbf kernels are supported, got {self.kind!r}")
        if self.bandwidth != MEDIAN and not float(self.bandwidth) > 0:
            raise ValueError(f"bandwidth must be positive or {MEDIAN!r}")


def as_samples(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError(f"sample matrix must be 2-D, got shape {a.shape}")
    if a.shape[0] < 2:
        raise ValueError(f"need at least 2 samples, got {a.shape[0]}")
    if not np.all(np.isfinite(a)):
        raise ValueError("sample matrix has non-finite entries")
    return a


def median_bandwidth(a) -> float:
    a = as_samples(a)
    d = pdist(a)
    d = d[d > 0]
    if d.size == 0:
        raise DegenerateSamplesError("all pairwise distances are zero")
    m = float(np.median(d))
    return 1.0 / (2.0 * m * m)


def resolve_bandwidth(a: np.ndarray, spec: KernelSpec) -> float:
    if spec.bandwidth != MEDIAN:
        return float(spec.bandwidth)
    try:
        return median_bandwidth(a)
    except DegenerateSamplesError:
        warnings.warn("median heuristic undefined for identical samples; using gamma=1",
                      RuntimeWarning, stacklevel=3)
        return 1.0


def kernel_matrix(a, spec: KernelSpec = KernelSpec()) -> np.ndarray:
    a = as_samples(a)
    gamma = resolve_bandwidth(a, spec)
    return np.exp(-gamma * squareform(pdist(a, "sqeuclidean")))


def center(k: np.ndarray) -> np.ndarray:
    """C K C without forming C."""
    return k - k.mean(axis=0, keepdims=True) - k.mean(axis=1, keepdims=True) + k.mean()


def hsic_from_kernels(ka: np.ndarray, kb: np.ndarray) -> float:
    n = ka.shape[0]
    if kb.shape[0] != n:
        raise ValueError(f"sample count mismatch: {n} vs {kb.shape[0]}")
    # tr(Ka C Kb C) = <C Ka C, Kb>_F since C is idempotent and symmetric.
    v = float(np.sum(center(ka) * kb)) / (n - 1) ** 2
    return max(v, 0.0)


def hsic_estimate(a, b, spec_a: KernelSpec = KernelSpec(),
                  spec_b: KernelSpec = KernelSpec()) -> float:
    a, b = as_samples(a), as_samples(b)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"sample count mismatch: {a.shape[0]} vs {b.shape[0]}")
    return hsic_from_kernels(kernel_matrix(a, spec_a), kernel_matrix(b, spec_b))
