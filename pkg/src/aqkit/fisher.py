"""Empirical diagonal Fisher from per-sample gradients and the action-mixed blend.

Per-sample gradients are consumed as data. The mixed gradient of sample d is
``a * g_act + (1 - a) * g_cls`` and the diagonal Fisher is its mean square.
Sums over samples are taken over values sorted along the sample axis so that
results do not depend on sample order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Sequence

import numpy as np

from .quantcore import to_blocks


class MissingGradientError(ValueError):
    pass


@dataclass
class GradientSample:
    sample_id: int
    g_act: Mapping[str, np.ndarray]
    g_cls: Optional[Mapping[str, np.ndarray]] = None


@dataclass
class FisherDiagonal:
    values: Dict[str, np.ndarray]
    amf_alpha: float
    n_samples: int

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]


def default_amf_alpha(has_categorical_head: bool) -> float:
    return 0.5 if has_categorical_head else 1.0


def _sorted_mean(stack: np.ndarray) -> np.ndarray:
    return np.sort(stack, axis=0).sum(axis=0) / stack.shape[0]


def _stack(samples: Sequence[GradientSample], name: str, which: str) -> np.ndarray:
    rows = []
    for s in samples:
        src = s.g_act if which == "act" else s.g_cls
        if src is None or name not in src:
            raise MissingGradientError(
                f"sample {s.sample_id} has no {which} gradient for {name!r}")
        rows.append(np.asarray(src[name], dtype=np.float64).ravel())
    sizes = {r.size for r in rows}
    if len(sizes) != 1:
        raise ValueError(f"gradient length mismatch for {name!r}: {sorted(sizes)}")
    out = np.stack(rows)
    if not np.all(np.isfinite(out)):
        raise ValueError(f"non-finite gradient for {name!r}")
    return out


def _names(samples: Sequence[GradientSample]):
    if not samples:
        raise ValueError("need at least one gradient sample")
    return list(samples[0].g_act)


def fisher_diagonal(samples: Sequence[GradientSample], amf_alpha: float = 1.0) -> FisherDiagonal:
    if not 0.0 <= amf_alpha <= 1.0:
        raise ValueError(f"amf_alpha must lie in [0, 1], got {amf_alpha}")
    out = {}
    for name in _names(samples):
        g = _stack(samples, name, "act")
        if amf_alpha < 1.0:
            c = _stack(samples, name, "cls")
            if c.shape != g.shape:
                raise ValueError(f"act/cls gradient length mismatch for {name!r}")
            g = amf_alpha * g + (1.0 - amf_alpha) * c
        out[name] = _sorted_mean(g * g)
    return FisherDiagonal(out, amf_alpha, len(samples))


@dataclass
class Decomposition:
    f_act: Dict[str, np.ndarray]
    f_cls: Dict[str, np.ndarray]
    cross: Dict[str, np.ndarray]
    reconstructed: Dict[str, np.ndarray]
    amf_alpha: float


def decompose(samples: Sequence[GradientSample], amf_alpha: float) -> Decomposition:
    """Split the mixed Fisher into per-pathway Fishers plus the cross covariance."""
    a = float(amf_alpha)
    f_act, f_cls, cross, recon = {}, {}, {}, {}
    for name in _names(samples):
        g = _stack(samples, name, "act")
        c = _stack(samples, name, "cls")
        f_act[name] = _sorted_mean(g * g)
        f_cls[name] = _sorted_mean(c * c)
        cross[name] = _sorted_mean(g * c)
        recon[name] = a * a * f_act[name] + (1 - a) ** 2 * f_cls[name] + 2 * a * (1 - a) * cross[name]
    return Decomposition(f_act, f_cls, cross, recon, a)


def cross_prefactor(amf_alpha):
    return 2.0 * np.asarray(amf_alpha) * (1.0 - np.asarray(amf_alpha))


def block_magnitude(blocks: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """sqrt(sigma_b^2 + w_i^2) per element; sigma_b^2 over real (unpadded) elements."""
    n = np.maximum(mask.sum(axis=1), 1)
    sigma2 = (np.where(mask, blocks, 0.0) ** 2).sum(axis=1) / n
    return np.where(mask, np.sqrt(sigma2[:, None] + blocks ** 2), 0.0)


def importance_weights(fisher: np.ndarray, weights, block_size: int) -> np.ndarray:
    """Per-element importance F_ii * sqrt(sigma_b^2 + w_i^2), shape (n_blocks, B).

    Padding elements get zero importance.
    """
    blocks, mask, pad = to_blocks(np.asarray(weights, dtype=np.float64), block_size)
    f = np.asarray(fisher, dtype=np.float64).ravel()
    if f.size != mask.sum():
        raise ValueError(f"Fisher has {f.size} entries, weights have {int(mask.sum())}")
    f = np.concatenate([f, np.zeros(pad)]).reshape(blocks.shape)
    return f * block_magnitude(blocks, mask)


@dataclass
class HessianReport:
    indices: np.ndarray
    fisher: np.ndarray
    hessian: np.ndarray
    grad_inf_norm: float
    conclusive: bool
    correlation: float = float("nan")
    rel_errors: np.ndarray = field(default_factory=lambda: np.zeros(0))


def hessian_check(loss: Callable[[np.ndarray], float],
                  per_sample_grads: Callable[[np.ndarray], np.ndarray],
                  theta, indices, grad_tol: float = 1e-3) -> HessianReport:
    """Compare the empirical Fisher diagonal with finite-difference curvature.

    ``loss(theta)`` is the sample-averaged loss; ``per_sample_grads(theta)``
    returns a (n_samples, P) array. Second derivatives use central differences
    with step 1e-3 * (1 + |theta_i|).
    """
    theta = np.asarray(theta, dtype=np.float64)
    idx = np.asarray(indices, dtype=np.int64)
    g = np.asarray(per_sample_grads(theta), dtype=np.float64)
    grad_norm = float(np.abs(g.mean(axis=0)).max())
    fisher = (g[:, idx] ** 2).mean(axis=0)
    f0 = loss(theta)
    hess = np.empty(idx.size)
    for k, i in enumerate(idx):
        h = 1e-3 * (1.0 + abs(theta[i]))
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        hess[k] = (loss(tp) - 2.0 * f0 + loss(tm)) / (h * h)
    rep = HessianReport(idx, fisher, hess, grad_norm, grad_norm <= grad_tol)
    rep.rel_errors = np.abs(fisher - hess) / np.maximum(np.abs(hess), 1e-12)
    if idx.size > 1 and np.std(fisher) > 0 and np.std(hess) > 0:
        rep.correlation = float(np.corrcoef(fisher, hess)[0, 1])
    return rep
