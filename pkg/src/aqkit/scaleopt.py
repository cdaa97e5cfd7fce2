"""Importance-weighted per-block scale optimization.

For one block the objective is ``Phi(s, q) = sum_i w_i_imp * (w_i - s * q_i)^2``.
With ``s`` fixed the best codes are plain nearest-entry rounding of ``w / s``
(the importance drops out); with codes fixed the best scale is the weighted
least-squares solution ``sum(imp * w * q) / sum(imp * q^2)``. Alternating the
two never increases ``Phi``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .fisher import block_magnitude
from .quantcore import (QuantType, QuantizedTensor, finalize, nearest_codes, rtn_params,
                        round_half_away, to_blocks)

IMPORTANCE_MODES = ("uniform", "magnitude", "fisher-magnitude")


@dataclass(frozen=True)
class ScaleOptConfig:
    max_iters: int = 20
    rel_tol: float = 1e-8
    importance_mode: str = "fisher-magnitude"

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be > 0")
        if self.importance_mode not in IMPORTANCE_MODES:
            raise ValueError(f"importance_mode must be one of {IMPORTANCE_MODES}")


@dataclass
class BlockResult:
    scale: float
    codes: np.ndarray
    trace: List[float]
    zero: float = 0.0
    converged: bool = False
    iterations: int = 0
    flags: set = field(default_factory=set)

    def __iter__(self):
        return iter((self.scale, self.codes, self.trace))


def assign_codes(weights, scale: float, qtype: QuantType, zero: float = 0.0) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if scale == 0:
        return np.zeros(w.shape, dtype=np.int64)
    return nearest_codes(w / scale + zero, qtype)


def optimal_scale(weights, codes, importance, previous: float = 0.0) -> float:
    """Closed-form weighted least-squares scale for fixed codes.

    Returns ``previous`` unchanged when ``sum(imp * q^2)`` is zero.
    """
    w = np.asarray(weights, dtype=np.float64)
    q = np.asarray(codes, dtype=np.float64)
    om = np.asarray(importance, dtype=np.float64)
    den = float(np.sum(om * q * q))
    if den <= 0:
        return previous
    return float(np.sum(om * w * q)) / den


def objective(weights, importance, scale, codes, zero=0.0) -> float:
    r = np.asarray(weights) - scale * (np.asarray(codes) - zero)
    return float(np.sum(np.asarray(importance) * r * r))


def _optimal_zero(w, om, s, q, qtype: QuantType) -> float:
    tot = om.sum()
    if tot <= 0 or s == 0:
        return None
    z = float(np.sum(om * (q - w / s))) / tot
    return float(np.clip(round_half_away(np.array(z)), 0, qtype.levels - 1))


def optimize_block(weights, importance, qtype: QuantType, init_scale: Optional[float] = None,
                   cfg: ScaleOptConfig = ScaleOptConfig(), init_zero: Optional[float] = None
                   ) -> BlockResult:
    w = np.asarray(weights, dtype=np.float64)
    om = np.asarray(importance, dtype=np.float64)
    if not np.all(np.isfinite(w)) or not np.all(np.isfinite(om)):
        raise ValueError("block weights and importance must be finite")
    if np.any(om < 0):
        raise ValueError("importance must be nonnegative")
    if not np.any(w):
        return BlockResult(0.0, np.zeros(w.shape, dtype=np.int64), [0.0], 0.0, True, 0,
                           {"zero-block"})
    if init_scale is None:
        s0, z0 = rtn_params(w[None, :], qtype)
        s, z = float(s0[0]), float(z0[0])
    else:
        s = float(init_scale)
        z = 0.0 if qtype.symmetric else float(init_zero or 0.0)
    q = assign_codes(w, s, qtype, z)
    phi = objective(w, om, s, q, z)
    res = BlockResult(s, q, [phi], z)
    for it in range(1, cfg.max_iters + 1):
        u = q - z
        if float(np.sum(om * u * u)) <= 0:
            res.flags.add("degenerate-scale")
            res.converged = True
            break
        s_new = optimal_scale(w, u, om, s)
        z_new = z
        if not qtype.symmetric:
            zc = _optimal_zero(w, om, s_new, q, qtype)
            if zc is not None and objective(w, om, s_new, q, zc) <= objective(w, om, s_new, q, z):
                z_new = zc
        q_new = assign_codes(w, s_new, qtype, z_new)
        phi_new = objective(w, om, s_new, q_new, z_new)
        res.iterations = it
        if phi_new > phi:
            # round-off can make an exact-optimum step look worse; keep the last iterate
            res.converged = True
            break
        rel = (phi - phi_new) / phi if phi > 0 else 0.0
        s, z, q, phi = s_new, z_new, q_new, phi_new
        res.trace.append(phi)
        if phi == 0 or rel < cfg.rel_tol:
            res.converged = True
            break
    res.scale, res.zero, res.codes = s, z, q
    return res


def tensor_importance(weights, fisher, qtype: QuantType, mode: str):
    """Per-element importance (n_blocks, B) for one tensor plus fallback flags."""
    blocks, mask, pad = to_blocks(np.asarray(weights, dtype=np.float64), qtype.block_size)
    flags = set()
    if mode == "uniform":
        return mask.astype(np.float64), flags
    mag = block_magnitude(blocks, mask)
    if mode == "magnitude":
        return mag, flags
    if fisher is None:
        raise ValueError("fisher-magnitude importance needs a Fisher diagonal")
    f = np.asarray(fisher, dtype=np.float64).ravel()
    if f.size != blocks.size - pad:
        raise ValueError(f"Fisher has {f.size} entries, tensor has {blocks.size - pad}")
    f = np.concatenate([f, np.zeros(pad)]).reshape(blocks.shape)
    om = f * mag
    if not np.any(om):
        flags.add("zero-fisher")
        return mag, flags
    dead = (om.sum(axis=1) == 0) & (mag.sum(axis=1) > 0)
    if dead.any():
        flags.add("zero-fisher-blocks")
        om[dead] = mag[dead]
    return om, flags


def _weighted_error(blocks, om, qt: QuantizedTensor) -> float:
    deq = qt.scales[:, None] * (qt.codes - qt.zeros[:, None])
    return float(np.sum(om * (blocks - deq) ** 2))


def optimize_tensor(weights, fisher, qtype: QuantType, cfg: ScaleOptConfig = ScaleOptConfig(),
                    name: str = "") -> QuantizedTensor:
    """Optimize every block's scale independently and emit a storage-ready tensor.

    Falls back to the RTN tensor if storage rounding of the optimized scales
    left it with a larger weighted error than RTN.
    """
    w = np.asarray(weights, dtype=np.float64)
    blocks, mask, pad = to_blocks(w, qtype.block_size)
    om, flags = tensor_importance(w, fisher, qtype, cfg.importance_mode)
    s0, z0 = rtn_params(blocks, qtype)
    scales = np.empty(len(blocks))
    zeros = np.empty(len(blocks))
    for b in range(len(blocks)):
        r = optimize_block(blocks[b], om[b], qtype, s0[b], cfg, init_zero=z0[b])
        scales[b], zeros[b] = r.scale, r.zero
    qt = finalize(name, w.shape, qtype, blocks, scales, zeros, pad)
    rtn = finalize(name, w.shape, qtype, blocks, s0, z0, pad)
    if _weighted_error(blocks, om, rtn) < _weighted_error(blocks, om, qt):
        flags.add("rtn-fallback")
        qt = rtn
    qt.flags.update({"importance_mode": cfg.importance_mode, "notes": sorted(flags)})
    return qt
