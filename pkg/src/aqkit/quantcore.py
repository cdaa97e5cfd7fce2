"""Block quantization formats, round-to-nearest quantization and dequantization.

A weight matrix is flattened in row-major order, zero-padded to a multiple of the
block size ``B`` and cut into blocks. Every block carries a scale ``s_b`` and an
integer zero point ``z_b``; element ``i`` dequantizes to ``s_b * (q_i - z_b)``.

Scales are always held in their storage precision (float32, or 8-bit codes
relative to a super-block pair when super-blocks are enabled) so that a
``QuantizedTensor`` is exactly what the pack file stores.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

BIT_WIDTHS = (2, 3, 4, 5, 6, 8)
SYMMETRIC = "symmetric"
ASYMMETRIC = "asymmetric"
CODEBOOKS = (SYMMETRIC, ASYMMETRIC)

# Module tags in layer order; ties in the allocator are broken by this order.
MODULE_ORDER = ("Q", "K", "V", "O", "up", "down", "gate")

SCALE_CODE_LEVELS = 255


class QuantFormatError(ValueError):
    """Invalid quantization type or input weights."""


class StructuralCorruptionError(ValueError):
    """A quantized tensor violates its own format (e.g. a code outside the codebook)."""


@dataclass(frozen=True)
class QuantType:
    bit_width: int
    codebook: str = SYMMETRIC
    block_size: int = 32
    superblock_size: int = 8

    def __post_init__(self):
        if self.bit_width not in BIT_WIDTHS:
            raise QuantFormatError(
                f"bit_width {self.bit_width} not in menu {BIT_WIDTHS}")
        if self.codebook not in CODEBOOKS:
            raise QuantFormatError(f"unknown codebook {self.codebook!r}")
        if self.block_size < 2:
            raise QuantFormatError(f"block_size must be >= 2, got {self.block_size}")
        if self.superblock_size < 0:
            raise QuantFormatError(
                f"superblock_size must be >= 0, got {self.superblock_size}")

    @property
    def symmetric(self) -> bool:
        return self.codebook == SYMMETRIC

    @property
    def qmin(self) -> int:
        return -(1 << (self.bit_width - 1)) if self.symmetric else 0

    @property
    def qmax(self) -> int:
        return (1 << (self.bit_width - 1)) - 1 if self.symmetric else (1 << self.bit_width) - 1

    @property
    def levels(self) -> int:
        return 1 << self.bit_width

    @property
    def error_factor(self) -> float:
        """Predicted per-element squared error factor 2^(-2b)."""
        return 2.0 ** (-2 * self.bit_width)

    def codebook_values(self) -> np.ndarray:
        return np.arange(self.qmin, self.qmax + 1)

    @property
    def tag(self) -> str:
        return f"{'s' if self.symmetric else 'a'}{self.bit_width}b{self.block_size}s{self.superblock_size}"

    def effective_bpw(self) -> float:
        """Bits per weight including per-block scale/zero storage."""
        b, B, S = self.bit_width, self.block_size, self.superblock_size
        if S == 0:
            scale_bits = 32.0 / B
        else:
            scale_bits = 8.0 / B + 64.0 / (B * S)
        zero_bits = 0.0 if self.symmetric else 8.0 / B
        return b + scale_bits + zero_bits

    def with_bits(self, bit_width: int) -> "QuantType":
        return QuantType(bit_width, self.codebook, self.block_size, self.superblock_size)


@dataclass(frozen=True)
class Block:
    weights: np.ndarray
    scale: float
    zero: float
    codes: np.ndarray

    def dequantize(self) -> np.ndarray:
        return self.scale * (self.codes - self.zero)


@dataclass
class QuantizedTensor:
    name: str
    shape: tuple
    qtype: QuantType
    codes: np.ndarray          # (n_blocks, B) integer code values
    scales: np.ndarray         # (n_blocks,) float64, exactly representable in storage
    zeros: np.ndarray          # (n_blocks,) integer zero points, all 0 when symmetric
    pad_count: int = 0
    # super-block parameters, only when qtype.superblock_size > 0
    sb_scale: Optional[np.ndarray] = None
    sb_zero: Optional[np.ndarray] = None
    scale_codes: Optional[np.ndarray] = None
    flags: dict = field(default_factory=dict, compare=False)

    @property
    def n_blocks(self) -> int:
        return int(self.codes.shape[0])

    @property
    def numel(self) -> int:
        return int(self.shape[0]) * int(self.shape[1])

    @property
    def blocks(self) -> Iterator[Block]:
        """Block records in row-major element order (weights are the dequantized values)."""
        deq = self._dequantize_blocks()
        for b in range(self.n_blocks):
            yield Block(deq[b], float(self.scales[b]), float(self.zeros[b]), self.codes[b])

    def _dequantize_blocks(self) -> np.ndarray:
        return self.scales[:, None] * (self.codes - self.zeros[:, None])

    def same_as(self, other: "QuantizedTensor") -> bool:
        """Bit-level equality of everything a pack file stores."""
        if (self.name, tuple(self.shape), self.qtype, self.pad_count) != (
                other.name, tuple(other.shape), other.qtype, other.pad_count):
            return False
        pairs = [(self.codes, other.codes), (self.scales, other.scales),
                 (self.zeros, other.zeros)]
        if self.qtype.superblock_size:
            pairs += [(self.sb_scale, other.sb_scale), (self.sb_zero, other.sb_zero),
                      (self.scale_codes, other.scale_codes)]
        return all(np.array_equal(a, b) for a, b in pairs)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def nearest_codes(scaled: np.ndarray, qtype: QuantType) -> np.ndarray:
    """Nearest codebook entry to each already-rescaled value."""
    with np.errstate(invalid="ignore"):
        q = np.clip(round_half_away(scaled), qtype.qmin, qtype.qmax)
    return q.astype(np.int64)


def zero_code(qtype: QuantType) -> int:
    return 0


def check_finite(weights: np.ndarray) -> None:
    bad = ~np.isfinite(weights)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise QuantFormatError(f"non-finite weight at index {idx}: {weights[idx]!r}")


def to_blocks(weights: np.ndarray, block_size: int):
    """Flatten row-major, zero-pad to a block multiple. Returns (blocks, mask, pad_count)."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2:
        raise QuantFormatError(f"expected a 2-D weight matrix, got shape {w.shape}")
    check_finite(w)
    flat = w.ravel()
    pad = (-flat.size) % block_size
    mask = np.ones(flat.size + pad, dtype=bool)
    if pad:
        flat = np.concatenate([flat, np.zeros(pad)])
        mask[-pad:] = False
    return flat.reshape(-1, block_size), mask.reshape(-1, block_size), pad


def from_blocks(blocks: np.ndarray, shape, pad_count: int) -> np.ndarray:
    flat = blocks.ravel()
    if pad_count:
        flat = flat[:-pad_count]
    return flat.reshape(shape)


def rtn_params(blocks: np.ndarray, qtype: QuantType):
    """Absmax scales (and zero points) per block before storage rounding.

    Symmetric: the signed largest-magnitude element maps exactly onto ``qmin``,
    so |s| = max|w| / 2^(b-1) and the sign of ``s`` follows that element.
    Asymmetric: a constant block c gets s = |c| with one code; otherwise the range is widened to contain 0, z = round(-min / s0) with
    s0 = (max - min) / (2^b - 1), then s is the largest step that still sends
    both range ends to (or past) the end codes, so they land exactly on them.
    """
    n = blocks.shape[0]
    if qtype.symmetric:
        idx = np.argmax(np.abs(blocks), axis=1)
        wm = blocks[np.arange(n), idx]
        return wm / qtype.qmin, np.zeros(n)
    top = qtype.levels - 1
    lo = np.minimum(blocks.min(axis=1), 0.0)
    hi = np.maximum(blocks.max(axis=1), 0.0)
    s0 = (hi - lo) / top
    s = np.zeros(n)
    z = np.zeros(n)
    for b in np.flatnonzero(s0 > 0):
        if blocks[b].min() == blocks[b].max():
            # constant block: one code reproduces it exactly, s = |c|
            c = blocks[b, 0]
            s[b], z[b] = abs(c), (0.0 if c > 0 else 1.0)
            continue
        zb = float(np.clip(round_half_away(np.array(-lo[b] / s0[b])), 0, top))
        cands = []
        if zb < top:
            cands.append(hi[b] / (top - zb))
        if zb > 0:
            cands.append(-lo[b] / zb)
        s[b], z[b] = min(cands), zb
    return s, z


def _f32_toward_zero(x: np.ndarray) -> np.ndarray:
    """float32 rounding that never increases magnitude."""
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore"):
        f = x.astype(np.float32)
    if not np.all(np.isfinite(f)):
        raise QuantFormatError("block scale overflows float32 storage")
    up = np.abs(f.astype(np.float64)) > np.abs(x)
    f[up] = np.nextafter(f[up], np.float32(0))
    return f


def compress_scales(raw: np.ndarray, superblock_size: int):
    """Round scales to storage precision, never increasing their magnitude.

    S = 0: plain float32. S > 0: per super-block step d = max|s| / 127 (float32)
    and 8-bit codes c with s = d * (c - 128), c - 128 = trunc(s / d).
    Shrinking the scale keeps each block's extreme element on the end code,
    which makes quantize(dequantize(quantize(W))) a fixed point.
    Returns ``(scales, sb_scale, sb_zero, scale_codes)``; the last three are
    None when super-blocks are disabled.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if superblock_size == 0:
        return _f32_toward_zero(raw).astype(np.float64), None, None, None
    n = raw.size
    n_sb = -(-n // superblock_size)
    half = SCALE_CODE_LEVELS // 2          # 127
    sb_scale = np.zeros(n_sb, dtype=np.float32)
    sb_zero = np.zeros(n_sb, dtype=np.float32)
    codes = np.full(n, half + 1, dtype=np.uint8)
    for k in range(n_sb):
        seg = raw[k * superblock_size:(k + 1) * superblock_size]
        d = _f32_toward_zero(np.array([np.abs(seg).max() / half]))[0]
        sb_zero[k] = half + 1
        if d == 0:
            continue
        c = np.clip(np.trunc(seg / float(d)), -half, half)
        sb_scale[k] = d
        codes[k * superblock_size:(k + 1) * superblock_size] = (c + half + 1).astype(np.uint8)
    return expand_scales(sb_scale, sb_zero, codes, superblock_size), sb_scale, sb_zero, codes


def expand_scales(sb_scale, sb_zero, scale_codes, superblock_size: int) -> np.ndarray:
    k = np.arange(scale_codes.size) // superblock_size
    return (sb_scale[k].astype(np.float64)
            * (scale_codes.astype(np.float64) - sb_zero[k].astype(np.float64)))


def encode_blocks(blocks: np.ndarray, scales: np.ndarray, zeros: np.ndarray,
                  qtype: QuantType) -> np.ndarray:
    """Nearest codes for every block given final scales and zero points."""
    codes = np.full(blocks.shape, zero_code(qtype), dtype=np.int64)
    nz = scales != 0
    if nz.any():
        codes[nz] = nearest_codes(blocks[nz] / scales[nz, None] + zeros[nz, None], qtype)
    return codes


def finalize(name: str, shape, qtype: QuantType, blocks: np.ndarray, raw_scales,
             raw_zeros, pad_count: int) -> QuantizedTensor:
    """Round scales to storage precision, then assign codes against the stored scales."""
    scales, sb_scale, sb_zero, scale_codes = compress_scales(raw_scales, qtype.superblock_size)
    zeros = np.asarray(raw_zeros, dtype=np.float64)
    zeros = np.where(scales == 0, 0.0, zeros).astype(np.int64)
    codes = encode_blocks(blocks, scales, zeros, qtype)
    return QuantizedTensor(name, tuple(int(d) for d in shape), qtype, codes, scales, zeros,
                           pad_count, sb_scale, sb_zero, scale_codes)


def quantize_rtn(weights, qtype: QuantType, name: str = "") -> QuantizedTensor:
    """Round-to-nearest block quantization with absmax scales."""
    w = np.asarray(weights, dtype=np.float64)
    blocks, _, pad = to_blocks(w, qtype.block_size)
    s, z = rtn_params(blocks, qtype)
    return finalize(name, w.shape, qtype, blocks, s, z, pad)


def validate(qt: QuantizedTensor) -> None:
    B = qt.qtype.block_size
    rows, cols = qt.shape
    if (rows * cols + qt.pad_count) % B or qt.codes.shape != ((rows * cols + qt.pad_count) // B, B):
        raise StructuralCorruptionError(
            f"{qt.name}: codes shape {qt.codes.shape} inconsistent with shape {qt.shape}, "
            f"pad {qt.pad_count}, block size {B}")
    if qt.codes.size and (qt.codes.min() < qt.qtype.qmin or qt.codes.max() > qt.qtype.qmax):
        raise StructuralCorruptionError(
            f"{qt.name}: code outside codebook [{qt.qtype.qmin}, {qt.qtype.qmax}]")
    if qt.scales.shape != (qt.n_blocks,) or qt.zeros.shape != (qt.n_blocks,):
        raise StructuralCorruptionError(f"{qt.name}: scale/zero arrays do not match block count")
    if not np.all(np.isfinite(qt.scales)):
        raise StructuralCorruptionError(f"{qt.name}: non-finite block scale")


def dequantize(qt: QuantizedTensor) -> np.ndarray:
    validate(qt)
    return from_blocks(qt._dequantize_blocks(), qt.shape, qt.pad_count)


def _importance_blocks(importance, qt: QuantizedTensor) -> np.ndarray:
    om = np.asarray(importance, dtype=np.float64).ravel()
    total = qt.numel + qt.pad_count
    if om.size == qt.numel:
        om = np.concatenate([om, np.zeros(qt.pad_count)])
    elif om.size != total:
        raise QuantFormatError(
            f"importance has {om.size} entries, tensor {qt.name!r} has {qt.numel}")
    om = om.reshape(-1, qt.qtype.block_size).copy()
    if qt.pad_count:
        om.reshape(-1)[-qt.pad_count:] = 0.0
    return om


def quant_mse(original, qt: QuantizedTensor, weights=None) -> float:
    """Importance-weighted mean squared reconstruction error (padding excluded)."""
    w = np.asarray(original, dtype=np.float64)
    if tuple(w.shape) != tuple(qt.shape):
        raise QuantFormatError(f"shape mismatch: {w.shape} vs {qt.shape}")
    err = (w - dequantize(qt)) ** 2
    if weights is None:
        return float(err.mean())
    om = _importance_blocks(weights, qt).ravel()[:qt.numel].reshape(w.shape)
    den = om.sum()
    if den <= 0:
        raise QuantFormatError("importance weights sum to zero")
    return float((om * err).sum() / den)


def quantize_model(weights: dict, types: dict) -> list:
    """RTN-quantize every named matrix with its assigned type."""
    return [quantize_rtn(weights[n], types[n], n) for n in weights]


def parse_bit_menu(menu: Sequence[int], base: QuantType) -> list:
    return [base.with_bits(int(b)) for b in sorted(set(int(b) for b in menu))]
