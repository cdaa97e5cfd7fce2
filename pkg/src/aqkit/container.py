"""AQPK pack files: packed integer codes, block scales and type tags.

All integers little-endian. Byte layout (documented in docs/FORMATS.md):

    header     "AQPK" | version u16 | reserved u16 | n_tensors u32 | n_meta u32
    metadata   n_meta x [ key_len u32 | key | val_len u32 | val ]          (UTF-8)
    directory  n_tensors x [ name_len u32 | name | rows u32 | cols u32 |
                             bits u8 | codebook u8 | block u32 | superblock u32 |
                             pad u32 | offset u64 | length u64 ]
    payload    per tensor, 4-byte aligned:
               codes   ceil(n*B*b / 32) u32 words, LSB-first bit stream of (q - qmin)
               scales  S == 0: n_blocks f32
                       S  > 0: n_sb x (scale f32, zero f32), then n_blocks u8 codes
                               (zero-padded to 4 bytes)
               zeros   asymmetric only: n_blocks u8 (zero-padded to 4 bytes)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .quantcore import (ASYMMETRIC, BIT_WIDTHS, SYMMETRIC, QuantFormatError, QuantType,
                        QuantizedTensor, expand_scales)

MAGIC = b"AQPK"
VERSION = 1
HEADER = struct.Struct("<4sHHII")
DIR_TAIL = struct.Struct("<IIBBIIIQQ")
CODEBOOK_TAGS = {SYMMETRIC: 0, ASYMMETRIC: 1}
MAX_U32 = 2 ** 32 - 1


class PackError(ValueError):
    """Base class for pack read/write failures."""


class BadMagicError(PackError):
    pass


class UnsupportedVersionError(PackError):
    pass


class TruncationError(PackError):
    pass


class OverlapError(PackError):
    pass


class UnknownTypeTagError(PackError):
    pass


class CorruptPackError(PackError):
    pass


class DuplicateNameError(PackError):
    pass


def _pad4(n: int) -> int:
    return (n + 3) & ~3


def section_sizes(shape, qtype: QuantType, pad: int) -> Tuple[int, int, int]:
    """Byte sizes of the codes, scales and zeros sections."""
    numel = int(shape[0]) * int(shape[1]) + pad
    n_blocks = numel // qtype.block_size
    code_bytes = 4 * (-(-numel * qtype.bit_width // 32))
    S = qtype.superblock_size
    if S == 0:
        scale_bytes = 4 * n_blocks
    else:
        scale_bytes = 8 * (-(-n_blocks // S)) + _pad4(n_blocks)
    zero_bytes = 0 if qtype.symmetric else _pad4(n_blocks)
    return code_bytes, scale_bytes, zero_bytes


def payload_length(shape, qtype: QuantType, pad: int) -> int:
    return sum(section_sizes(shape, qtype, pad))


def pack_bits(values: np.ndarray, bits: int) -> bytes:
    """LSB-first bit stream of unsigned ``bits``-wide values in u32 words."""
    v = np.asarray(values, dtype=np.uint64).ravel()
    n_words = -(-v.size * bits // 32)
    stream = np.zeros(n_words * 32, dtype=np.uint8)
    pos = np.arange(v.size)[:, None] * bits + np.arange(bits)[None, :]
    stream[pos.ravel()] = ((v[:, None] >> np.arange(bits, dtype=np.uint64)) & 1).astype(np.uint8).ravel()
    return np.packbits(stream, bitorder="little").tobytes()


def unpack_bits(buf: bytes, count: int, bits: int) -> np.ndarray:
    stream = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")
    pos = np.arange(count)[:, None] * bits + np.arange(bits)[None, :]
    b = stream[pos].astype(np.int64)
    return (b << np.arange(bits, dtype=np.int64)).sum(axis=1)


def encode_tensor(qt: QuantizedTensor) -> bytes:
    qtype = qt.qtype
    out = [pack_bits(qt.codes - qtype.qmin, qtype.bit_width)]
    if qtype.superblock_size == 0:
        out.append(qt.scales.astype("<f4").tobytes())
    else:
        pairs = np.stack([qt.sb_scale, qt.sb_zero], axis=1).astype("<f4")
        sc = qt.scale_codes.astype(np.uint8).tobytes()
        out += [pairs.tobytes(), sc, b"\0" * (_pad4(len(sc)) - len(sc))]
    if not qtype.symmetric:
        z = qt.zeros.astype(np.uint8).tobytes()
        out += [z, b"\0" * (_pad4(len(z)) - len(z))]
    return b"".join(out)


def write_pack(tensors: Sequence[QuantizedTensor], metadata: Dict[str, str] = None) -> bytes:
    metadata = dict(metadata or {})
    names = [t.name for t in tensors]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise DuplicateNameError(f"duplicate tensor names: {dupes}")
    tensors = sorted(tensors, key=lambda t: t.name)
    meta = [b""]
    for k in sorted(metadata):
        kb, vb = str(k).encode(), str(metadata[k]).encode()
        meta.append(struct.pack("<I", len(kb)) + kb + struct.pack("<I", len(vb)) + vb)
    meta_bytes = b"".join(meta)
    payloads = [encode_tensor(t) for t in tensors]
    dir_size = sum(4 + len(t.name.encode()) + DIR_TAIL.size for t in tensors)
    offset = _pad4(HEADER.size + len(meta_bytes) + dir_size)
    directory = []
    for t, p in zip(tensors, payloads):
        rows, cols = t.shape
        if max(rows, cols, t.qtype.block_size, t.qtype.superblock_size, t.pad_count) > MAX_U32:
            raise PackError(f"{t.name}: field exceeds 32-bit range")
        nb = t.name.encode()
        directory.append(struct.pack("<I", len(nb)) + nb + DIR_TAIL.pack(
            rows, cols, t.qtype.bit_width, CODEBOOK_TAGS[t.qtype.codebook], t.qtype.block_size,
            t.qtype.superblock_size, t.pad_count, offset, len(p)))
        offset += _pad4(len(p))
    if offset >= 2 ** 64:
        raise PackError("payload overflows 64-bit offsets")
    head = HEADER.pack(MAGIC, VERSION, 0, len(tensors), len(metadata)) + meta_bytes + b"".join(directory)
    out = [head, b"\0" * (_pad4(len(head)) - len(head))]
    for p in payloads:
        out += [p, b"\0" * (_pad4(len(p)) - len(p))]
    return b"".join(out)


@dataclass
class DirectoryEntry:
    name: str
    shape: Tuple[int, int]
    qtype: QuantType
    pad_count: int
    offset: int
    length: int


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncationError(f"file truncated while reading {what}")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, st, what: str):
        if isinstance(st, str):
            st = struct.Struct(st)
        return st.unpack(self.take(st.size, what))

    def text(self, what: str) -> str:
        (n,) = self.unpack("<I", what)
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptPackError(f"{what} is not valid UTF-8") from None


def read_directory(buf: bytes):
    r = _Reader(bytes(buf))
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError("bad magic: not an AQPK pack file")
    _, version, _, n_tensors, n_meta = r.unpack(HEADER, "header")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported pack version {version}")
    meta = {}
    for i in range(n_meta):
        k = r.text(f"metadata key {i}")
        meta[k] = r.text(f"metadata value {k!r}")
    entries = []
    for i in range(n_tensors):
        name = r.text(f"directory entry {i}")
        rows, cols, bits, cb, B, S, pad, off, length = r.unpack(DIR_TAIL, f"directory entry {name!r}")
        if bits not in BIT_WIDTHS or cb not in CODEBOOK_TAGS.values():
            raise UnknownTypeTagError(f"{name}: unknown type tag (bits={bits}, codebook={cb})")
        codebook = SYMMETRIC if cb == 0 else ASYMMETRIC
        try:
            qtype = QuantType(bits, codebook, B, S)
        except QuantFormatError as e:
            raise UnknownTypeTagError(f"{name}: {e}") from None
        if (rows * cols + pad) % B or pad >= B:
            raise CorruptPackError(f"{name}: shape {rows}x{cols} with pad {pad} not a block multiple")
        entries.append(DirectoryEntry(name, (rows, cols), qtype, pad, off, length))
    return meta, entries, r.pos


def _check_layout(buf_len: int, header_end: int, entries: List[DirectoryEntry]) -> None:
    names = [e.name for e in entries]
    if len(set(names)) != len(names):
        raise CorruptPackError("duplicate tensor names in directory")
    spans = []
    for e in entries:
        want = payload_length(e.shape, e.qtype, e.pad_count)
        if e.length != want:
            raise CorruptPackError(f"{e.name}: directory length {e.length}, format implies {want}")
        if e.offset < header_end:
            raise OverlapError(f"{e.name}: payload overlaps header/directory")
        if e.offset + e.length > buf_len:
            raise TruncationError(f"payload of tensor {e.name!r} is truncated")
        spans.append((e.offset, e.offset + e.length, e.name))
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise OverlapError(f"payloads of {an!r} and {bn!r} overlap")


def decode_tensor(buf: bytes, e: DirectoryEntry) -> QuantizedTensor:
    qtype = e.qtype
    code_b, scale_b, zero_b = section_sizes(e.shape, qtype, e.pad_count)
    numel = e.shape[0] * e.shape[1] + e.pad_count
    n_blocks = numel // qtype.block_size
    p = e.offset
    codes = unpack_bits(buf[p:p + code_b], numel, qtype.bit_width) + qtype.qmin
    codes = codes.reshape(n_blocks, qtype.block_size)
    p += code_b
    sb_scale = sb_zero = scale_codes = None
    if qtype.superblock_size == 0:
        scales = np.frombuffer(buf, "<f4", n_blocks, p).astype(np.float64)
    else:
        n_sb = -(-n_blocks // qtype.superblock_size)
        pairs = np.frombuffer(buf, "<f4", 2 * n_sb, p).reshape(n_sb, 2)
        sb_scale, sb_zero = pairs[:, 0].astype(np.float32), pairs[:, 1].astype(np.float32)
        scale_codes = np.frombuffer(buf, np.uint8, n_blocks, p + 8 * n_sb).copy()
        scales = expand_scales(sb_scale, sb_zero, scale_codes, qtype.superblock_size)
    p += scale_b
    if qtype.symmetric:
        zeros = np.zeros(n_blocks, dtype=np.int64)
    else:
        zeros = np.frombuffer(buf, np.uint8, n_blocks, p).astype(np.int64)
        if zeros.max(initial=0) > qtype.qmax:
            raise CorruptPackError(f"{e.name}: zero point outside codebook")
    if not np.all(np.isfinite(scales)):
        raise CorruptPackError(f"{e.name}: non-finite block scale")
    if qtype.superblock_size and not (np.all(np.isfinite(sb_scale)) and np.all(np.isfinite(sb_zero))):
        raise CorruptPackError(f"{e.name}: non-finite super-block parameters")
    return QuantizedTensor(e.name, e.shape, qtype, codes, scales, zeros, e.pad_count,
                           sb_scale, sb_zero, scale_codes)


def read_pack(buf: bytes):
    """Parse a pack file. Returns ``(tensors, metadata)``; raises a PackError subclass."""
    buf = bytes(buf)
    meta, entries, header_end = read_directory(buf)
    _check_layout(len(buf), header_end, entries)
    return [decode_tensor(buf, e) for e in entries], meta


def tensor_code_bits(qt_or_entry) -> int:
    shape = qt_or_entry.shape
    return qt_or_entry.qtype.bit_width * int(shape[0]) * int(shape[1])


@dataclass
class MemoryReport:
    total_bytes: int
    tensor_bytes: Dict[str, int]
    numel: int
    code_bpw: float
    effective_bpw: float
    compression_ratio: float
    baseline_bits: int = 16

    def to_dict(self):
        return dict(self.__dict__)


def compression_ratio(baseline_size: float, quantized_size: float) -> float:
    return baseline_size / quantized_size


def model_memory_report(buf: bytes, baseline_bits: int = 16, overhead: str = "storage") -> MemoryReport:
    """Sizes, bits-per-weight and compression ratio vs a ``baseline_bits`` model.

    ``overhead="storage"`` counts every payload byte, ``"zero"`` counts code bits only.
    """
    meta, entries, header_end = read_directory(buf)
    _check_layout(len(buf), header_end, entries)
    numel = sum(e.shape[0] * e.shape[1] for e in entries)
    code_bits = sum(tensor_code_bits(e) for e in entries)
    payload_bits = 8 * sum(e.length for e in entries)
    bits = payload_bits if overhead == "storage" else code_bits
    eff = bits / numel if numel else 0.0
    return MemoryReport(len(buf), {e.name: e.length for e in entries}, numel,
                        code_bits / numel if numel else 0.0, eff,
                        compression_ratio(baseline_bits, eff) if numel else float("nan"),
                        baseline_bits)


def inspect_pack(buf: bytes) -> str:
    meta, entries, _ = read_directory(buf)
    lines = [f"AQPK v{VERSION}  tensors={len(entries)}  metadata_keys={len(meta)}",
             f"{'name':<16} {'shape':>11} {'type':>12} {'offset':>8} {'bytes':>7}"]
    for e in entries:
        lines.append(f"{e.name:<16} {e.shape[0]:>5}x{e.shape[1]:<5} {e.qtype.tag:>12} "
                     f"{e.offset:>8} {e.length:>7}")
    for k in sorted(meta):
        v = meta[k]
        lines.append(f"meta {k} = {v if len(v) <= 60 else v[:57] + '...'}")
    return "\n".join(lines)
