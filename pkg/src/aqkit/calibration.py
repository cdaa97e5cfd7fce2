"""Calibration sets and the AQCB binary file format.

Layout (little-endian), see docs/FORMATS.md:

    "AQCB" | version u8 | n_sections u32 | K u32 | meta_len u32 | meta (UTF-8 JSON)
    n_sections x [ name_len u32 | name | rows u32 | cols u32 | rows*cols float32 ]

Sections are ``X``, ``Y``, ``Z:<tensor>`` and optionally ``G_act:<tensor>`` /
``G_cls:<tensor>`` (one row of flattened gradient per sample).
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .fisher import GradientSample

MAGIC = b"AQCB"
VERSION = 1


class CalibrationFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TensorInfo:
    name: str
    layer: int
    module: str
    shape: tuple

    @property
    def size(self) -> int:
        return int(self.shape[0]) * int(self.shape[1])

    def to_dict(self):
        return {"name": self.name, "layer": self.layer, "module": self.module,
                "shape": list(self.shape)}

    @classmethod
    def from_dict(cls, d):
        return cls(str(d["name"]), int(d["layer"]), str(d["module"]), tuple(int(x) for x in d["shape"]))


@dataclass
class CalibrationSet:
    X: np.ndarray
    Y: np.ndarray
    Z: Dict[str, np.ndarray]
    tensors: List[TensorInfo]
    g_act: Dict[str, np.ndarray] = field(default_factory=dict)
    g_cls: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return int(self.X.shape[0])

    def tensor(self, name: str) -> TensorInfo:
        for t in self.tensors:
            if t.name == name:
                return t
        raise KeyError(name)

    def validate(self) -> None:
        fields = {"X": self.X, "Y": self.Y}
        fields.update({f"Z:{k}": v for k, v in self.Z.items()})
        fields.update({f"G_act:{k}": v for k, v in self.g_act.items()})
        fields.update({f"G_cls:{k}": v for k, v in self.g_cls.items()})
        for key, arr in fields.items():
            if arr.ndim != 2:
                raise CalibrationFormatError(f"section {key} must be 2-D, got {arr.shape}")
            if arr.shape[0] != self.K:
                raise CalibrationFormatError(
                    f"sample count mismatch: X has K={self.K}, {key} has K={arr.shape[0]}")
            if not np.all(np.isfinite(arr)):
                raise CalibrationFormatError(f"section {key} has non-finite entries")
        if self.K < 2:
            raise CalibrationFormatError(f"need K >= 2 samples, got {self.K}")
        known = {t.name for t in self.tensors}
        for group, d in (("Z", self.Z), ("G_act", self.g_act), ("G_cls", self.g_cls)):
            unknown = sorted(set(d) - known)
            if unknown:
                raise CalibrationFormatError(f"{group} sections for unknown tensors: {unknown}")
        for t in self.tensors:
            for d, group in ((self.g_act, "G_act"), (self.g_cls, "G_cls")):
                if t.name in d and d[t.name].shape[1] != t.size:
                    raise CalibrationFormatError(
                        f"{group}:{t.name} has {d[t.name].shape[1]} columns, tensor has {t.size}")

    def gradient_samples(self) -> List[GradientSample]:
        out = []
        for d in range(self.K):
            g_act = {n: g[d] for n, g in self.g_act.items()}
            g_cls = {n: g[d] for n, g in self.g_cls.items()} if self.g_cls else None
            out.append(GradientSample(d, g_act, g_cls))
        return out

    def sections(self):
        yield "X", self.X
        yield "Y", self.Y
        for t in self.tensors:
            if t.name in self.Z:
                yield f"Z:{t.name}", self.Z[t.name]
        for t in self.tensors:
            if t.name in self.g_act:
                yield f"G_act:{t.name}", self.g_act[t.name]
        for t in self.tensors:
            if t.name in self.g_cls:
                yield f"G_cls:{t.name}", self.g_cls[t.name]

    def to_bytes(self) -> bytes:
        self.validate()
        meta = dict(self.meta)
        meta["tensors"] = [t.to_dict() for t in self.tensors]
        mb = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
        secs = list(self.sections())
        out = [MAGIC, struct.pack("<BIII", VERSION, len(secs), self.K, len(mb)), mb]
        for name, arr in secs:
            nb = name.encode()
            out.append(struct.pack("<I", len(nb)) + nb + struct.pack("<II", *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return b"".join(out)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def from_bytes(buf: bytes) -> CalibrationSet:
    if buf[:4] != MAGIC:
        raise CalibrationFormatError("bad magic: not an AQCB calibration file")
    if len(buf) < 17:
        raise CalibrationFormatError("truncated header")
    version, n_sec, K, meta_len = struct.unpack_from("<BIII", buf, 4)
    if version != VERSION:
        raise CalibrationFormatError(f"unknown schema version {version}")
    pos = 17
    if pos + meta_len > len(buf):
        raise CalibrationFormatError("truncated metadata")
    try:
        meta = json.loads(buf[pos:pos + meta_len].decode())
        tensors = [TensorInfo.from_dict(d) for d in meta.pop("tensors")]
    except (ValueError, KeyError, TypeError) as e:
        raise CalibrationFormatError(f"bad metadata: {e}") from None
    pos += meta_len
    secs = {}
    for _ in range(n_sec):
        if pos + 4 > len(buf):
            raise CalibrationFormatError("truncated section header")
        (nl,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if pos + nl + 8 > len(buf):
            raise CalibrationFormatError("truncated section header")
        name = buf[pos:pos + nl].decode(errors="replace")
        rows, cols = struct.unpack_from("<II", buf, pos + nl)
        pos += nl + 8
        nbytes = 4 * rows * cols
        if pos + nbytes > len(buf):
            raise CalibrationFormatError(f"truncated payload in section {name}")
        secs[name] = np.frombuffer(buf, "<f4", rows * cols, pos).reshape(rows, cols).astype(np.float64)
        pos += nbytes
    if pos != len(buf):
        raise CalibrationFormatError(f"{len(buf) - pos} trailing bytes")
    for req in ("X", "Y"):
        if req not in secs:
            raise CalibrationFormatError(f"missing section {req}")

    def group(prefix):
        return {k[len(prefix):]: v for k, v in secs.items() if k.startswith(prefix)}

    cal = CalibrationSet(secs["X"], secs["Y"], group("Z:"), tensors, group("G_act:"),
                         group("G_cls:"), meta)
    if cal.K != K:
        raise CalibrationFormatError(f"header K={K} but section X has K={cal.K}")
    cal.validate()
    return cal


def save_calibration(calib: CalibrationSet, path) -> None:
    Path(path).write_bytes(calib.to_bytes())


def load_calibration(path) -> CalibrationSet:
    return from_bytes(Path(path).read_bytes())
