"""Action-aware per-tensor sensitivity scores.

    score(W) = -hsic_alpha * HSIC(X, Z_W) + hsic_beta * HSIC(Z_W, Y)

The first term rewards redundancy with the input (cheap to quantize), the
second marks outputs aligned with the actions. With ``standardize`` each term
is divided by its mean over all tensors before combining.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .calibration import CalibrationSet, load_calibration, save_calibration  # noqa: F401
from .hsic import MEDIAN, KernelSpec, hsic_from_kernels, kernel_matrix
from .quantcore import MODULE_ORDER


class MissingActivationsError(KeyError):
    pass


@dataclass(frozen=True)
class SensitivityConfig:
    hsic_alpha: float = 1.0
    hsic_beta: float = 1.0
    standardize: bool = True
    kernel: KernelSpec = KernelSpec()

    def __post_init__(self):
        if self.hsic_alpha < 0 or self.hsic_beta < 0:
            raise ValueError("hsic_alpha and hsic_beta must be nonnegative")
        if self.hsic_alpha == 0 and self.hsic_beta == 0:
            raise ValueError("hsic_alpha and hsic_beta cannot both be zero")

    def to_dict(self):
        return {"hsic_alpha": self.hsic_alpha, "hsic_beta": self.hsic_beta,
                "standardize": self.standardize,
                "kernel": {"kind": self.kernel.kind, "bandwidth": self.kernel.bandwidth}}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class SensitivityEntry:
    name: str
    layer: int
    module: str
    score: float
    size: int
    redundancy: float = 0.0
    relevance: float = 0.0
    flags: List[str] = field(default_factory=list)


@dataclass
class SensitivityTable:
    entries: List[SensitivityEntry]
    provenance: Dict[str, str] = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, name: str) -> SensitivityEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    @property
    def names(self) -> List[str]:
        return [e.name for e in self.entries]

    @property
    def n_layers(self) -> int:
        return max(e.layer for e in self.entries)

    def to_dict(self):
        return {"entries": [asdict(e) for e in self.entries], "provenance": dict(self.provenance)}

    @classmethod
    def from_dict(cls, d):
        return cls([SensitivityEntry(**e) for e in d["entries"]], dict(d.get("provenance", {})))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def module_rank(module: str) -> int:
    return MODULE_ORDER.index(module) if module in MODULE_ORDER else len(MODULE_ORDER)


def sort_key(layer: int, module: str, name: str = ""):
    return (layer, module_rank(module), module, name)


def _is_constant(z: np.ndarray) -> bool:
    return bool(np.all(z == z[0]))


def hsic_terms(calib: CalibrationSet, cfg: SensitivityConfig,
               names: Optional[List[str]] = None) -> Dict[str, Tuple[float, float, bool]]:
    """(HSIC(X, Z), HSIC(Z, Y), degenerate) for every requested tensor."""
    names = [t.name for t in calib.tensors] if names is None else list(names)
    missing = [n for n in names if n not in calib.Z]
    if missing:
        raise MissingActivationsError(f"no activations for tensors: {missing}")
    kx = kernel_matrix(calib.X, cfg.kernel)
    ky = kernel_matrix(calib.Y, cfg.kernel)
    out = {}
    for n in names:
        z = calib.Z[n]
        if _is_constant(z):
            out[n] = (0.0, 0.0, True)
            continue
        kz = kernel_matrix(z, cfg.kernel)
        out[n] = (hsic_from_kernels(kx, kz), hsic_from_kernels(kz, ky), False)
    return out


def standardize_terms(values: np.ndarray) -> np.ndarray:
    """Divide by the mean over tensors (left alone when that mean is zero)."""
    v = np.asarray(values, dtype=np.float64)
    m = v.mean()
    return v / m if m > 0 else v.copy()


def _scores(terms: Dict[str, tuple], cfg: SensitivityConfig) -> Dict[str, float]:
    names = list(terms)
    red = np.array([terms[n][0] for n in names])
    rel = np.array([terms[n][1] for n in names])
    if cfg.standardize:
        red, rel = standardize_terms(red), standardize_terms(rel)
    s = -cfg.hsic_alpha * red + cfg.hsic_beta * rel
    return {n: float(v) for n, v in zip(names, s)}


def tensor_sensitivity(calib: CalibrationSet, tensor: str,
                       cfg: SensitivityConfig = SensitivityConfig()) -> float:
    if tensor not in calib.Z:
        raise MissingActivationsError(f"no activations for tensor {tensor!r}")
    if cfg.standardize:
        terms = hsic_terms(calib, cfg)
    else:
        terms = hsic_terms(calib, cfg, [tensor])
    return _scores(terms, cfg)[tensor]


def build_table(calib: CalibrationSet, cfg: SensitivityConfig = SensitivityConfig()
                ) -> SensitivityTable:
    terms = hsic_terms(calib, cfg)
    scores = _scores(terms, cfg)
    layers = sorted({t.layer for t in calib.tensors})
    if layers != list(range(1, len(layers) + 1)):
        raise ValueError(f"layer indices must be contiguous from 1, got {layers}")
    entries = []
    for t in sorted(calib.tensors, key=lambda t: sort_key(t.layer, t.module, t.name)):
        red, rel, degenerate = terms[t.name]
        flags = ["degenerate"] if degenerate else []
        if scores[t.name] < 0:
            flags.append("negative")
        entries.append(SensitivityEntry(t.name, t.layer, t.module, scores[t.name], t.size,
                                        red, rel, flags))
    prov = {"config": cfg.digest(), "calibration": calib.digest()}
    return SensitivityTable(entries, prov)


def shared_bandwidth_config(gamma: float, **kw) -> SensitivityConfig:
    return SensitivityConfig(kernel=KernelSpec(bandwidth=gamma), **kw)


__all__ = ["SensitivityConfig", "SensitivityEntry", "SensitivityTable", "build_table",
           "tensor_sensitivity", "hsic_terms", "standardize_terms", "load_calibration",
           "save_calibration", "MEDIAN"]
