"""Pipeline configuration: a YAML tree mapped onto nested dataclasses.

Every default equals the owning module's default, so an empty file runs the
canonical pipeline. Schema in docs/CONFIG.md.
"""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import yaml

from .allocator import OVERHEAD_MODELS
from .hsic import MEDIAN, KernelSpec
from .quantcore import CODEBOOKS, QuantType
from .scaleopt import IMPORTANCE_MODES, ScaleOptConfig
from .sensitivity import SensitivityConfig


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    checkpoint: str = "policy.aqck"
    calibration: str = "calib.aqcb"
    sensitivity: str = "sensitivity.json"
    assignment: str = "assignment.json"
    quantized: str = "quantized.aqpk"
    pack: str = "model.aqpk"
    report: str = "report.json"


@dataclass
class TaskCfg:
    arena: float = 1.0
    a_max: float = 1.0
    dt: float = 0.05
    horizon: int = 100
    success_radius: float = 0.02
    slow_radius: float = 0.1
    min_start_dist: float = 0.2
    n_distractors: int = 0


@dataclass
class ArchCfg:
    width: int = 32
    hidden: int = 32
    n_layers: int = 3
    n_bins: int = 16
    activation: str = "tanh"


@dataclass
class TrainCfg:
    steps: int = 20000
    batch: int = 256
    lr: float = 3e-3
    action_loss: str = "mse"
    target_mse: float = 1e-3
    eval_every: int = 500
    head_steps: int = 3000


@dataclass
class CalibCfg:
    K: int = 60
    seed: int = 42


@dataclass
class SensitivityCfg:
    hsic_alpha: float = 1.0
    hsic_beta: float = 1.0
    standardize: bool = True
    bandwidth: Union[str, float] = MEDIAN


@dataclass
class QuantCfg:
    menu: List[int] = field(default_factory=lambda: [2, 3, 4, 8])
    codebook: str = "symmetric"
    block_size: int = 32
    superblock_size: int = 8
    budget: float = 3.0
    overhead: str = "zero"
    amf_alpha: Optional[float] = None      # None: 0.5 with a categorical head
    max_iters: int = 20
    rel_tol: float = 1e-8
    importance_mode: str = "fisher-magnitude"


@dataclass
class EvalCfg:
    episodes: int = 500


@dataclass
class PipelineConfig:
    seed: int = 0
    paths: Paths = field(default_factory=Paths)
    task: TaskCfg = field(default_factory=TaskCfg)
    arch: ArchCfg = field(default_factory=ArchCfg)
    train: TrainCfg = field(default_factory=TrainCfg)
    calibration: CalibCfg = field(default_factory=CalibCfg)
    sensitivity: SensitivityCfg = field(default_factory=SensitivityCfg)
    quant: QuantCfg = field(default_factory=QuantCfg)
    eval: EvalCfg = field(default_factory=EvalCfg)
    base_dir: str = "."

    def path(self, key: str) -> Path:
        return Path(self.base_dir) / getattr(self.paths, key)

    def to_dict(self):
        d = asdict(self)
        d.pop("base_dir")
        return d

    def substream(self, name: str) -> int:
        """Integer seed for a named randomness stream derived from the root seed."""
        ss = np.random.SeedSequence([self.seed, zlib.crc32(name.encode())])
        return int(ss.generate_state(1)[0])

    def base_qtype(self) -> QuantType:
        q = self.quant
        return QuantType(q.menu[0], q.codebook, q.block_size, q.superblock_size)

    def menu(self) -> List[QuantType]:
        return [self.base_qtype().with_bits(b) for b in sorted(self.quant.menu)]

    def sensitivity_config(self) -> SensitivityConfig:
        s = self.sensitivity
        return SensitivityConfig(s.hsic_alpha, s.hsic_beta, s.standardize, KernelSpec(bandwidth=s.bandwidth))

    def scaleopt_config(self) -> ScaleOptConfig:
        q = self.quant
        return ScaleOptConfig(q.max_iters, q.rel_tol, q.importance_mode)

    def validate(self) -> None:
        q = self.quant
        if not q.menu or len(set(q.menu)) != len(q.menu):
            raise ConfigError(f"quant.menu must be non-empty without repeats, got {q.menu}")
        if q.overhead not in OVERHEAD_MODELS:
            raise ConfigError(f"quant.overhead must be one of {sorted(OVERHEAD_MODELS)}")
        if q.codebook not in CODEBOOKS:
            raise ConfigError(f"quant.codebook must be one of {CODEBOOKS}")
        if q.importance_mode not in IMPORTANCE_MODES:
            raise ConfigError(f"quant.importance_mode must be one of {IMPORTANCE_MODES}")
        if q.amf_alpha is not None and (isinstance(q.amf_alpha, bool) or not isinstance(q.amf_alpha, (int, float)) or not 0.0 <= q.amf_alpha <= 1.0):
            raise ConfigError(f"quant.amf_alpha must lie in [0, 1], got {q.amf_alpha}")
        try:
            menu = self.menu()
            self.sensitivity_config()
            self.scaleopt_config()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        cheapest = OVERHEAD_MODELS[q.overhead](menu[0])
        if q.budget < cheapest - 1e-9:
            raise ConfigError(f"quant.budget {q.budget} is below the cheapest type ({cheapest} bpw)")
        if self.calibration.K < 2:
            raise ConfigError(f"calibration.K must be >= 2, got {self.calibration.K}")
        if self.train.action_loss not in ("mse", "l1"):
            raise ConfigError(f"train.action_loss must be mse or l1, got {self.train.action_loss!r}")
        if self.arch.activation not in ("tanh", "relu"):
            raise ConfigError(f"arch.activation must be tanh or relu")

    def require(self, *keys: str) -> None:
        """Referenced input files must exist before a stage starts."""
        missing = [str(self.path(k)) for k in keys if not self.path(k).exists()]
        if missing:
            raise ConfigError(f"missing input files: {missing}")


def _build(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown keys in {where or 'config'}: {unknown}")
    kw = {}
    defaults = cls()
    for k, v in data.items():
        key = f"{where}.{k}".lstrip(".")
        sub = known[k].default_factory
        if isinstance(sub, type) and hasattr(sub, "__dataclass_fields__"):
            kw[k] = _build(sub, v, key)
        else:
            kw[k] = _coerce(getattr(defaults, k), v, key)
    return cls(**kw)


def _coerce(default, v, key: str):
    """Check a scalar against its default's type (ints are accepted for floats)."""
    if default is None or v is None:
        return v
    if isinstance(default, bool):
        ok = isinstance(v, bool)
    elif isinstance(default, int):
        ok = isinstance(v, int) and not isinstance(v, bool)
    elif isinstance(default, float):
        ok = isinstance(v, (int, float)) and not isinstance(v, bool)
        v = float(v) if ok else v
    elif isinstance(default, list):
        ok = isinstance(v, list) and all(isinstance(x, int) and not isinstance(x, bool) for x in v)
    else:
        ok = isinstance(v, (str, int, float)) and not isinstance(v, bool)
    if not ok:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {v!r}")
    return v


def from_dict(data: dict, base_dir: str = ".") -> PipelineConfig:
    data = dict(data or {})
    data.pop("base_dir", None)
    cfg = _build(PipelineConfig, data, "")
    cfg.base_dir = base_dir
    cfg.validate()
    return cfg


def load_config(path) -> PipelineConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}") from None
    return from_dict(data or {}, str(p.parent))
