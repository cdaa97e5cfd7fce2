"""Calibration generation, policy quantization and the ablation ladder."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..allocator import AllocationInstance, OVERHEAD_MODELS, greedy_allocate, brute_force_allocate
from ..calibration import CalibrationSet, TensorInfo
from ..fisher import fisher_diagonal, importance_weights
from ..quantcore import QuantType, QuantizedTensor, dequantize, quantize_rtn
from ..scaleopt import ScaleOptConfig, optimize_tensor
from ..sensitivity import SensitivityConfig, SensitivityEntry, SensitivityTable, build_table
from .policy import ToyPolicy, tensor_layer_module
from .task import ReachTask, rollout_success

DEFAULT_MENU = (2, 3, 4, 8)


def gen_calibration(policy: ToyPolicy, task: ReachTask, K: int = 60, seed: int = 42,
                    action_loss: str = "mse") -> CalibrationSet:
    """K on-distribution states with activations, oracle actions and per-sample gradients."""
    if K < 2:
        raise ValueError(f"need K >= 2 calibration samples, got {K}")
    rng = np.random.default_rng(seed)
    # inputs are rounded to file precision first so that a fresh backward pass
    # from the stored X and Y reproduces the stored gradients
    x = task.sample_states(K, rng).astype(np.float32).astype(np.float64)
    y = task.oracle_action(x).astype(np.float32).astype(np.float64)
    tr = policy.trace(x)
    names = policy.quantizable
    tensors = []
    for n in names:
        layer, module = tensor_layer_module(n)
        tensors.append(TensorInfo(n, layer, module, tuple(policy.params[n].shape)))
    g_act = policy.per_sample_grads(x, y, "act", action_loss)
    g_cls = policy.per_sample_grads(x, y, "cls")
    meta = {"seed": seed, "K": K, "action_loss": action_loss, "task": task.to_dict(),
            "arch": policy.arch.to_dict()}
    calib = CalibrationSet(x, y, {n: tr[n] for n in names}, tensors, g_act, g_cls, meta)
    # store what the file will hold so in-memory and on-disk sets agree exactly
    for d in (calib.Z, calib.g_act, calib.g_cls):
        for k in d:
            d[k] = d[k].astype(np.float32).astype(np.float64)
    return calib


def uniform_table(calib: CalibrationSet) -> SensitivityTable:
    """Every tensor equally sensitive: allocation driven by sizes and tie-breaks only."""
    ents = [SensitivityEntry(t.name, t.layer, t.module, 1.0, t.size)
            for t in sorted(calib.tensors, key=lambda t: (t.layer, t.name))]
    return SensitivityTable(ents, {"kind": "uniform"})


def allocate(table: SensitivityTable, budget: float, menu=DEFAULT_MENU,
             base: QuantType = QuantType(4), overhead: str = "zero", exact: bool = False):
    inst = AllocationInstance(table, [base.with_bits(b) for b in sorted(menu)], budget,
                              OVERHEAD_MODELS[overhead])
    return brute_force_allocate(inst) if exact else greedy_allocate(inst)


def quantize_policy(policy: ToyPolicy, types: Dict[str, QuantType], method: str = "scaleopt",
                    fisher=None, cfg: ScaleOptConfig = ScaleOptConfig()
                    ) -> Dict[str, QuantizedTensor]:
    """Quantize every assigned backbone tensor with RTN or the scale optimizer."""
    out = {}
    for n in policy.quantizable:
        w = policy.params[n]
        if method == "rtn":
            out[n] = quantize_rtn(w, types[n], n)
        elif method == "scaleopt":
            f = None if fisher is None else fisher[n]
            out[n] = optimize_tensor(w, f, types[n], cfg, n)
        else:
            raise ValueError(f"unknown quantization method {method!r}")
    return out


def dequantized_policy(policy: ToyPolicy, qts: Dict[str, QuantizedTensor]) -> ToyPolicy:
    return policy.with_weights({n: dequantize(q) for n, q in qts.items()})


def weighted_error(policy: ToyPolicy, qts: Dict[str, QuantizedTensor], fisher) -> float:
    """Sum over tensors of sum(omega * (w - w_hat)^2) / sum(omega), omega = F * block magnitude."""
    num = den = 0.0
    for n, q in qts.items():
        w = policy.params[n]
        om = importance_weights(fisher[n], w, q.qtype.block_size).ravel()[:w.size].reshape(w.shape)
        num += float(np.sum(om * (w - dequantize(q)) ** 2))
        den += float(om.sum())
    return num / den if den > 0 else 0.0


RUNGS = ("rtn", "magnitude-scale", "action-fisher", "action-mixed-fisher", "hsic-allocation")


@dataclass
class RungResult:
    rung: int
    name: str
    success: List[float]
    weighted_error: float
    achieved_bpw: float
    bits: Dict[str, int] = field(default_factory=dict)

    @property
    def mean_success(self) -> float:
        return float(np.mean(self.success))


def ladder_plans(policy: ToyPolicy, calib: CalibrationSet, bpw_target: float,
                 menu=DEFAULT_MENU, overhead: str = "zero", amf_alpha: float = 0.5,
                 sens_cfg: SensitivityConfig = SensitivityConfig()):
    """(assignment, quantized tensors) for each of the five rungs.

    1 RTN, 2 magnitude-weighted scales, 3 action-only Fisher weights,
    4 action-mixed Fisher weights, 5 HSIC-driven allocation on top of 4.
    Rungs 1-4 share the allocation obtained with uniform sensitivities.
    Also returns the action-only Fisher used for the error metric.
    """
    if not calib.g_act or not calib.g_cls:
        raise ValueError("ablation needs both action and categorical gradients")
    samples = calib.gradient_samples()
    f_act = fisher_diagonal(samples, 1.0).values
    f_amf = fisher_diagonal(samples, amf_alpha).values
    uni = allocate(uniform_table(calib), bpw_target, menu, overhead=overhead)
    hs = allocate(build_table(calib, sens_cfg), bpw_target, menu, overhead=overhead)
    plans = [
        (uni, "rtn", None, ScaleOptConfig()),
        (uni, "scaleopt", None, ScaleOptConfig(importance_mode="magnitude")),
        (uni, "scaleopt", f_act, ScaleOptConfig()),
        (uni, "scaleopt", f_amf, ScaleOptConfig()),
        (hs, "scaleopt", f_amf, ScaleOptConfig()),
    ]
    out = [(alloc, quantize_policy(policy, alloc.types, method, fisher, cfg))
           for alloc, method, fisher, cfg in plans]
    return out, f_act


def ablation_ladder(policy: ToyPolicy, calib: CalibrationSet, bpw_target: float,
                    seeds: Sequence[int], task: Optional[ReachTask] = None,
                    episodes: int = 500, menu=DEFAULT_MENU, overhead: str = "zero",
                    amf_alpha: float = 0.5,
                    sens_cfg: SensitivityConfig = SensitivityConfig()) -> List[RungResult]:
    """Five cumulative configurations at one budget, evaluated on every seed."""
    task = task or ReachTask(**calib.meta.get("task", {}))
    plans, f_act = ladder_plans(policy, calib, bpw_target, menu, overhead, amf_alpha, sens_cfg)
    out = []
    for i, (alloc, qts) in enumerate(plans):
        qp = dequantized_policy(policy, qts)
        succ = [rollout_success(qp.act, task, episodes, s) for s in seeds]
        out.append(RungResult(i + 1, RUNGS[i], succ, weighted_error(policy, qts, f_act),
                              alloc.achieved_bpw, alloc.bits()))
    return out


def ladder_csv(rows: List[RungResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rung", "name", "mean_success", "weighted_error", "achieved_bpw", "bits"])
    for r in rows:
        bits = " ".join(f"{k}={v}" for k, v in r.bits.items())
        w.writerow([r.rung, r.name, f"{r.mean_success:.4f}", f"{r.weighted_error:.6e}",
                    f"{r.achieved_bpw:.4f}", bits])
    return buf.getvalue()
