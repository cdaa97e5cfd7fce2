"""Command-line pipeline: train, calibrate, sensitivity, allocate, quantize, pack, eval.

Every stage reads and writes the files named under ``paths`` in the config, so
``aqkit run`` is exactly the subcommands chained in order.

Exit codes: 0 ok, 2 usage, 3 config, 4 data/format, 5 numeric, 6 I/O.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import container
from .allocator import (AllocationInstance, Assignment, InfeasibleBudgetError,
                        InstanceTooLargeError, OVERHEAD_MODELS, brute_force_allocate,
                        greedy_allocate, layer_errors, objective)
from .calibration import CalibrationFormatError, load_calibration, save_calibration
from .config import ConfigError, PipelineConfig, load_config
from .fisher import MissingGradientError, default_amf_alpha, fisher_diagonal
from .harness.pipeline import ablation_ladder, gen_calibration, ladder_csv
from .harness.policy import (CheckpointFormatError, PolicyArch, TrainConfig,
                             TrainingDivergedError, load_checkpoint, save_checkpoint,
                             train_policy)
from .harness.task import ReachTask, rollout_success
from .hsic import DegenerateSamplesError
from .quantcore import QuantFormatError, StructuralCorruptionError, dequantize
from .scaleopt import optimize_tensor
from .sensitivity import MissingActivationsError, SensitivityTable, build_table

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5, 6

DATA_ERRORS = (CalibrationFormatError, container.PackError, CheckpointFormatError,
               QuantFormatError, StructuralCorruptionError, MissingActivationsError,
               MissingGradientError, InstanceTooLargeError, json.JSONDecodeError, KeyError)
NUMERIC_ERRORS = (TrainingDivergedError, DegenerateSamplesError, FloatingPointError,
                  InfeasibleBudgetError)


class StageError(Exception):
    def __init__(self, stage: str, cause: BaseException, hashes: Dict[str, str]):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage, self.cause, self.hashes = stage, cause, hashes


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=True) + "\n"


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def make_task(cfg: PipelineConfig) -> ReachTask:
    return ReachTask(**vars(cfg.task))


def make_arch(cfg: PipelineConfig) -> PolicyArch:
    task = make_task(cfg)
    return PolicyArch(in_dim=task.state_dim, a_max=task.a_max, **vars(cfg.arch))


def amf_alpha(cfg: PipelineConfig) -> float:
    a = cfg.quant.amf_alpha
    return default_amf_alpha(True) if a is None else float(a)


# stages ---------------------------------------------------------------------

def stage_train(cfg: PipelineConfig):
    policy = train_policy(make_task(cfg), make_arch(cfg), cfg.substream("train"),
                          TrainConfig(**vars(cfg.train)))
    cfg.path("checkpoint").parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(policy, cfg.path("checkpoint"))
    return policy


def stage_calibrate(cfg: PipelineConfig):
    cfg.require("checkpoint")
    policy = load_checkpoint(cfg.path("checkpoint"))
    calib = gen_calibration(policy, make_task(cfg), cfg.calibration.K, cfg.calibration.seed,
                            cfg.train.action_loss)
    save_calibration(calib, cfg.path("calibration"))
    return calib


def stage_sensitivity(cfg: PipelineConfig) -> SensitivityTable:
    cfg.require("calibration")
    table = build_table(load_calibration(cfg.path("calibration")), cfg.sensitivity_config())
    write_text(cfg.path("sensitivity"), canonical_json(table.to_dict()))
    return table


def stage_allocate(cfg: PipelineConfig, exact: bool = False) -> Assignment:
    cfg.require("sensitivity")
    table = SensitivityTable.from_dict(json.loads(cfg.path("sensitivity").read_text()))
    inst = AllocationInstance(table, cfg.menu(), cfg.quant.budget,
                              OVERHEAD_MODELS[cfg.quant.overhead])
    a = brute_force_allocate(inst) if exact else greedy_allocate(inst)
    d = a.to_dict()
    d["solver"] = "exact" if exact else "greedy"
    d["overhead"] = cfg.quant.overhead
    d["budget"] = cfg.quant.budget
    write_text(cfg.path("assignment"), canonical_json(d))
    return a


def read_assignment(cfg: PipelineConfig) -> dict:
    cfg.require("assignment")
    d = json.loads(cfg.path("assignment").read_text())
    allowed = set(cfg.quant.menu)
    bad = {n: b for n, b in d["bits"].items() if b not in allowed}
    if bad:
        raise ConfigError(f"assignment uses bit widths outside the menu: {bad}")
    return d


def stage_quantize(cfg: PipelineConfig):
    cfg.require("checkpoint", "calibration", "assignment")
    policy = load_checkpoint(cfg.path("checkpoint"))
    calib = load_calibration(cfg.path("calibration"))
    bits = read_assignment(cfg)["bits"]
    fisher = fisher_diagonal(calib.gradient_samples(), amf_alpha(cfg))
    base = cfg.base_qtype()
    qts = []
    for n in policy.quantizable:
        if n not in bits:
            raise KeyError(f"assignment has no entry for tensor {n!r}")
        qts.append(optimize_tensor(policy.params[n], fisher[n], base.with_bits(bits[n]),
                                   cfg.scaleopt_config(), n))
    cfg.path("quantized").write_bytes(container.write_pack(qts))
    return qts


def stage_pack(cfg: PipelineConfig) -> bytes:
    cfg.require("quantized", "assignment", "sensitivity", "checkpoint", "calibration")
    tensors, _ = container.read_pack(cfg.path("quantized").read_bytes())
    assignment = read_assignment(cfg)
    calib = load_calibration(cfg.path("calibration"))
    meta = {
        "assignment": json.dumps(assignment, sort_keys=True),
        "sensitivity_provenance": json.dumps(
            json.loads(cfg.path("sensitivity").read_text()).get("provenance", {}), sort_keys=True),
        "checkpoint_sha256": sha256(cfg.path("checkpoint")),
        "calibration_sha256": sha256(cfg.path("calibration")),
        "action_loss": str(calib.meta.get("action_loss", "")),
        "amf_alpha": repr(amf_alpha(cfg)),
        "importance_mode": cfg.quant.importance_mode,
    }
    buf = container.write_pack(tensors, meta)
    cfg.path("pack").write_bytes(buf)
    return buf


def evaluate(cfg: PipelineConfig, pack: Optional[Path] = None, episodes: Optional[int] = None) -> float:
    cfg.require("checkpoint")
    policy = load_checkpoint(cfg.path("checkpoint"))
    if pack is not None:
        tensors, _ = container.read_pack(Path(pack).read_bytes())
        policy = policy.with_weights({t.name: dequantize(t) for t in tensors})
    return rollout_success(policy.act, make_task(cfg), episodes or cfg.eval.episodes,
                           cfg.substream("eval"))


def stage_report(cfg: PipelineConfig) -> dict:
    cfg.require("checkpoint", "calibration", "sensitivity", "assignment", "pack")
    table = SensitivityTable.from_dict(json.loads(cfg.path("sensitivity").read_text()))
    assignment = read_assignment(cfg)
    buf = cfg.path("pack").read_bytes()
    tensors, _ = container.read_pack(buf)
    types = {t.name: t.qtype for t in tensors}
    errs = layer_errors(table, types)
    mem = {m: container.model_memory_report(buf, 16, m) for m in ("zero", "storage")}
    report = {
        "config": cfg.to_dict(),
        "sensitivity": table.to_dict(),
        "assignment": {n: types[n].tag for n in sorted(types)},
        "bits": {n: types[n].bit_width for n in sorted(types)},
        "layer_errors": {str(k): v for k, v in errs.items()},
        "objective": objective(errs),
        "achieved_bpw": {"code": mem["zero"].effective_bpw, "storage": mem["storage"].effective_bpw},
        "compression_ratio_vs_fp16": mem["storage"].compression_ratio,
        "solver": assignment.get("solver"),
        "success": {"full_precision": evaluate(cfg), "quantized": evaluate(cfg, cfg.path("pack"))},
        "episodes": cfg.eval.episodes,
        "artifacts": {k: sha256(cfg.path(k)) for k in ("checkpoint", "calibration", "pack")},
    }
    write_text(cfg.path("report"), canonical_json(report))
    write_text(cfg.path("report").with_suffix(".txt"), text_report(report))
    return report


def text_report(r: dict) -> str:
    lines = ["tensor      layer  module   score      bits  type"]
    for e in r["sensitivity"]["entries"]:
        n = e["name"]
        lines.append(f"{n:<11} {e['layer']:>5}  {e['module']:<6} {e['score']:>9.4f}  {r['bits'][n]:>4}  {r['assignment'][n]}")
    lines.append("layer errors: " + ", ".join(f"L{k}={v:.3e}" for k, v in r["layer_errors"].items()))
    lines.append(f"objective {r['objective']:.4e}  code bpw {r['achieved_bpw']['code']:.3f}  "
                 f"storage bpw {r['achieved_bpw']['storage']:.3f}  "
                 f"ratio vs fp16 {r['compression_ratio_vs_fp16']:.2f}x")
    s = r["success"]
    lines.append(f"success full precision {s['full_precision']:.3f}  quantized {s['quantized']:.3f}"
                 f"  ({r['episodes']} episodes)")
    return "\n".join(lines) + "\n"


def cmd_run(cfg: PipelineConfig, exact: bool = False, retrain: bool = False) -> dict:
    stages = []
    if retrain or not cfg.path("checkpoint").exists():
        stages.append(("train", stage_train))
    stages += [("calibrate", stage_calibrate), ("sensitivity", stage_sensitivity),
               ("allocate", lambda c: stage_allocate(c, exact)), ("quantize", stage_quantize),
               ("pack", stage_pack), ("report", stage_report)]
    out = None
    for name, fn in stages:
        out = run_stage(name, fn, cfg)
    return out


def run_stage(name: str, fn, cfg: PipelineConfig):
    try:
        return fn(cfg)
    except Exception as e:
        hashes = {}
        for k in ("checkpoint", "calibration", "sensitivity", "assignment", "quantized", "pack"):
            p = cfg.path(k)
            if p.exists():
                hashes[k] = sha256(p)
        raise StageError(name, e, hashes) from e


# argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aqkit", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("-c", "--config", default=None, help="YAML config (default: built-in defaults)")
        return p

    add("train", "train the toy policy and write the checkpoint")
    add("calibrate", "generate the calibration set (AQCB)")
    add("sensitivity", "compute the per-tensor sensitivity table")
    p = add("allocate", "assign a quantization type to every tensor")
    p.add_argument("--exact", action="store_true", help="use the brute-force optimum")
    add("quantize", "optimize scales and codes for every tensor")
    add("pack", "write the final AQPK pack with metadata")
    add("report", "evaluate and write JSON + text reports")
    p = add("eval", "closed-loop success rate")
    p.add_argument("--pack", default=None, help="evaluate this pack instead of full precision")
    p.add_argument("--episodes", type=int, default=None)
    p = sub.add_parser("inspect", help="print the directory of an AQPK file")
    p.add_argument("pack")
    p = add("ablate", "five-rung ablation ladder at one budget (CSV)")
    p.add_argument("--bpw", type=float, required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")
    p = add("run", "full pipeline: [train] calibrate sensitivity allocate quantize pack report")
    p.add_argument("--exact", action="store_true")
    p.add_argument("--retrain", action="store_true", help="train even if the checkpoint exists")
    return ap


def get_config(path) -> PipelineConfig:
    if path is None:
        from .config import from_dict
        return from_dict({}, ".")
    return load_config(path)


def dispatch(args) -> int:
    if args.command == "inspect":
        print(container.inspect_pack(Path(args.pack).read_bytes()))
        return EXIT_OK
    cfg = get_config(args.config)
    c = args.command
    if c == "run":
        r = cmd_run(cfg, args.exact, args.retrain)
        sys.stdout.write(text_report(r))
    elif c == "eval":
        s = run_stage("eval", lambda k: evaluate(k, args.pack, args.episodes), cfg)
        print(f"success {s:.4f}")
    elif c == "ablate":
        cfg.require("checkpoint", "calibration")
        policy = load_checkpoint(cfg.path("checkpoint"))
        calib = load_calibration(cfg.path("calibration"))
        rows = run_stage("ablate", lambda k: ablation_ladder(
            policy, calib, args.bpw, args.seeds, make_task(k), args.episodes or k.eval.episodes,
            k.quant.menu, k.quant.overhead, amf_alpha(k), k.sensitivity_config()), cfg)
        text = ladder_csv(rows)
        if args.out:
            write_text(Path(args.out), text)
        else:
            sys.stdout.write(text)
    else:
        fns = {"train": stage_train, "calibrate": stage_calibrate,
               "sensitivity": stage_sensitivity, "allocate": lambda k: stage_allocate(k, args.exact),
               "quantize": stage_quantize, "pack": stage_pack, "report": stage_report}
        run_stage(c, fns[c], cfg)
        print(f"{c}: ok")
    return EXIT_OK


def exit_code(e: BaseException) -> int:
    if isinstance(e, StageError):
        e = e.cause
    if isinstance(e, ConfigError):
        return EXIT_CONFIG
    if isinstance(e, NUMERIC_ERRORS):
        return EXIT_NUMERIC
    if isinstance(e, DATA_ERRORS):
        return EXIT_DATA
    if isinstance(e, OSError):
        return EXIT_IO
    if isinstance(e, ValueError):
        return EXIT_DATA
    raise e


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return dispatch(args)
    except Exception as e:  # mapped to documented exit codes, anything else re-raises
        code = exit_code(e)
        print(f"error: {e}", file=sys.stderr)
        if isinstance(e, StageError) and e.hashes:
            for k, v in sorted(e.hashes.items()):
                print(f"  artifact {k} sha256={v}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
