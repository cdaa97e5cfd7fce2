"""Toy policy: a residual MLP backbone with a continuous action head and a
binned categorical head.

    h0 = P x + p                         (input projection, full precision)
    for l in 1..L:  u = act(W_up h + b),  h = h + W_down u + b'
    action = A h + a                     (full precision)
    logits = M h + m                     (full precision, n_dims x n_bins)

Only the ``{l}.up`` / ``{l}.down`` matrices are quantization candidates.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .autodiff import Tape, Var

CKPT_MAGIC = b"AQCK"
CKPT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


@dataclass(frozen=True)
class PolicyArch:
    in_dim: int = 4
    width: int = 32
    hidden: int = 32
    n_layers: int = 3
    act_dim: int = 2
    n_bins: int = 16
    a_max: float = 1.0
    activation: str = "tanh"

    def to_dict(self):
        return asdict(self)

    def tensor_names(self) -> List[str]:
        return [f"{l}.{m}" for l in range(1, self.n_layers + 1) for m in ("up", "down")]


def tensor_layer_module(name: str):
    layer, module = name.split(".")
    return int(layer), module


@dataclass
class ToyPolicy:
    arch: PolicyArch
    params: Dict[str, np.ndarray]
    info: dict = field(default_factory=dict)

    @property
    def quantizable(self) -> List[str]:
        return self.arch.tensor_names()

    def with_weights(self, weights: Dict[str, np.ndarray]) -> "ToyPolicy":
        unknown = set(weights) - set(self.quantizable)
        if unknown:
            raise KeyError(f"not quantizable tensors: {sorted(unknown)}")
        p = dict(self.params)
        p.update({k: np.asarray(v, dtype=np.float64) for k, v in weights.items()})
        return replace(self, params=p)

    def bin_labels(self, actions: np.ndarray) -> np.ndarray:
        a = np.clip(actions, -self.arch.a_max, self.arch.a_max)
        idx = np.floor((a + self.arch.a_max) / (2 * self.arch.a_max) * self.arch.n_bins)
        return np.clip(idx, 0, self.arch.n_bins - 1).astype(np.int64)

    # plain numpy forward for rollouts
    def trace(self, x: np.ndarray) -> dict:
        """Forward pass recording every candidate tensor's output."""
        p, arch = self.params, self.arch
        act = np.tanh if arch.activation == "tanh" else (lambda v: np.maximum(v, 0.0))
        h = x @ p["proj"].T + p["proj.bias"]
        outs = {}
        for l in range(1, arch.n_layers + 1):
            u = act(h @ p[f"{l}.up"].T + p[f"{l}.up.bias"])
            d = u @ p[f"{l}.down"].T + p[f"{l}.down.bias"]
            outs[f"{l}.up"], outs[f"{l}.down"] = u, d
            h = h + d
        outs["hidden"] = h
        outs["action"] = h @ p["head.act"].T + p["head.act.bias"]
        outs["logits"] = h @ p["head.lm"].T + p["head.lm.bias"]
        return outs

    def act(self, x: np.ndarray) -> np.ndarray:
        return self.trace(np.asarray(x, dtype=np.float64))["action"]

    # taped forward for gradients
    def taped(self, tape: Tape, x: np.ndarray, trainable=None):
        trainable = set(self.params) if trainable is None else set(trainable)
        v = {k: (tape.param(a) if k in trainable else tape.const(a)) for k, a in self.params.items()}
        h = tape.dense(tape.const(x), v["proj"], v["proj.bias"])
        for l in range(1, self.arch.n_layers + 1):
            u = tape.activation(tape.dense(h, v[f"{l}.up"], v[f"{l}.up.bias"]), self.arch.activation)
            h = tape.add(h, tape.dense(u, v[f"{l}.down"], v[f"{l}.down.bias"]))
        action = tape.dense(h, v["head.act"], v["head.act.bias"])
        logits = tape.dense(h, v["head.lm"], v["head.lm.bias"])
        return v, action, logits, h

    def loss_and_grads(self, x, y_act, loss: str = "act", action_loss: str = "mse",
                       trainable=None):
        """Loss value and gradients for ``loss`` in {"act", "cls"}."""
        tape = Tape()
        v, action, logits, _ = self.taped(tape, x, trainable)
        if loss == "act":
            out = tape.loss(action_loss, action, y_act)
        elif loss == "cls":
            out = tape.softmax_xent(logits, self.bin_labels(y_act), self.arch.n_bins)
        else:
            raise ValueError(f"unknown loss {loss!r}")
        tape.backward(out)
        grads = {k: (var.grad if var.grad is not None else np.zeros_like(var.value))
                 for k, var in v.items() if var.requires_grad}
        return float(out.value), grads

    def per_sample_grads(self, x, y_act, loss: str = "act", action_loss: str = "mse",
                         names: Optional[List[str]] = None) -> Dict[str, np.ndarray]:
        """(K, numel) flattened per-sample gradients for each named tensor."""
        names = self.quantizable if names is None else names
        rows = {n: [] for n in names}
        for d in range(len(x)):
            _, g = self.loss_and_grads(x[d:d + 1], y_act[d:d + 1], loss, action_loss, names)
            for n in names:
                rows[n].append(g[n].ravel())
        return {n: np.stack(r) for n, r in rows.items()}

    # flat parameter views for finite-difference checks
    def flat(self, names: List[str]) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n in names])

    def unflat(self, names: List[str], theta: np.ndarray) -> "ToyPolicy":
        p, k = dict(self.params), 0
        for n in names:
            size = self.params[n].size
            p[n] = theta[k:k + size].reshape(self.params[n].shape)
            k += size
        return replace(self, params=p)


def init_policy(arch: PolicyArch, seed: int) -> ToyPolicy:
    rng = np.random.default_rng(seed)

    def dense(out, inp, gain=1.0):
        return rng.normal(0.0, gain / np.sqrt(inp), (out, inp)), np.zeros(out)

    p = {}
    p["proj"], p["proj.bias"] = dense(arch.width, arch.in_dim)
    for l in range(1, arch.n_layers + 1):
        p[f"{l}.up"], p[f"{l}.up.bias"] = dense(arch.hidden, arch.width)
        p[f"{l}.down"], p[f"{l}.down.bias"] = dense(arch.width, arch.hidden, 0.5)
    p["head.act"], p["head.act.bias"] = dense(arch.act_dim, arch.width)
    p["head.lm"], p["head.lm.bias"] = dense(arch.act_dim * arch.n_bins, arch.width)
    return ToyPolicy(arch, p)


class Adam:
    def __init__(self, params: Dict[str, np.ndarray], lr: float):
        self.lr, self.t = lr, 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads, lr=None, b1=0.9, b2=0.999, eps=1e-8):
        self.t += 1
        lr = self.lr if lr is None else lr
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mh = self.m[k] / (1 - b1 ** self.t)
            vh = self.v[k] / (1 - b2 ** self.t)
            params[k] = params[k] - lr * mh / (np.sqrt(vh) + eps)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    batch: int = 256
    lr: float = 3e-3
    action_loss: str = "mse"
    target_mse: float = 1e-3
    eval_every: int = 500
    head_steps: int = 3000


def train_policy(task, arch: PolicyArch = PolicyArch(), seed: int = 0,
                 cfg: TrainConfig = TrainConfig()) -> ToyPolicy:
    """Supervised training on oracle actions, then a categorical head probe.

    Phase 1 trains projection, backbone and action head on the action loss
    until held-out MSE drops below ``target_mse`` (checked every
    ``eval_every`` steps) or the step cap. Phase 2 fits the categorical head on
    frozen features so the backbone stays at the action-loss optimum.
    """
    rng = np.random.default_rng(seed)
    policy = init_policy(arch, int(rng.integers(2 ** 31)))
    x_val = task.sample_states(2048, rng)
    y_val = task.oracle_action(x_val)
    body = [k for k in policy.params if not k.startswith("head.lm")]
    opt = Adam({k: policy.params[k] for k in body}, cfg.lr)
    trace = []
    losses = []
    val_mse = float("nan")
    steps_done = 0
    for step in range(1, cfg.steps + 1):
        x = task.sample_states(cfg.batch, rng)
        y = task.oracle_action(x)
        lr = cfg.lr * 0.5 * (1 + np.cos(np.pi * step / cfg.steps))
        loss, g = policy.loss_and_grads(x, y, "act", cfg.action_loss, body)
        losses.append(loss)
        if not np.isfinite(loss) or loss > 1e6:
            raise TrainingDivergedError(f"training diverged at step {step}", losses)
        opt.step(policy.params, g, lr)
        steps_done = step
        if step % cfg.eval_every == 0:
            val_mse = float(np.mean((policy.act(x_val) - y_val) ** 2))
            trace.append((step, loss, val_mse))
            if val_mse < cfg.target_mse:
                break
    head = ["head.lm", "head.lm.bias"]
    hopt = Adam({k: policy.params[k] for k in head}, 1e-2)
    for step in range(cfg.head_steps):
        x = task.sample_states(cfg.batch, rng)
        _, g = policy.loss_and_grads(x, task.oracle_action(x), "cls", trainable=head)
        hopt.step(policy.params, g)
    _, g = policy.loss_and_grads(x_val, y_val, "act", cfg.action_loss, body)
    policy.info = {"seed": seed, "steps": steps_done, "val_mse": val_mse,
                   "grad_inf_norm": float(max(np.abs(v).max() for v in g.values())),
                   "action_loss": cfg.action_loss, "trace": trace}
    return policy


def save_checkpoint(policy: ToyPolicy, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(policy))


def checkpoint_bytes(policy: ToyPolicy) -> bytes:
    """Flat named-tensor binary: magic, version, arch JSON, then float64 tensors."""
    head = json.dumps({"arch": policy.arch.to_dict(),
                       "info": {k: v for k, v in policy.info.items() if k != "trace"}},
                      sort_keys=True, separators=(",", ":")).encode()
    out = [CKPT_MAGIC, struct.pack("<BII", CKPT_VERSION, len(head), len(policy.params)), head]
    for name in sorted(policy.params):
        a = np.asarray(policy.params[name], dtype="<f8")
        nb = name.encode()
        out.append(struct.pack("<I", len(nb)) + nb + struct.pack("<I", a.ndim)
                   + struct.pack(f"<{a.ndim}I", *a.shape) + a.tobytes())
    return b"".join(out)


def load_checkpoint(path) -> ToyPolicy:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointFormatError("bad magic: not a policy checkpoint")
    try:
        version, hlen, count = struct.unpack_from("<BII", buf, 4)
        if version != CKPT_VERSION:
            raise CheckpointFormatError(f"unknown checkpoint version {version}")
        pos = 13
        head = json.loads(buf[pos:pos + hlen])
        pos += hlen
        params = {}
        for _ in range(count):
            (nl,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4:pos + 4 + nl].decode()
            pos += 4 + nl
            (ndim,) = struct.unpack_from("<I", buf, pos)
            shape = struct.unpack_from(f"<{ndim}I", buf, pos + 4)
            pos += 4 + 4 * ndim
            n = int(np.prod(shape))
            if pos + 8 * n > len(buf):
                raise CheckpointFormatError(f"truncated tensor {name}")
            params[name] = np.frombuffer(buf, "<f8", n, pos).reshape(shape).astype(np.float64)
            pos += 8 * n
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        if isinstance(e, CheckpointFormatError):
            raise
        raise CheckpointFormatError(f"corrupt checkpoint: {e}") from None
    return ToyPolicy(PolicyArch(**head["arch"]), params, head.get("info", {}))
