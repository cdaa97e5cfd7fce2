"""A small reverse-mode tape for dense networks.

Ops are recorded in execution order, which is already a topological order, so
``backward`` just replays the recorded closures in reverse. Rows are samples.
"""
from __future__ import annotations

from typing import Callable, List

import numpy as np


class Var:
    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    @property
    def shape(self):
        return self.value.shape


class Tape:
    def __init__(self):
        self._ops: List[Callable[[], None]] = []

    def param(self, value) -> Var:
        return Var(value, requires_grad=True)

    def const(self, value) -> Var:
        return Var(value)

    def _record(self, fn):
        self._ops.append(fn)

    def dense(self, x: Var, w: Var, b: Var = None) -> Var:
        """x @ w.T + b with w of shape (out, in)."""
        val = x.value @ w.value.T
        if b is not None:
            val = val + b.value
        out = Var(val)

        def back():
            g = out.grad
            if g is None:
                return
            if w.requires_grad:
                w.accumulate(g.T @ x.value)
            if b is not None and b.requires_grad:
                b.accumulate(g.sum(axis=0))
            x.accumulate(g @ w.value)
        self._record(back)
        return out

    def add(self, a: Var, c: Var) -> Var:
        out = Var(a.value + c.value)

        def back():
            if out.grad is not None:
                a.accumulate(out.grad)
                c.accumulate(out.grad)
        self._record(back)
        return out

    def tanh(self, x: Var) -> Var:
        t = np.tanh(x.value)
        out = Var(t)

        def back():
            if out.grad is not None:
                x.accumulate(out.grad * (1.0 - t * t))
        self._record(back)
        return out

    def relu(self, x: Var) -> Var:
        m = x.value > 0
        out = Var(np.where(m, x.value, 0.0))

        def back():
            if out.grad is not None:
                x.accumulate(out.grad * m)
        self._record(back)
        return out

    def activation(self, x: Var, kind: str) -> Var:
        if kind == "tanh":
            return self.tanh(x)
        if kind == "relu":
            return self.relu(x)
        raise ValueError(f"unknown activation {kind!r}")

    def mse(self, pred: Var, target) -> Var:
        """Mean over samples of the mean squared error over output dims."""
        r = pred.value - target
        out = Var(np.mean(r * r))

        def back():
            pred.accumulate(out.grad * 2.0 * r / r.size)
        self._record(back)
        return out

    def l1(self, pred: Var, target) -> Var:
        r = pred.value - target
        out = Var(np.mean(np.abs(r)))

        def back():
            pred.accumulate(out.grad * np.sign(r) / r.size)
        self._record(back)
        return out

    def softmax_xent(self, logits: Var, labels, n_classes: int) -> Var:
        """Cross-entropy averaged over samples and over the groups of ``n_classes`` logits."""
        n = logits.value.shape[0]
        z = logits.value.reshape(n, -1, n_classes)
        z = z - z.max(axis=2, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=2, keepdims=True))
        labels = np.asarray(labels, dtype=np.int64).reshape(n, -1)
        picked = np.take_along_axis(logp, labels[:, :, None], axis=2)
        out = Var(-picked.mean())

        def back():
            p = np.exp(logp)
            onehot = np.zeros_like(p)
            np.put_along_axis(onehot, labels[:, :, None], 1.0, axis=2)
            g = (p - onehot) / labels.size
            logits.accumulate(out.grad * g.reshape(logits.value.shape))
        self._record(back)
        return out

    def loss(self, kind: str, pred: Var, target) -> Var:
        if kind == "mse":
            return self.mse(pred, target)
        if kind == "l1":
            return self.l1(pred, target)
        raise ValueError(f"unknown action loss {kind!r}")

    def backward(self, out: Var, seed: float = 1.0) -> None:
        out.grad = np.asarray(seed, dtype=np.float64)
        for fn in reversed(self._ops):
            fn()
