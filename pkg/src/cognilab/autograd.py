"""Dense float64 tensors with a reverse-mode tape.

Every op is a method on :class:`Tape`, which records the op (when any input
requires a gradient) together with a closure mapping the output gradient to
input gradients. ``Tape.backward`` walks the recorded nodes once, in reverse.
A tape is meant to be used from a single thread; build one tape per forward
pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)


class AutogradError(ValueError):
    pass


class Tensor:
    """A float64 array plus gradient bookkeeping.

    ``data`` is a C-contiguous numpy array; ``data.ravel()`` is the row-major
    flat view.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise AutogradError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise AutogradError(f"non-finite values produced by {op}")
    return arr


class Tape:
    """Records primitive ops in execution order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: list[Tensor] = []

    # -- leaves -----------------------------------------------------------
    def watch(self, t: Tensor) -> Tensor:
        """Register a leaf so ``backward`` always assigns it a gradient."""
        t.requires_grad = True
        self.leaves.append(t)
        return t

    def param(self, data) -> Tensor:
        return self.watch(Tensor(data))

    def const(self, data) -> Tensor:
        return Tensor(data)

    def _record(self, out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp, op: str) -> Tensor:
        out = Tensor(_check_finite(out_data, op))
        if any(t.requires_grad for t in inputs):
            out.requires_grad = True
            self.nodes.append(_Node(out, inputs, vjp))
        return out

    # -- elementwise ------------------------------------------------------
    def add(self, a: Tensor, b: Tensor) -> Tensor:
        sa, sb = a.shape, b.shape
        return self._record(
            a.data + b.data, (a, b),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        sa, sb = a.shape, b.shape
        return self._record(
            a.data - b.data, (a, b),
            lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        sa, sb = a.shape, b.shape
        ad, bd = a.data, b.data
        return self._record(
            ad * bd, (a, b),
            lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)), "mul")

    def scale(self, a: Tensor, c: float) -> Tensor:
        return self._record(a.data * c, (a,), lambda g: (g * c,), "scale")

    def gelu(self, x: Tensor) -> Tensor:
        """tanh-approximated GELU (GPT-2 variant)."""
        xd = x.data
        x2 = xd * xd
        inner = _GELU_C * xd * (1.0 + 0.044715 * x2)
        th = np.tanh(inner)
        out = 0.5 * xd * (1.0 + th)

        def vjp(g):
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
            return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

        return self._record(out, (x,), vjp, "gelu")

    # -- shape ------------------------------------------------------------
    def reshape(self, x: Tensor, shape: tuple[int, ...]) -> Tensor:
        old = x.shape
        return self._record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")

    def transpose(self, x: Tensor, axes: tuple[int, ...]) -> Tensor:
        inv = tuple(np.argsort(axes))
        return self._record(
            np.ascontiguousarray(x.data.transpose(axes)), (x,),
            lambda g: (g.transpose(inv),), "transpose")

    def select(self, x: Tensor, i: int) -> Tensor:
        """``x[i]`` along the leading axis."""
        shape = x.shape

        def vjp(g):
            out = np.zeros(shape)
            out[i] = g
            return (out,)

        return self._record(x.data[i].copy(), (x,), vjp, "select")

    def sum(self, x: Tensor) -> Tensor:
        shape = x.shape
        return self._record(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")

    # -- linear algebra ---------------------------------------------------
    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        """``a[..., n, k] @ b`` where b is ``[k, m]`` or batched like a."""
        ad, bd = a.data, b.data
        if bd.ndim == 2:
            def vjp(g):
                ga = g @ bd.T
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                return ga, gb
        else:
            if ad.shape[:-2] != bd.shape[:-2]:
                raise AutogradError(f"batched matmul shape mismatch {ad.shape} @ {bd.shape}")

            def vjp(g):
                return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g
        if ad.shape[-1] != bd.shape[-2]:
            raise AutogradError(f"matmul inner dimension mismatch {ad.shape} @ {bd.shape}")
        return self._record(ad @ bd, (a, b), vjp, "matmul")

    def embedding(self, table: Tensor, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        v = table.shape[0]
        if ids.size and (ids.min() < 0 or ids.max() >= v):
            raise AutogradError("embedding index out of range")

        def vjp(g):
            gt = np.zeros(table.shape)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            return (gt,)

        return self._record(table.data[ids], (table,), vjp, "embedding")

    # -- normalisers ------------------------------------------------------
    def softmax(self, x: Tensor, additive_mask: np.ndarray | None = None) -> Tensor:
        """Softmax over the last axis; ``additive_mask`` may hold ``-inf``."""
        if x.shape[-1] < 1:
            raise AutogradError("softmax over empty dimension")
        z = x.data if additive_mask is None else x.data + additive_mask
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=-1, keepdims=True)

        def vjp(g):
            return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

        return self._record(p, (x,), vjp, "softmax")

    def layer_norm(self, x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
        xd = x.data
        n = xd.shape[-1]
        mu = xd.mean(axis=-1, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * rstd
        gd = gamma.data

        def vjp(g):
            gg = _unbroadcast(g * xhat, gamma.shape)
            gb = _unbroadcast(g, beta.shape)
            dxhat = g * gd
            gx = rstd / n * (n * dxhat - dxhat.sum(-1, keepdims=True)
                             - xhat * (dxhat * xhat).sum(-1, keepdims=True))
            return gx, gg, gb

        return self._record(xhat * gd + beta.data, (x, gamma, beta), vjp, "layer_norm")

    # -- losses -----------------------------------------------------------
    def weighted_nll(self, logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
        """``sum_t weights[t] * -log softmax(logits[t])[targets[t]]``."""
        ld = logits.data
        v = ld.shape[-1]
        targets = np.asarray(targets, dtype=np.int64)
        weights = np.asarray(weights, dtype=np.float64)
        if targets.shape != ld.shape[:-1] or weights.shape != targets.shape:
            raise AutogradError("targets/weights must match logits leading shape")
        live = weights != 0
        if np.any(live & ((targets < 0) | (targets >= v))):
            raise AutogradError("target id out of range")
        safe = np.where(live, targets, 0)
        z = ld - ld.max(axis=-1, keepdims=True)
        logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        logp = z - logz
        picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
        loss = -(weights * picked).sum()

        def vjp(g):
            p = np.exp(logp)
            onehot = np.zeros_like(p)
            np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
            return (g * weights[..., None] * (p - onehot),)

        return self._record(np.array(loss), (logits,), vjp, "weighted_nll")

    def cross_entropy(self, logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
        """Mean negative log-likelihood over unmasked positions."""
        targets = np.asarray(targets, dtype=np.int64)
        mask = np.ones(targets.shape, bool) if mask is None else np.asarray(mask, bool)
        count = int(mask.sum())
        if count == 0:
            raise AutogradError("cross_entropy: every position is masked")
        v = logits.shape[-1]
        if np.any(mask & ((targets < 0) | (targets >= v))):
            raise AutogradError("target id out of range")
        return self.weighted_nll(logits, targets, mask / count)

    # -- reverse pass -----------------------------------------------------
    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor that requires it.

        Watched leaves that the loss does not depend on get a zero gradient.
        Gradients add to whatever is already stored, so calling this twice
        doubles them.
        """
        if loss.data.size != 1 or loss.data.ndim != 0:
            raise AutogradError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
        touched: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            node.out.grad = g if node.out.grad is None else node.out.grad + g
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
                touched[key] = inp
        for key, g in grads.items():
            t = touched[key]
            t.grad = g.copy() if t.grad is None else t.grad + g
        for leaf in self.leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)


def softmax_rows(x) -> np.ndarray:
    """Numerically stable softmax over the trailing axis of a plain array."""
    t = Tape()
    return t.softmax(Tensor(x)).data


def cross_entropy_loss(logits, targets, mask=None) -> float:
    t = Tape()
    return t.cross_entropy(Tensor(logits), targets, mask).item()


def finite_difference_check(
    f: Callable[[Tape, Tensor], Tensor],
    x,
    h: float = 1e-5,
    indices: Sequence[int] | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f(tape, x)`` must build a scalar on ``tape``. ``indices`` selects flat
    coordinates to probe (default: all). Error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if h <= 0:
        raise AutogradError("step h must be positive")
    x0 = np.array(x, dtype=np.float64)
    tape = Tape()
    xt = tape.watch(Tensor(x0.copy()))
    out = f(tape, xt)
    tape.backward(out)
    analytic = xt.grad.reshape(-1)

    def value(arr):
        v = f(Tape(), Tensor(arr)).item()
        if not math.isfinite(v):
            raise AutogradError("non-finite function value during finite differencing")
        return v

    idx = range(x0.size) if indices is None else indices
    worst = 0.0
    flat = x0.reshape(-1)
    for i in idx:
        plus = flat.copy()
        plus[i] += h
        minus = flat.copy()
        minus[i] -= h
        numeric = (value(plus.reshape(x0.shape)) - value(minus.reshape(x0.shape))) / (2 * h)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst
