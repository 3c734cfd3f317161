"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap contiguous numpy arrays (row-major). Every operation records a
backward closure; `backward()` on a scalar loss walks the recorded graph in
reverse topological order and populates `.grad` on every reachable tensor
that requires gradients. Storage defaults to float32; `use_dtype(np.float64)`
switches new tensors to 64-bit, which gradient checks rely on.

Non-finite values are a hard error: every op output is screened and raises
`NumericError` as soon as a NaN/Inf appears, naming the operation.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def use_dtype(dtype):
    """Temporarily switch the storage dtype for newly created tensors."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextmanager
def no_grad():
    """Disable graph recording; ops inside produce constant tensors."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _assert_finite(arr: np.ndarray, what: str) -> None:
    # One fused reduction; Inf/NaN poison the sum, so a finite sum over
    # O(1)-scale activations certifies the array.
    if not math.isfinite(float(arr.sum())):
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_spent")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        if isinstance(data, Tensor):
            raise ContractError("wrap raw arrays, not tensors")
        arr = np.asarray(data, dtype=_DEFAULT_DTYPE if _backward is None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(_DEFAULT_DTYPE)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if _backward is None:
            _assert_finite(arr, "tensor data")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        self._spent = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray, own: bool = False) -> None:
        # own=True promises g is not aliased by any other accumulation
        # target, so the first consumer may keep it without copying.
        if self.grad is None:
            if own and g.dtype == self.data.dtype:
                self.grad = g
            else:
                self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate gradients of every reachable tensor with requires_grad.

        Only scalar roots are differentiable; running backward twice on the
        same recorded graph is an error (the closures are single-use).
        """
        if self.data.shape != ():
            raise ContractError("backward requires a scalar tensor")
        if not self.requires_grad:
            raise ContractError("backward on a tensor recorded outside the graph")
        if self._spent:
            raise ContractError("backward already ran on this graph; redo the forward pass")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self._accumulate(np.ones((), dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)
                node._spent = True
        self._spent = True

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)


def _as_constant(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=_DEFAULT_DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if squeeze:
        grad = grad.sum(axis=squeeze, keepdims=True)
    return grad


def _make(data: np.ndarray, parents, backward, op: str, check: bool = True) -> Tensor:
    # Structural ops (check=False) cannot create non-finite values from
    # finite inputs; any Inf/NaN they carry came from a checked producer or
    # will poison the next checked reduction, so the hard-error contract
    # still holds at every op boundary that can actually fail.
    if check:
        _assert_finite(data, f"output of {op}")
    needs = _GRAD_ENABLED and any(isinstance(p, Tensor) and p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    tparents = tuple(p for p in parents if isinstance(p, Tensor) and p.requires_grad)
    return Tensor(data, requires_grad=True, _parents=tparents, _backward=backward)


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    ad, bd = (a.data if isinstance(a, Tensor) else _as_constant(a)), (b.data if isinstance(b, Tensor) else _as_constant(b))
    out = ad + bd

    def backward(g):
        if isinstance(a, Tensor) and a.requires_grad:
            ga = _unbroadcast(g, ad.shape)
            a._accumulate(ga, own=ga is not g)
        if isinstance(b, Tensor) and b.requires_grad:
            gb = _unbroadcast(g, bd.shape)
            b._accumulate(gb, own=gb is not g)

    return _make(out, (a, b), backward, "add", check=False)


def mul(a, b) -> Tensor:
    ad, bd = (a.data if isinstance(a, Tensor) else _as_constant(a)), (b.data if isinstance(b, Tensor) else _as_constant(b))
    out = ad * bd

    def backward(g):
        if isinstance(a, Tensor) and a.requires_grad:
            a._accumulate(_unbroadcast(g * bd, ad.shape), own=True)
        if isinstance(b, Tensor) and b.requires_grad:
            b._accumulate(_unbroadcast(g * ad, bd.shape), own=True)

    return _make(out, (a, b), backward, "mul", check=False)


def silu(x: Tensor) -> Tensor:
    xd = x.data
    # exp of a non-positive argument, split by sign, keeps this stable.
    e = np.exp(-np.abs(xd))
    sig = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = xd * sig

    def backward(g):
        x._accumulate(g * (sig * (1.0 + xd * (1.0 - sig))), own=True)

    return _make(out, (x,), backward, "silu")


# -- shape ---------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape
    out = x.data.reshape(shape)

    def backward(g):
        x._accumulate(g.reshape(old), own=True)

    return _make(out, (x,), backward, "reshape", check=False)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def backward(g):
        x._accumulate(g.transpose(inverse), own=True)

    return _make(out, (x,), backward, "transpose", check=False)


def concat(tensors, axis: int) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)], own=True)

    return _make(out, tuple(tensors), backward, "concat", check=False)


# -- reductions ------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.data.shape))

    return _make(out, (x,), backward, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs rank>=2 operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape), own=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape), own=True)

    return _make(out, (a, b), backward, "matmul")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(f"token id out of range [0, {table.data.shape[0]})")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        table._accumulate(gt, own=True)

    return _make(out, (table,), backward, "embedding", check=False)


# -- normalization & probabilistic heads ------------------------------------


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    xd = x.data
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    normed = xd * inv
    out = normed * gain.data

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * normed).reshape(-1, xd.shape[-1]).sum(axis=0), own=True)
        if x.requires_grad:
            gg = g * gain.data
            n = xd.shape[-1]
            dot = (gg * xd).sum(axis=-1, keepdims=True)
            x._accumulate(inv * (gg - xd * (inv * inv / n) * dot), own=True)

    return _make(out, (x, gain), backward, "rms_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    if xd.size == 0:
        raise ShapeError("softmax on empty input")
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        x._accumulate(out * (g - dot), own=True)

    return _make(out, (x,), backward, "softmax")


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_id: int) -> Tensor:
    """Mean negative log-softmax probability of targets over non-ignored rows."""
    ld = logits.data
    if ld.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N, V) logits, got {ld.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (ld.shape[0],):
        raise ShapeError(f"targets shape {targets.shape} does not match logits rows {ld.shape[0]}")
    valid = targets != ignore_id
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ContractError("cross_entropy batch has every position ignored")
    checked = targets[valid]
    if checked.min() < 0 or checked.max() >= ld.shape[1]:
        raise IndexError(f"target id out of range [0, {ld.shape[1]})")

    shifted = ld - ld.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.nonzero(valid)[0]
    loss = -logp[rows, targets[rows]].sum() / n_valid
    out = np.asarray(loss, dtype=ld.dtype)

    def backward(g):
        grad = np.exp(logp)
        grad[rows, targets[rows]] -= 1.0
        grad[~valid] = 0.0
        grad *= float(g) / n_valid
        logits._accumulate(grad, own=True)

    return _make(out, (logits,), backward, "cross_entropy")


def softmax_probs(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain-array stabilized softmax for inference paths."""
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)
