"""Tensor with a recorded gradient tape and the elementwise / reduction operators."""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when an operator precondition or postcondition is violated."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


_CHECK_FINITE = False


def set_finite_checks(enabled: bool) -> None:
    """Check every op output for NaN/Inf (slow; off by default, losses are always checked)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class Tensor:
    """N-dimensional float array with an optional gradient buffer.

    Data is float32 unless ``dtype=np.float64`` is passed explicitly (used by the
    finite-difference checks). Operators preserve the dtype of their inputs.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(data, dtype=np.float32 if dtype is None else dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, requires_grad=self.requires_grad, dtype=dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def _raise_scalar(shape):
    raise ContractError(f"item() needs a single-element tensor, got shape {shape}")


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x), dtype=dtype)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result, recording the tape entry when any parent needs gradients."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise ContractError("non-finite value produced in forward pass")
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from exc


# -- elementwise arithmetic --------------------------------------------------
def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting (covers C×1×1 and 1×H×W gates)."""
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b),
                       lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


mul_broadcast = mul


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return make_result(out, (a, b),
                       lambda g: (_unbroadcast(g / bd, ad.shape),
                                  _unbroadcast(-g * out / bd, bd.shape)))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return make_result(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).astype(a.dtype, copy=True),)

    return make_result(out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- activations -------------------------------------------------------------
def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function, clamped one ulp inside (0, 1) so the output never saturates."""
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    tiny = np.finfo(x.dtype).epsneg
    np.clip(out, tiny, 1.0 - tiny, out=out)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1.0 - out * out),))


# -- structural --------------------------------------------------------------
def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = list(tensors)
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != 4 or t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ShapeError(f"concat_channels: incompatible shapes {base} and {t.shape}")
    sizes = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return make_result(np.concatenate([t.data for t in tensors], axis=1), tensors, bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x: N×F_in, weight: F_out×F_in, bias: F_out."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, bw)


# -- reductions --------------------------------------------------------------
def _max_with_first_index(x: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    idx = np.argmax(x, axis=axis)  # first occurrence on ties
    val = np.take_along_axis(x, np.expand_dims(idx, axis), axis=axis)
    return val, idx


def global_avg_pool(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3), keepdims=True)


def global_max_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    val, idx = _max_with_first_index(flat, axis=2)

    def bw(g):
        grad = np.zeros_like(flat)
        np.put_along_axis(grad, idx[..., None], g.reshape(n, c, 1), axis=2)
        return (grad.reshape(n, c, h, w),)

    return make_result(val.reshape(n, c, 1, 1), (x,), bw)


def channel_avg_pool(x: Tensor) -> Tensor:
    return mean(x, axis=1, keepdims=True)


def channel_max_pool(x: Tensor) -> Tensor:
    xd = x.data
    val, idx = _max_with_first_index(xd, axis=1)

    def bw(g):
        grad = np.zeros_like(xd)
        np.put_along_axis(grad, idx[:, None], g, axis=1)
        return (grad,)

    return make_result(val, (x,), bw)


_POOLS = {
    "global_avg": global_avg_pool,
    "global_max": global_max_pool,
    "channel_avg": channel_avg_pool,
    "channel_max": channel_max_pool,
}


def pooled_reduction(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _POOLS[kind]
    except KeyError:
        raise ValueError(f"unknown reduction kind {kind!r}; expected one of {sorted(_POOLS)}") from None
    if x.ndim != 4:
        raise ShapeError(f"{kind} expects N×C×H×W input, got {x.shape}")
    return fn(x)


# -- normalization -----------------------------------------------------------
def batchnorm2d(x: Tensor, gamma: Tensor | None, beta: Tensor | None,
                running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization. In training mode updates running stats in place."""
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects N×C×H×W input, got {x.shape}")
    xd = x.data
    c = x.shape[1]
    if training:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        m = xd.size // c
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    mu = mu.astype(xd.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu[None, :, None, None]) * inv_std[None, :, None, None]
    g = gamma.data if gamma is not None else np.ones(c, dtype=xd.dtype)
    b = beta.data if beta is not None else np.zeros(c, dtype=xd.dtype)
    out = xhat * g[None, :, None, None] + b[None, :, None, None]

    def bw(go):
        dgamma = (go * xhat).sum(axis=(0, 2, 3))
        dbeta = go.sum(axis=(0, 2, 3))
        dxhat = go * g[None, :, None, None]
        if training:
            m = xd.size // c
            dx = (inv_std[None, :, None, None] / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            dx = dxhat * inv_std[None, :, None, None]
        grads = [dx]
        if gamma is not None:
            grads += [dgamma, dbeta]
        return grads

    parents = (x,) if gamma is None else (x, gamma, beta)
    return make_result(out, parents, bw)


# -- losses (fused for numerical safety) --------------------------------------
def binary_cross_entropy(pred: Tensor, target: np.ndarray, eps: float = 1e-7) -> Tensor:
    """Mean of -[g ln p + (1-g) ln(1-p)] with p clipped to [eps, 1-eps]."""
    p = pred.data
    g = np.asarray(target, dtype=p.dtype).reshape(p.shape)
    # Clip in float64 so 1 - eps stays distinct from 1 for float32 inputs.
    pc = np.clip(p.astype(np.float64), eps, 1.0 - eps)
    losses = -(g * np.log(pc) + (1.0 - g) * np.log1p(-pc))
    out = np.asarray(losses.mean(), dtype=p.dtype)
    inside = ((p >= eps) & (p <= 1.0 - eps)).astype(np.float64)
    n = p.size

    def bw(go):
        d = (-(g / pc) + (1.0 - g) / (1.0 - pc)) * inside / n
        return ((go * d).astype(p.dtype),)

    return make_result(out, (pred,), bw)


# -- backward ----------------------------------------------------------------
def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Populate ``.grad`` of every leaf reachable from ``loss``; accumulates across calls."""
    if grad is None:
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype).reshape(loss.shape)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=node.dtype, copy=True)
            else:
                node.grad += g
            if not np.all(np.isfinite(node.grad)):
                raise ContractError("non-finite gradient reached a leaf tensor")
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=p.dtype)
            if pg.shape != p.shape:
                pg = pg.reshape(p.shape)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
