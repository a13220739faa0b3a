"""Minimal float64 tensor with reverse-mode automatic differentiation.

Every layer in the package is composed from the primitives defined here.
A primitive computes its forward value with numpy and attaches a closure
that maps the output gradient to one gradient per parent.  ``backward``
linearises the graph into a :class:`ComputationTape` and replays it in
reverse.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        ComputationTape(self).backward(np.asarray(grad, dtype=DTYPE))

    # operator sugar
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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class ComputationTape:
    """Topologically ordered record of the nodes that lead to ``root``.

    Only nodes that require a gradient are recorded.  ``backward`` walks the
    record in reverse, so every node is visited exactly once and a node that
    feeds several consumers receives the sum of their contributions before
    it propagates further.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        if not root.requires_grad:
            return
        seen = {id(root)}
        stack = [(root, iter(root._parents))]
        while stack:
            node, parents = stack[-1]
            advanced = False
            for p in parents:
                if p.requires_grad and id(p) not in seen:
                    seen.add(id(p))
                    stack.append((p, iter(p._parents)))
                    advanced = True
                    break
            if not advanced:
                stack.pop()
                self.nodes.append(node)

    def backward(self, seed: np.ndarray) -> None:
        if not self.nodes:
            return
        if seed.shape != self.root.shape:
            raise ShapeError(f"seed gradient {seed.shape} does not match output {self.root.shape}")
        # interior gradients are kept private so leaves alone accumulate across calls
        grads: dict[int, np.ndarray] = {id(self.root): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _const(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


@contextmanager
def track_relu_margin():
    """Record the smallest ``|input|`` seen by :func:`relu` on this thread.

    Yields a one-element list holding the running minimum (``inf`` if no
    ReLU ran); finite-difference checks use it to avoid kinks.
    """
    prev = getattr(_state, "relu_margin", None)
    box = [np.inf]
    _state.relu_margin = box
    try:
        yield box
    finally:
        _state.relu_margin = prev


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at exactly 0 is 0."""
    active = x.data > 0
    box = getattr(_state, "relu_margin", None)
    if box is not None and x.data.size:
        box[0] = min(box[0], float(np.abs(x.data).min()))
    return _make(np.where(active, x.data, 0.0), (x,), lambda g: (g * active,))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def broadcast_to(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(np.broadcast_to(x.data, shape), (x,), lambda g: (_unbroadcast(g, src),))


def concat_last_dim(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis, preserving order."""
    parts = [_const(p) for p in parts]
    if not parts:
        raise ShapeError("concat_last_dim needs at least one part")
    if len(parts) == 1:
        return parts[0]
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeError(
                f"concat_last_dim: leading shapes differ, {parts[0].shape} vs {p.shape}"
            )
    bounds = np.cumsum([p.shape[-1] for p in parts])[:-1]
    out = np.concatenate([p.data for p in parts], axis=-1)
    return _make(out, parts, lambda g: tuple(np.split(g, bounds, axis=-1)))


def shift(x: Tensor, offset: int, axis: int = 1) -> Tensor:
    """Return ``y`` with ``y[..., t, ...] = x[..., t + offset, ...]``.

    Indices that fall outside the axis read as zero.
    """
    axis = axis % x.ndim
    size = x.shape[axis]
    out = np.zeros_like(x.data)
    if offset == 0:
        return x
    if abs(offset) >= size:
        return _make(out, (x,), lambda g: (np.zeros_like(g),))
    dst = [slice(None)] * x.ndim
    src = [slice(None)] * x.ndim
    if offset > 0:
        dst[axis], src[axis] = slice(0, size - offset), slice(offset, size)
    else:
        dst[axis], src[axis] = slice(-offset, size), slice(0, size + offset)
    dst, src = tuple(dst), tuple(src)
    out[dst] = x.data[src]

    def backward(g):
        gx = np.zeros_like(g)
        gx[src] = g[dst]
        return (gx,)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------- reductions


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    src = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _make(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes with broadcasting."""
    a, b = _const(a), _const(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                # fold batch axes into rows: one large GEMM instead of a batched one
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


# ---------------------------------------------------------------- normalisation


def softmax_last_dim(x: Tensor, visible=None) -> Tensor:
    """Softmax over the last axis.

    ``visible`` is an optional boolean array broadcastable to ``x``; hidden
    entries get probability exactly 0.  A row with no visible entry raises.
    """
    z = x.data
    if visible is not None:
        visible = np.broadcast_to(np.asarray(visible, dtype=bool), z.shape)
        if not visible.any(axis=-1).all():
            raise ValueError("softmax_last_dim: a row is fully masked")
        z = np.where(visible, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), backward)


def log_softmax_last_dim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _make(y, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, x.shape[-1]).sum(axis=0)
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), backward)


def masked_max_pool(x: Tensor, pad_mask=None) -> Tensor:
    """Per-feature max over axis 1 of ``x[B, L, D]``, skipping padded positions.

    The gradient goes to the first argmax position.  A row whose positions
    are all padded pools to a zero vector.
    """
    B, L, D = x.shape
    data = x.data
    empty = np.zeros(B, dtype=bool)
    if pad_mask is not None:
        pad_mask = np.asarray(pad_mask, dtype=bool)
        data = np.where(pad_mask[:, :, None], -np.inf, data)
        empty = pad_mask.all(axis=1)
    arg = data.argmax(axis=1)  # first occurrence on ties
    out = np.take_along_axis(data, arg[:, None, :], axis=1)[:, 0, :]
    out[empty] = 0.0

    def backward(g):
        gx = np.zeros((B, L, D))
        g = np.where(empty[:, None], 0.0, g)
        np.put_along_axis(gx, arg[:, None, :], g[:, None, :], axis=1)
        return (gx,)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------- indexing


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; repeated ids accumulate gradient."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _make(table.data[ids], (table,), backward)


def pick_last_dim(x: Tensor, index) -> Tensor:
    """Gather ``x[..., index[...]]`` so the result has shape ``index.shape``."""
    index = np.asarray(index)
    out = np.take_along_axis(x.data, index[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, index[..., None], g[..., None], axis=-1)
        return (gx,)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------- verification


def grad_check(
    f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5
) -> float:
    """Largest relative error between autodiff and central differences.

    ``f`` is re-evaluated with each coordinate of each parameter nudged by
    ``±eps``; the error per coordinate is
    ``|a - fd| / max(|a|, |fd|, 1e-8)``.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
        p.requires_grad = True
    out = f()
    if out.data.size != 1:
        raise ValueError("grad_check: f must return a scalar")
    if not np.isfinite(out.data).all():
        raise FloatingPointError("grad_check: f is not finite")
    out.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError("grad_check: f is not finite near the test point")
            fd = (up - down) / (2 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst
