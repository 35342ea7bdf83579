"""Dense float64 tensors with reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure that pushes the output gradient back into them. Calling
:meth:`Tensor.backward` on a scalar walks the graph in reverse
topological order, so each node's backward rule runs exactly once.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad: np.ndarray | None = None):
        """Accumulate d(self)/d(leaf) into every reachable tensor that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = topological_order(self)
        _accumulate(self, np.asarray(grad, dtype=DTYPE))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _result(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (),
                  _backward=backward if needs else None)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after all of its parents.

    This list is the computation tape: replaying it backwards visits each node once.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: _accumulate(a, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _result(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: _accumulate(a, g * c))


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return _result(np.where(on, a.data, 0.0), (a,), lambda g: _accumulate(a, g * on))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner
        _accumulate(a, g * d)

    return _result(out, (a,), backward)


# ---------------------------------------------------------------------------
# shape and indexing


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(a.shape)))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: _accumulate(a, g.transpose(inverse)))


def index(a: Tensor, key) -> Tensor:
    """Basic numpy indexing (slices and integers), e.g. ``index(h, (slice(None), 0))``."""

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] += g
        _accumulate(a, full)

    return _result(a.data[key], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; ids outside ``[0, rows)`` raise IndexError."""
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        bad = int(ids.max() if ids.max() >= rows else ids.min())
        raise IndexError(f"token id {bad} outside vocabulary of size {rows}")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _accumulate(table, full)

    return _result(table.data[ids], (table,), backward)


def unfold(x: Tensor, width: int) -> Tensor:
    """Sliding windows over axis 1 of ``[B, T, E]``, zero-padded at the end.

    Returns ``[B, T, width*E]`` where row ``t`` holds positions ``t..t+width-1``.
    """
    b, t, e = x.shape
    padded = np.concatenate([x.data, np.zeros((b, width - 1, e))], axis=1)
    out = np.concatenate([padded[:, j:j + t, :] for j in range(width)], axis=2)

    def backward(g):
        gp = np.zeros((b, t + width - 1, e))
        for j in range(width):
            gp[:, j:j + t, :] += g[:, :, j * e:(j + 1) * e]
        _accumulate(x, gp[:, :t, :])

    return _result(out, (x,), backward)


# ---------------------------------------------------------------------------
# reductions and linear algebra


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _result(a.data.sum(), (a,), lambda g: _accumulate(a, np.broadcast_to(g, a.shape)))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _result(a.data.mean(), (a,), lambda g: _accumulate(a, np.broadcast_to(g / n, a.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Supports ``[m,k]@[k,n]``, ``[...,m,k]@[k,n]`` and batched ``[...,m,k]@[...,k,n]``
    with identical batch dimensions.
    """
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions disagree for shapes {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                k = a.shape[-1]
                _accumulate(b, a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
            else:
                _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return _result(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add(out, b)


def masked_max(x: Tensor, mask) -> Tensor:
    """Max over axis 1 of ``[B, T, F]`` considering only positions where ``mask[b, t]`` is 1.

    Ties route the gradient to the first maximal position.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:2]:
        raise ShapeError(f"masked_max: mask shape {mask.shape} does not match {x.shape[:2]}")
    if not mask.any(axis=1).all():
        raise ContractError("masked_max: every row needs at least one unmasked position")
    filled = np.where(mask[:, :, None], x.data, -np.inf)
    arg = filled.argmax(axis=1)  # [B, F]
    out = np.take_along_axis(x.data, arg[:, None, :], axis=1)[:, 0, :]

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, arg[:, None, :], g[:, None, :], axis=1)
        _accumulate(x, full)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------------------
# normalisation and probabilities


def softmax_array(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax needs at least one class")
    s = softmax_array(x.data)

    def backward(g):
        _accumulate(x, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _result(s, (x,), backward)


def log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B, C] logits, got {logits.shape}")
    n, c = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: {targets.shape[0] if targets.ndim else 0} targets for {n} rows")
    if n and (targets.min() < 0 or targets.max() >= c):
        raise IndexError(f"target class out of range [0, {c})")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        _accumulate(logits, g * d / n)

    return _result(loss, (logits,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _accumulate(beta, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accumulate(x, dx)

    return _result(out, (x, gamma, beta), backward)


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity in eval mode or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ContractError("train-mode dropout needs an explicit generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: _accumulate(x, g * keep))


# ---------------------------------------------------------------------------
# verification


def grad_check(f: Callable[..., Tensor], inputs: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f`` is called with the input tensors and must return a single-element tensor.
    Relative error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if out.data.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        a = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f(*inputs).item()
            flat[i] = orig - eps
            down = f(*inputs).item()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            err = abs(a[i] - num) / max(1e-8, abs(a[i]) + abs(num))
            worst = max(worst, err)
    return worst
