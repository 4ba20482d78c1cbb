"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every primitive records its parents and a closure mapping the output adjoint
to parent adjoints. Nodes that do not depend on any ``requires_grad`` leaf
record nothing, so frozen subgraphs cost a plain numpy evaluation.

Broadcasting is deliberately limited to python scalars and row-wise bias
addition (``m×n + n``); any other shape disagreement raises
:class:`~read_pvla.errors.DimensionError`.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, NumericError

GELU_C = math.sqrt(2.0 / math.pi)
ACTIVATIONS = ("gelu", "tanh", "sigmoid", "relu")

_recording = contextvars.ContextVar("read_pvla_recording", default=True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording any graph (outputs never require grad)."""
    token = _recording.set(False)
    try:
        yield
    finally:
        _recording.reset(token)


class Tensor:
    """Dense float64 array with an optional recorded gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of a primitive.

    ``backward_fn(grad_out)`` must return one adjoint (or ``None``) per parent.
    Custom differentiable primitives outside this module are built with it.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = _recording.get() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = tuple(parents) if needs else ()
    out._backward = backward_fn if needs else None
    return out


# elementwise -----------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        return record(a.data + b, (a,), lambda g: (g,))
    b = as_tensor(b)
    if a.shape == b.shape:
        return record(a.data + b.data, (a, b), lambda g: (g, g))
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return record(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return add(a, -b)
    return add(a, neg(b))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        c = float(b)
        return record(a.data * c, (a,), lambda g: (g * c,))
    b = as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def activation(kind: str, x) -> Tensor:
    """Elementwise nonlinearity; GELU uses the tanh approximation."""
    x = as_tensor(x)
    v = x.data
    if kind == "gelu":
        u = GELU_C * (v + 0.044715 * v**3)
        t = np.tanh(u)
        y = 0.5 * v * (1.0 + t)
        dy = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * v * v)
    elif kind == "tanh":
        y = np.tanh(v)
        dy = 1.0 - y * y
    elif kind == "sigmoid":
        y = 0.5 * (1.0 + np.tanh(0.5 * v))
        dy = y * (1.0 - y)
    elif kind == "relu":
        y = np.maximum(v, 0.0)
        dy = (v > 0).astype(np.float64)
    else:
        raise ConfigError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")
    return record(y, (x,), lambda g: (g * dy,))


def gelu(x) -> Tensor:
    return activation("gelu", x)


def tanh(x) -> Tensor:
    return activation("tanh", x)


def sigmoid(x) -> Tensor:
    return activation("sigmoid", x)


# linear algebra and shape ----------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return record(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return record(y, (a,), lambda g: (g.reshape(old),))


def rows(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    n = a.shape[0]
    if not 0 <= start < stop <= n:
        raise DimensionError(f"rows[{start}:{stop}] out of range for shape {a.shape}")

    def back(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return record(a.data[start:stop].copy(), (a,), back)


def cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2 or not 0 <= start < stop <= a.shape[1]:
        raise DimensionError(f"cols[{start}:{stop}] out of range for shape {a.shape}")

    def back(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return record(a.data[:, start:stop].copy(), (a,), back)


def concat_rows(parts: Iterable[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    widths = {p.shape[1:] for p in parts}
    if len(widths) != 1:
        raise DimensionError(f"concat_rows: mismatched trailing shapes {sorted(widths)}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    return record(
        np.concatenate([p.data for p in parts], axis=0),
        parts,
        lambda g: tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts))),
    )


def concat_cols(parts: Iterable[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    heights = {p.shape[0] for p in parts}
    if len(heights) != 1 or any(p.data.ndim != 2 for p in parts):
        raise DimensionError(f"concat_cols: mismatched shapes {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    return record(
        np.concatenate([p.data for p in parts], axis=1),
        parts,
        lambda g: tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts))),
    )


# reductions --------------------------------------------------------------------


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return record(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.size
    return record(np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def mean_rows(a) -> Tensor:
    """Average over the sequence axis, keeping a leading extent of 1."""
    a = as_tensor(a)
    n = a.shape[0]
    return record(
        a.data.mean(axis=0, keepdims=True), (a,), lambda g: (np.repeat(g / n, n, axis=0),)
    )


def inner(a, weights: np.ndarray) -> Tensor:
    """Frobenius product with a constant array, ``sum(a * weights)``."""
    a = as_tensor(a)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != a.shape:
        raise DimensionError(f"inner: incompatible shapes {a.shape} and {w.shape}")
    return record(np.array((a.data * w).sum()), (a,), lambda g: (float(g) * w,))


# normalisation and losses -------------------------------------------------------


def softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    v = x.data
    if np.isnan(v).any():
        raise NumericError("softmax_rows: NaN in input")
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return record(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def layer_norm(x, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Row-wise normalisation by population variance, then ``gain``/``bias`` affine."""
    x = as_tensor(x)
    if eps < 0:
        raise ConfigError(f"layer_norm: eps must be non-negative, got {eps}")
    v = x.data
    n = v.shape[-1]
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    denom = (xc * xc).mean(axis=-1, keepdims=True) + eps
    if (denom <= 0).any():
        raise NumericError("layer_norm: zero variance with eps=0 (division by zero)")
    inv = 1.0 / np.sqrt(denom)
    xhat = xc * inv
    parents = [x]
    y = xhat
    gd = None
    if gain is not None:
        gain = as_tensor(gain)
        gd = gain.data
        if gd.shape != (n,):
            raise DimensionError(f"layer_norm: gain shape {gd.shape} != ({n},)")
        y = y * gd
        parents.append(gain)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (n,):
            raise DimensionError(f"layer_norm: bias shape {bias.shape} != ({n},)")
        y = y + bias.data
        parents.append(bias)

    def back(g):
        dxhat = g * gd if gd is not None else g
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        out = [dx]
        if gain is not None:
            out.append((g * xhat).reshape(-1, n).sum(axis=0))
        if bias is not None:
            out.append(g.reshape(-1, n).sum(axis=0))
        return tuple(out)

    return record(y, parents, back)


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    z_t = as_tensor(logits)
    z = z_t.data
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != z.shape:
        raise DimensionError(f"bce_with_logits: logits {z.shape} vs targets {y.shape}")
    n = z.size
    loss = (np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean()
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    return record(np.array(loss), (z_t,), lambda g: (float(g) * (p - y) / n,))


# reverse pass ---------------------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Repeated calls add to existing ``.grad`` buffers; call ``zero_grad`` to reset.
    """
    if loss.size != 1:
        raise DimensionError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = np.asarray(g, dtype=np.float64).reshape(node.shape)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# verification oracle ---------------------------------------------------------------


def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``x.data`` is perturbed in place one coordinate at a time and restored
    afterwards, so ``f`` may equally read ``x`` through a closure (e.g. a model
    parameter) rather than its argument.
    """
    if h <= 0:
        raise ConfigError(f"finite_diff_grad: h must be positive, got {h}")
    flat = x.data.reshape(-1)
    out = np.zeros(flat.size)

    def evaluate() -> float:
        val = f(x)
        val = val.item() if isinstance(val, Tensor) else float(val)
        if not math.isfinite(val):
            raise NumericError("finite_diff_grad: non-finite function value")
        return val

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = evaluate()
        flat[i] = orig - h
        fm = evaluate()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)


def max_relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Largest ``|a-n| / max(|a|, |n|, floor)`` over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / scale).max()) if a.size else 0.0
