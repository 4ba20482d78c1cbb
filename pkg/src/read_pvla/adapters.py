"""Bottleneck modules inserted into a frozen backbone.

* :class:`ReadAdapter` - down-projection, a recurrent cell scanned over the
  token axis, GELU, up-projection, residual.
* :class:`PlainAdapter` - the same bottleneck without recurrence (tokenwise).
* :class:`LoraPatch` - low-rank additive update ``W + A @ B`` of a projection.

Parameters live in plain ``dict[str, Tensor]`` maps so strategies can name,
count, mask and serialise them uniformly.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    Tensor,
    activation,
    add,
    as_tensor,
    cols,
    concat_rows,
    matmul,
    mul,
    reshape,
    rows,
)
from .errors import ConfigError, DimensionError

CELL_KINDS = ("rnn", "gru", "lstm")
_GATES = {"rnn": 1, "gru": 3, "lstm": 4}


def _zeros(*shape):
    return Tensor(np.zeros(shape))


class ReadAdapter:
    """Recurrent bottleneck adapter.

    The cell stacks its gate maps column-wise: ``w_x`` and ``w_h`` are
    ``k × (gates·k)`` and ``b`` has ``gates·k`` entries (1 gate for RNN,
    3 for GRU in z/r/n order, 4 for LSTM in i/f/g/o order).
    """

    def __init__(self, d: int, k: int = 4, cell_kind: str = "rnn"):
        if cell_kind not in CELL_KINDS:
            raise ConfigError(f"cell_kind must be one of {CELL_KINDS}, got {cell_kind!r}")
        if not 0 < k < d:
            raise ConfigError(f"bottleneck width k={k} must satisfy 0 < k < d={d}")
        self.d, self.k, self.cell_kind = d, k, cell_kind
        g = _GATES[cell_kind]
        self.params = {
            "down.weight": _zeros(d, k),
            "cell.w_x": _zeros(k, g * k),
            "cell.w_h": _zeros(k, g * k),
            "cell.b": _zeros(g * k),
            "up.weight": _zeros(k, d),
            "up.bias": _zeros(d),
        }

    @staticmethod
    def count(d: int, k: int, cell_kind: str = "rnn") -> int:
        g = _GATES[cell_kind]
        return d * k + g * (k * k + k * k + k) + k * d + d

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())


class PlainAdapter:
    def __init__(self, d: int, k: int = 4):
        if not 0 < k < d:
            raise ConfigError(f"bottleneck width k={k} must satisfy 0 < k < d={d}")
        self.d, self.k = d, k
        self.params = {
            "down.weight": _zeros(d, k),
            "down.bias": _zeros(k),
            "up.weight": _zeros(k, d),
            "up.bias": _zeros(d),
        }

    @staticmethod
    def count(d: int, k: int) -> int:
        return 2 * d * k + k + d

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())


class LoraPatch:
    def __init__(self, d: int, rank: int = 4, target: str = "query"):
        if rank > d:
            raise ConfigError(f"LoRA rank {rank} exceeds width {d}")
        if rank < 1:
            raise ConfigError(f"LoRA rank must be positive, got {rank}")
        self.d, self.rank, self.target = d, rank, target
        self.params = {"A": _zeros(d, rank), "B": _zeros(rank, d)}

    def num_params(self) -> int:
        return 2 * self.d * self.rank


# initialisation ---------------------------------------------------------------


RECURRENT_INITS = ("zero", "kaiming")


def init_adapter_params(adapter, seed: int, recurrent: str = "zero"):
    """Kaiming-normal down-projection, everything else exactly zero.

    For :class:`LoraPatch` the ``A`` factor takes the Kaiming draw and ``B``
    stays zero, so the patched weight starts equal to the frozen one.

    With every READ cell weight at zero the hidden states are identically zero,
    so ``W_up`` and the cell receive zero gradient forever and only ``up.bias``
    can learn. ``recurrent="kaiming"`` also draws the cell's input map
    ``w_x ~ N(0, 2/k)``; ``W_up`` stays zero, so the adapter is still an exact
    identity at initialisation.
    """
    if recurrent not in RECURRENT_INITS:
        raise ConfigError(f"recurrent init must be one of {RECURRENT_INITS}, got {recurrent!r}")
    rng = np.random.default_rng(seed)
    for p in adapter.params.values():
        p.data = np.zeros_like(p.data)
    if isinstance(adapter, LoraPatch):
        target = adapter.params["A"]
    else:
        target = adapter.params["down.weight"]
    d = target.shape[0]
    target.data = rng.normal(0.0, np.sqrt(2.0 / d), size=target.shape)
    if recurrent == "kaiming" and isinstance(adapter, ReadAdapter):
        w_x = adapter.params["cell.w_x"]
        w_x.data = rng.normal(0.0, np.sqrt(2.0 / adapter.k), size=w_x.shape)
    return adapter


# recurrent cells --------------------------------------------------------------


def _gate_step(kind: str, gx: Tensor, state, w_h: Tensor):
    """Advance one step given the already-projected input ``gx = x W_x + b``."""
    k = w_h.shape[0]
    if kind == "rnn":
        return activation("tanh", add(gx, matmul(state, w_h)))
    if kind == "gru":
        h = state
        gh = matmul(h, w_h)
        z = activation("sigmoid", add(cols(gx, 0, k), cols(gh, 0, k)))
        r = activation("sigmoid", add(cols(gx, k, 2 * k), cols(gh, k, 2 * k)))
        n = activation("tanh", add(cols(gx, 2 * k, 3 * k), mul(r, cols(gh, 2 * k, 3 * k))))
        return add(mul(z, h), mul(1.0 - z, n))
    h, c = state
    pre = add(gx, matmul(h, w_h))
    i = activation("sigmoid", cols(pre, 0, k))
    f = activation("sigmoid", cols(pre, k, 2 * k))
    g = activation("tanh", cols(pre, 2 * k, 3 * k))
    o = activation("sigmoid", cols(pre, 3 * k, 4 * k))
    c = add(mul(f, c), mul(i, g))
    return (mul(o, activation("tanh", c)), c)


def recurrent_cell_step(kind: str, x_t, state, params: dict):
    """One recurrence step on a width-``k`` input.

    ``state`` is the previous hidden vector, or ``(h, c)`` for LSTM; the
    return value has the same structure. Vectors may be 1-D or ``1×k``.
    """
    if kind not in CELL_KINDS:
        raise ConfigError(f"cell_kind must be one of {CELL_KINDS}, got {kind!r}")
    w_x, w_h, b = params["cell.w_x"], params["cell.w_h"], params["cell.b"]
    k = w_h.shape[0]

    def as_row(v):
        v = as_tensor(v)
        if v.size != k:
            raise DimensionError(f"recurrent cell expects width {k}, got shape {v.shape}")
        return reshape(v, (1, k))

    flat = as_tensor(x_t).data.ndim == 1
    x = as_row(x_t)
    st = (as_row(state[0]), as_row(state[1])) if kind == "lstm" else as_row(state)
    out = _gate_step(kind, add(matmul(x, w_x), b), st, w_h)
    if not flat:
        return out
    if kind == "lstm":
        return (reshape(out[0], (k,)), reshape(out[1], (k,)))
    return reshape(out, (k,))


def _check_width(adapter, O: Tensor):
    if O.data.ndim != 2 or O.shape[1] != adapter.d:
        raise DimensionError(f"adapter of width {adapter.d} cannot take input of shape {O.shape}")
    if O.shape[0] < 1:
        raise DimensionError("adapter input must contain at least one token")


def read_forward(adapter: ReadAdapter, O) -> Tensor:
    """``O + GELU(scan(O W_down)) W_up + b_up`` with a left-to-right scan from a zero state."""
    O = as_tensor(O)
    _check_width(adapter, O)
    p = adapter.params
    kind, k, n = adapter.cell_kind, adapter.k, O.shape[0]
    gx_all = add(matmul(matmul(O, p["down.weight"]), p["cell.w_x"]), p["cell.b"])
    h0 = Tensor(np.zeros((1, k)))
    state = (h0, Tensor(np.zeros((1, k)))) if kind == "lstm" else h0
    hidden = []
    for t in range(n):
        state = _gate_step(kind, rows(gx_all, t, t + 1), state, p["cell.w_h"])
        hidden.append(state[0] if kind == "lstm" else state)
    H = hidden[0] if n == 1 else concat_rows(hidden)
    branch = add(matmul(activation("gelu", H), p["up.weight"]), p["up.bias"])
    return add(O, branch)


def plain_adapter_forward(adapter: PlainAdapter, O) -> Tensor:
    O = as_tensor(O)
    _check_width(adapter, O)
    p = adapter.params
    z = activation("gelu", add(matmul(O, p["down.weight"]), p["down.bias"]))
    return add(O, add(matmul(z, p["up.weight"]), p["up.bias"]))


def lora_effective_weight(W, patch: LoraPatch) -> Tensor:
    W = as_tensor(W)
    if W.shape != (patch.d, patch.d):
        raise DimensionError(f"LoRA patch of width {patch.d} cannot patch weight {W.shape}")
    return add(W, matmul(patch.params["A"], patch.params["B"]))
