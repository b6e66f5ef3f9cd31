"""Minimal dense tensors with tape-based reverse-mode differentiation.

Every differentiable op appends one :class:`Node` to the active
:class:`Graph`.  ``backward`` walks that list in strict reverse append
order, so the tape *is* the topological order.

>>> w = Tensor([2.0], requires_grad=True)
>>> with Graph():
...     loss = mse(w, Tensor([0.0]))
...     backward(loss)
>>> w.grad
array([4.])
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, FormatError, NonFiniteError

CHECKPOINT_FORMAT = "dpm-augment-parameters"
CHECKPOINT_VERSION = 1


class Tensor:
    """A float64 array that can take part in a recorded graph."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "_graph")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[int] = None
        self._graph: Optional[Graph] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._node = None
        t._graph = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __radd__ = __add__
    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    """One recorded op: its inputs, output and the vector-Jacobian closure."""

    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Graph:
    """Append-only tape of recorded ops.

    Use as a context manager to make it the active tape for the current
    thread; each thread otherwise gets its own default graph.
    """

    nodes: list = field(default_factory=list)

    def record(self, op: str, inputs: tuple, out: Tensor, vjp) -> None:
        for t in inputs:
            if t._graph is not None and t._graph is not self:
                raise ContractError(f"{op}: input was recorded on a different graph")
        out._node = len(self.nodes)
        out._graph = self
        out.requires_grad = True
        self.nodes.append(Node(op, inputs, out, vjp))

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = [Graph()]
    return _local.stack


def current_graph() -> Graph:
    return _stack()[-1]


class no_grad:
    """Suspend graph recording on this thread (inference)."""

    def __enter__(self):
        self.prev = getattr(_local, "disabled", False)
        _local.disabled = True

    def __exit__(self, *exc):
        _local.disabled = self.prev


def recording() -> bool:
    return not getattr(_local, "disabled", False)


def _emit(op: str, inputs: tuple, arr: np.ndarray, vjp) -> Tensor:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    out = Tensor._wrap(arr)
    if recording() and any(t.requires_grad for t in inputs):
        current_graph().record(op, inputs, out, vjp)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = seed.copy() if loss.grad is None else loss.grad + seed
        return
    graph = loss._graph
    pending = {loss._node: seed}
    for idx in range(loss._node, -1, -1):
        upstream = pending.pop(idx, None)
        if upstream is None:
            continue
        node = graph.nodes[idx]
        for inp, g in zip(node.inputs, node.vjp(upstream)):
            if g is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = g.copy() if inp.grad is None else inp.grad + g
            elif inp._node in pending:
                pending[inp._node] = pending[inp._node] + g
            else:
                pending[inp._node] = g


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# ops


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape (N, D_in) and ``w`` of shape (D_in, D_out)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: x {x.shape} does not conform to w {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match w {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    xd, wd = x.data, w.data

    def vjp(g):
        grads = [g @ wd.T, xd.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("linear", inputs, out, vjp)


def conv_output_size(size: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - 3) // stride + 1


def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 1,
           bias: Optional[Tensor] = None) -> Tensor:
    """3x3 cross-correlation of an NCHW input with an (F, C, 3, 3) kernel bank."""
    if stride not in (1, 2) or pad not in (0, 1):
        raise ContractError(f"conv2d: stride must be 1 or 2 and pad 0 or 1, got {stride}, {pad}")
    if x.data.ndim != 4 or k.data.ndim != 4 or k.shape[2:] != (3, 3) or x.shape[1] != k.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} does not conform to kernel {k.shape}")
    if bias is not None and bias.shape != (k.shape[0],):
        raise DimensionError(f"conv2d: bias {bias.shape} does not match kernel {k.shape}")
    n, c, h, w = x.shape
    f = k.shape[0]
    ho, wo = conv_output_size(h, stride, pad), conv_output_size(w, stride, pad)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: input {x.shape} too small for stride {stride}, pad {pad}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * 9)
    kmat = k.data.reshape(f, c * 9)
    out = cols @ kmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    hp, wp = xp.shape[2], xp.shape[3]

    def vjp(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gk = (gm.T @ cols).reshape(k.shape)
        gcols = (gm @ kmat).reshape(n, ho, wo, c, 3, 3)
        gxp = np.zeros((n, c, hp, wp))
        for i in range(3):
            for j in range(3):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:hp - pad, pad:wp - pad] if pad else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(gm.sum(axis=0))
        return grads

    inputs = (x, k) if bias is None else (x, k, bias)
    return _emit("conv2d", inputs, np.ascontiguousarray(out), vjp)


def _broadcast_kind(op: str, a: Tensor, b: Tensor) -> int:
    # 0: same shape, 1: b repeated over a's leading axis, 2: a repeated over b's
    if a.shape == b.shape:
        return 0
    if a.data.ndim == b.data.ndim + 1 and a.shape[1:] == b.shape:
        return 1
    if b.data.ndim == a.data.ndim + 1 and b.shape[1:] == a.shape:
        return 2
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce(g: np.ndarray, kind: int, which: str) -> np.ndarray:
    if (kind == 1 and which == "b") or (kind == 2 and which == "a"):
        return g.sum(axis=0)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind("add", a, b)

    def vjp(g):
        return _reduce(g, kind, "a"), _reduce(g, kind, "b")

    return _emit("add", (a, b), a.data + b.data, vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind("mul", a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        return _reduce(g * bd, kind, "a"), _reduce(g * ad, kind, "b")

    return _emit("mul", (a, b), ad * bd, vjp)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    xd = x.data

    def vjp(g):
        return (g * (s * (1.0 + xd * (1.0 - s))),)

    return _emit("silu", (x,), xd * s, vjp)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (x,), x.data * c, lambda g: (g * c,))


def elementwise(op_kind: str, *inputs: Tensor, factor: float = 1.0) -> Tensor:
    """Dispatch by name; ``factor`` is the constant for ``scale``."""
    if op_kind == "add":
        return add(*inputs)
    if op_kind == "mul":
        return mul(*inputs)
    if op_kind == "silu":
        return silu(*inputs)
    if op_kind == "scale":
        return scale(inputs[0], factor)
    raise ContractError(f"unknown elementwise op {op_kind!r}")


def mse(pred: Tensor, target: Tensor, weights: Optional[np.ndarray] = None) -> Tensor:
    """Mean of squared differences; optional per-row ``weights`` scale each item."""
    if pred.shape != target.shape:
        raise DimensionError(f"mse: pred {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    sq = diff * diff
    m = diff.size
    if weights is not None:
        wv = np.asarray(weights, dtype=np.float64)
        if wv.shape != (pred.shape[0],):
            raise DimensionError(f"mse: weights {wv.shape} do not match leading axis of {pred.shape}")
        wb = wv.reshape((-1,) + (1,) * (diff.ndim - 1))
    else:
        wb = 1.0
    val = np.array(np.sum(sq * wb) / m)

    def vjp(g):
        gp = (2.0 / m) * g * wb * diff
        return gp, -gp

    return _emit("mse", (pred, target), val, vjp)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum", (x,), np.array(x.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter back onto the rows used."""
    idx = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise DimensionError(f"embedding: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractError(f"embedding: ids out of range for {table.shape[0]} rows")

    def vjp(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, idx, g)
        return (gt,)

    return _emit("embedding", (table,), table.data[idx], vjp)


def channel_bias(x: Tensor, e: Tensor) -> Tensor:
    """Add a per-item, per-channel vector (N, C) to an NCHW map."""
    if x.data.ndim != 4 or e.shape != x.shape[:2]:
        raise DimensionError(f"channel_bias: {e.shape} does not match {x.shape}")

    def vjp(g):
        return g, g.sum(axis=(2, 3))

    return _emit("channel_bias", (x, e), x.data + e.data[:, :, None, None], vjp)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of an NCHW map."""
    if x.data.ndim != 4:
        raise DimensionError(f"upsample2x: expected NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def vjp(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _emit("upsample2x", (x,), out, vjp)


def mean_spatial(x: Tensor) -> Tensor:
    """Global average pool: (N, C, H, W) -> (N, C)."""
    if x.data.ndim != 4:
        raise DimensionError(f"mean_spatial: expected NCHW, got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    shape = x.shape

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] / hw, shape).copy(),)

    return _emit("mean_spatial", (x,), x.data.mean(axis=(2, 3)), vjp)


# ---------------------------------------------------------------------------
# checkpoints


def dumps_parameters(params: Mapping[str, Tensor], meta: Optional[dict] = None) -> str:
    """Serialise parameters to flat JSON; byte-stable for identical values."""
    body = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "parameters": {
            name: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
            for name, t in params.items()
        },
    }
    return json.dumps(body, sort_keys=True, separators=(",", ":")) + "\n"


def loads_parameters(text: str) -> tuple[dict, dict]:
    try:
        body = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"checkpoint is not valid JSON: {exc}") from exc
    if body.get("format") != CHECKPOINT_FORMAT or body.get("version") != CHECKPOINT_VERSION:
        raise FormatError("unrecognised checkpoint format or version")
    params = {}
    for name, entry in body["parameters"].items():
        shape = tuple(entry["shape"])
        flat = np.asarray(entry["data"], dtype=np.float64)
        if flat.size != int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"parameter {name!r}: {flat.size} values for shape {shape}")
        params[name] = Tensor(flat.reshape(shape), requires_grad=True)
    return params, body.get("meta", {})


def save_parameters(path, params: Mapping[str, Tensor], meta: Optional[dict] = None) -> None:
    Path(path).write_text(dumps_parameters(params, meta))


def load_parameters(path) -> tuple[dict, dict]:
    return loads_parameters(Path(path).read_text())
