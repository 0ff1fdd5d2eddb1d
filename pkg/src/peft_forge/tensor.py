"""Dense tensors with reverse-mode automatic differentiation.

Gradients are recorded on an explicit per-forward tape (`Graph`). Every
differentiable op executed while a graph is active appends a backward closure;
`Graph.backward` replays the tape in exact reverse execution order. Ops run
with no active graph, or on tensors that neither require gradients nor derive
from ones that do, execute as plain numpy and record nothing, which keeps
inference cheap.

Default precision is 64-bit; call `set_default_dtype("float32")` to trade
accuracy for memory. The op set is deliberately small: what a decoder-only
transformer and its adapters need, nothing more.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable

import numpy as np

from .errors import DataError, GraphError, NumericError, ShapeError

_DTYPES = {"float64": np.float64, "float32": np.float32}
_default_dtype = np.float64


def set_default_dtype(name: str) -> None:
    """Select the dtype newly created tensors use ("float64" or "float32")."""
    global _default_dtype
    if name not in _DTYPES:
        raise ShapeError(f"unknown dtype {name!r}; expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


_tls = threading.local()


def _graph_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = _tls.stack = []
    return stack


def active_graph() -> "Graph | None":
    stack = _graph_stack()
    return stack[-1] if stack else None


class _Node:
    """Backpointer from a produced tensor to its recorded operation."""

    __slots__ = ("graph", "run_backward")

    def __init__(self, graph: "Graph", run_backward: Callable[[], None]):
        self.graph = graph
        self.run_backward = run_backward


class Graph:
    """Ordered tape of differentiable ops executed within one forward pass.

    Use as a context manager around the forward computation. A graph and the
    tensors recorded on it are confined to a single thread; independent graphs
    may run concurrently on separate threads.
    """

    __slots__ = ("_nodes", "_finished")

    def __init__(self):
        self._nodes: list[_Node] = []
        self._finished = False

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _graph_stack()
        if not stack or stack[-1] is not self:
            raise GraphError("graph context exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: "Tensor") -> None:
        """Run reverse-mode accumulation from scalar `loss` through the tape."""
        if self._finished:
            raise GraphError(
                "backward already ran on this graph; run a new forward pass first"
            )
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if loss.op_trace is None or loss.op_trace.graph is not self:
            raise GraphError("loss tensor was not produced on this graph")
        self._finished = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            node.run_backward()


class Tensor:
    """A numpy array plus gradient bookkeeping.

    `requires_grad` marks leaf parameters. Intermediate results carry an
    `op_trace` backpointer instead; both kinds accumulate into `.grad` during
    backward. Everything else never allocates a gradient buffer.
    """

    __slots__ = ("data", "grad", "requires_grad", "op_trace", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op_trace: _Node | None = None
        self.name = name

    # -- inspection ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        grad = " grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{grad}{tag})"

    # -- gradient handling -----------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.op_trace is None:
            raise GraphError("tensor has no recorded graph; nothing to differentiate")
        self.op_trace.graph.backward(self)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mul(sum_all(self), 1.0 / self.data.size)


# ---------------------------------------------------------------------------
# recording machinery


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_default_dtype))


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t.op_trace is not None


def _record(out: Tensor, inputs: Iterable[Tensor], run_backward: Callable[[], None]) -> None:
    graph = active_graph()
    if graph is None:
        return
    if graph._finished:
        raise GraphError("graph already ran backward; open a new Graph for the next forward")
    if not any(_tracked(t) for t in inputs):
        return
    node = _Node(graph, run_backward)
    out.op_trace = node
    graph._nodes.append(node)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not _tracked(t):
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def run_backward():
        g = out.grad
        if g is None:
            return
        if _tracked(a):
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if _tracked(b):
            _accumulate(b, _unbroadcast(g, b.data.shape))

    _record(out, (a, b), run_backward)
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def run_backward():
        g = out.grad
        if g is None:
            return
        if _tracked(a):
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if _tracked(b):
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    _record(out, (a, b), run_backward)
    return out


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.tanh(x.data))

    def run_backward():
        g = out.grad
        if g is None:
            return
        _accumulate(x, g * (1.0 - out.data * out.data))

    _record(out, (x,), run_backward)
    return out


def silu(x) -> Tensor:
    """x * sigmoid(x), the feed-forward activation."""
    x = _as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(x.data * sig)

    def run_backward():
        g = out.grad
        if g is None:
            return
        _accumulate(x, g * sig * (1.0 + x.data * (1.0 - sig)))

    _record(out, (x,), run_backward)
    return out


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.asarray(x.data.sum()))

    def run_backward():
        g = out.grad
        if g is None:
            return
        _accumulate(x, np.broadcast_to(g, x.data.shape).copy())

    _record(out, (x,), run_backward)
    return out


# ---------------------------------------------------------------------------
# structural ops


def matmul(a, b) -> Tensor:
    """Matrix product. 2-D x 2-D, or stacked 3-D x 3-D with equal leading dim."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != b.data.ndim or a.data.ndim not in (2, 3):
        raise ShapeError(f"matmul expects both operands 2-D or both 3-D, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}")
    if a.data.ndim == 3 and a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"matmul batch dimensions disagree: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def run_backward():
        g = out.grad
        if g is None:
            return
        if _tracked(a):
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if _tracked(b):
            _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    _record(out, (a, b), run_backward)
    return out


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.reshape(shape))

    def run_backward():
        g = out.grad
        if g is None:
            return
        _accumulate(x, g.reshape(x.data.shape))

    _record(out, (x,), run_backward)
    return out


def transpose(x, axes: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.transpose(x.data, axes))
    inverse = tuple(np.argsort(axes))

    def run_backward():
        g = out.grad
        if g is None:
            return
        _accumulate(x, np.transpose(g, inverse))

    _record(out, (x,), run_backward)
    return out


def concat(a, b, axis: int = 0) -> Tensor:
    """Concatenate two tensors; gradients are sliced back to each operand."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != b.data.ndim:
        raise ShapeError(f"concat rank mismatch: {a.data.shape} vs {b.data.shape}")
    axis = axis % a.data.ndim
    for d in range(a.data.ndim):
        if d != axis and a.data.shape[d] != b.data.shape[d]:
            raise ShapeError(
                f"concat shapes disagree off axis {axis}: {a.data.shape} vs {b.data.shape}"
            )
    out = Tensor(np.concatenate([a.data, b.data], axis=axis))
    split = a.data.shape[axis]

    def run_backward():
        g = out.grad
        if g is None:
            return
        head = [slice(None)] * g.ndim
        tail = [slice(None)] * g.ndim
        head[axis] = slice(0, split)
        tail[axis] = slice(split, None)
        if _tracked(a):
            _accumulate(a, g[tuple(head)])
        if _tracked(b):
            _accumulate(b, g[tuple(tail)])

    _record(out, (a, b), run_backward)
    return out


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` entries from `start` along one axis."""
    x = _as_tensor(x)
    axis = axis % x.data.ndim
    if start < 0 or start + length > x.data.shape[axis]:
        raise ShapeError(
            f"narrow [{start}:{start + length}] out of range for axis {axis} of {x.data.shape}"
        )
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = Tensor(x.data[index])

    def run_backward():
        g = out.grad
        if g is None:
            return
        if _tracked(x):
            full = np.zeros_like(x.data)
            full[index] = g
            _accumulate(x, full)

    _record(out, (x,), run_backward)
    return out


def embedding(table, ids) -> Tensor:
    """Row gather: table is (vocab, d), ids an integer sequence."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"embedding ids must be 1-D, got shape {ids.shape}")
    if table.data.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got shape {table.data.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        bad = int(ids[(ids < 0) | (ids >= table.data.shape[0])][0])
        raise DataError(f"token id {bad} out of range for vocab {table.data.shape[0]}")
    out = Tensor(table.data[ids])

    def run_backward():
        g = out.grad
        if g is None:
            return
        if _tracked(table):
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            _accumulate(table, full)

    _record(out, (table,), run_backward)
    return out


def repeat_rows(x, repeats: int) -> Tensor:
    """Repeat a stacked tensor along axis 0 (key/value head sharing)."""
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"repeat_rows expects a 3-D tensor, got shape {x.data.shape}")
    out = Tensor(np.repeat(x.data, repeats, axis=0))
    n = x.data.shape[0]

    def run_backward():
        g = out.grad
        if g is None:
            return
        if _tracked(x):
            _accumulate(x, g.reshape(n, repeats, *x.data.shape[1:]).sum(axis=1))

    _record(out, (x,), run_backward)
    return out


# ---------------------------------------------------------------------------
# normalization, attention math, loss


def softmax(x, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along `axis`.

    Finite inputs produce rows that sum to 1 within 1e-12. Entries of -inf are
    tolerated (they get weight exactly 0), which is how causal masking enters;
    NaN input is a numeric error.
    """
    x = _as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax received NaN input")
    m = np.max(x.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x.data - m)
    denom = e.sum(axis=axis, keepdims=True)
    if not np.all(denom > 0.0):
        raise NumericError("softmax row has no finite entries")
    y = e / denom
    out = Tensor(y)

    def run_backward():
        g = out.grad
        if g is None:
            return
        if _tracked(x):
            inner = (g * y).sum(axis=axis, keepdims=True)
            _accumulate(x, y * (g - inner))

    _record(out, (x,), run_backward)
    return out


def rmsnorm(x, scale=None, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization over the last axis, with optional learnable scale."""
    x = _as_tensor(x)
    d = x.data.shape[-1]
    ms = np.mean(x.data * x.data, axis=-1, keepdims=True)
    r = np.sqrt(ms + eps)
    normed = x.data / r
    if scale is None:
        out = Tensor(normed)

        def run_backward():
            g = out.grad
            if g is None:
                return
            if _tracked(x):
                inner = (g * x.data).sum(axis=-1, keepdims=True)
                _accumulate(x, g / r - x.data * inner / (d * r**3))

        _record(out, (x,), run_backward)
        return out

    s = _as_tensor(scale)
    if s.data.shape != (d,):
        raise ShapeError(f"rmsnorm scale shape {s.data.shape} does not match last axis of {x.data.shape}")
    out = Tensor(normed * s.data)

    def run_backward():
        g = out.grad
        if g is None:
            return
        gs_prod = g * s.data
        if _tracked(x):
            inner = (gs_prod * x.data).sum(axis=-1, keepdims=True)
            _accumulate(x, gs_prod / r - x.data * inner / (d * r**3))
        if _tracked(s):
            contrib = g * normed
            _accumulate(s, contrib.reshape(-1, d).sum(axis=0))

    _record(out, (x, s), run_backward)
    return out


def rope(x, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position encoding applied over the last axis of (..., T, head_dim).

    Adjacent coordinate pairs (2i, 2i+1) are rotated by the position-dependent
    angles whose cosines/sines are passed in as plain (T, head_dim/2) arrays.
    The backward pass rotates the gradient by the opposite angle.
    """
    x = _as_tensor(x)
    if x.data.shape[-1] % 2 != 0:
        raise ShapeError(f"rope needs an even last axis, got shape {x.data.shape}")
    xe = x.data[..., 0::2]
    xo = x.data[..., 1::2]
    y = np.empty_like(x.data)
    y[..., 0::2] = xe * cos - xo * sin
    y[..., 1::2] = xe * sin + xo * cos
    out = Tensor(y)

    def run_backward():
        g = out.grad
        if g is None:
            return
        if _tracked(x):
            ge = g[..., 0::2]
            go = g[..., 1::2]
            gx = np.empty_like(g)
            gx[..., 0::2] = ge * cos + go * sin
            gx[..., 1::2] = -ge * sin + go * cos
            _accumulate(x, gx)

    _record(out, (x,), run_backward)
    return out


def cross_entropy(logits, targets, mask) -> Tensor:
    """Mean over masked positions of -log softmax(logits)[target].

    logits is (n, vocab); targets and mask are length n. An empty mask is a
    data error: there is nothing to supervise.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy logits must be 2-D, got shape {logits.data.shape}")
    n, vocab = logits.data.shape
    if targets.shape != (n,) or mask.shape != (n,):
        raise ShapeError(
            f"cross_entropy targets/mask must be length {n}, got {targets.shape} and {mask.shape}"
        )
    if np.isnan(logits.data).any():
        raise NumericError("cross_entropy received NaN logits")
    n_masked = int(mask.sum())
    if n_masked == 0:
        raise DataError("cross_entropy mask selects no positions")
    if targets[mask].min() < 0 or targets[mask].max() >= vocab:
        raise DataError(f"cross_entropy target id out of range for vocab {vocab}")
    m = logits.data.max(axis=1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    losses = -logp[np.arange(n), targets]
    out = Tensor(np.asarray(losses[mask].mean()))

    def run_backward():
        g = out.grad
        if g is None:
            return
        if _tracked(logits):
            delta = np.exp(logp)
            delta[np.arange(n), targets] -= 1.0
            delta[~mask] = 0.0
            _accumulate(logits, (float(g) / n_masked) * delta)

    _record(out, (logits,), run_backward)
    return out
