"""Small reverse-mode autodiff engine over float64 numpy arrays.

Graphs are built define-by-run: every op on a tensor that (transitively)
depends on a parameter records its parents and a local backward rule.
``backward`` walks the recorded graph in reverse topological order.

Only 1-D and 2-D tensors are supported.  The single broadcast rule is
``add(matrix, row_vector)`` for biases.
"""
from __future__ import annotations

from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return elemwise_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_lift(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out.parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


# ---------------------------------------------------------------- forward ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if b.data.ndim != 2 or a.data.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            if a.data.ndim == 1:
                _accum(b, np.outer(a.data, g))
            else:
                _accum(b, a.data.T @ g)

    return _make(out_data, (a, b), "matmul", bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    row_bcast = False
    if a.shape != b.shape:
        if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
            row_bcast = True
        else:
            raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")
    out_data = a.data + b.data

    def bw(g):
        _accum(a, g)
        if b.requires_grad:
            _accum(b, g.sum(axis=0) if row_bcast else g)

    return _make(out_data, (a, b), "add", bw)


def elemwise_mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"elemwise_mul shape mismatch: {a.shape} * {b.shape}")
    out_data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _make(out_data, (a, b), "mul", bw)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bw(g):
        _accum(x, g * (1.0 - y * y))

    return _make(y, (x,), "tanh", bw)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign to avoid overflow in exp
    z = x.data
    y = np.empty_like(z)
    pos = z >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    y[~pos] = ez / (1.0 + ez)

    def bw(g):
        _accum(x, g * y * (1.0 - y))

    return _make(y, (x,), "sigmoid", bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        _accum(x, g * c)

    return _make(x.data * c, (x,), "scale", bw)


def one_minus(x: Tensor) -> Tensor:
    """1 - x, used by the GRU interpolation gate."""

    def bw(g):
        _accum(x, -g)

    return _make(1.0 - x.data, (x,), "one_minus", bw)


def concat(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != b.data.ndim or a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat shape mismatch: {a.shape} | {b.shape}")
    na = a.shape[-1]
    out_data = np.concatenate([a.data, b.data], axis=-1)

    def bw(g):
        _accum(a, g[..., :na])
        _accum(b, g[..., na:])

    return _make(out_data, (a, b), "concat", bw)


def lookup_row(matrix: Tensor, index: int) -> Tensor:
    if matrix.data.ndim != 2:
        raise ShapeError(f"lookup_row needs a matrix, got shape {matrix.shape}")
    index = int(index)
    if not 0 <= index < matrix.shape[0]:
        raise IndexError(f"row index {index} out of range for matrix with {matrix.shape[0]} rows")
    out_data = matrix.data[index].copy()

    def bw(g):
        if matrix.grad is None:
            matrix.grad = np.zeros_like(matrix.data)
        matrix.grad[index] += g

    return _make(out_data, (matrix,), "lookup_row", bw)


def lookup_rows(matrix: Tensor, indices) -> Tensor:
    """Gather several rows into a [len(indices), d] matrix."""
    if matrix.data.ndim != 2:
        raise ShapeError(f"lookup_rows needs a matrix, got shape {matrix.shape}")
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= matrix.shape[0]):
        bad = idx[(idx < 0) | (idx >= matrix.shape[0])][0]
        raise IndexError(f"row index {bad} out of range for matrix with {matrix.shape[0]} rows")
    out_data = matrix.data[idx]

    def bw(g):
        if matrix.grad is None:
            matrix.grad = np.zeros_like(matrix.data)
        np.add.at(matrix.grad, idx, g)

    return _make(out_data, (matrix,), "lookup_rows", bw)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def bw(g):
        p = np.exp(y)
        _accum(x, g - p * g.sum(axis=-1, keepdims=True))

    return _make(y, (x,), "log_softmax", bw)


def pick_log_prob(log_probs: Tensor, index) -> Tensor:
    """Select entries of a log-distribution.

    For a 1-D input ``index`` is a single int and the result has shape [1].
    For a [B, V] input ``index`` is a length-B sequence and the result is [B].
    """
    if log_probs.data.ndim == 1:
        j = int(index)
        if not 0 <= j < log_probs.shape[0]:
            raise IndexError(f"index {j} out of range for {log_probs.shape[0]} classes")
        out_data = log_probs.data[j:j + 1].copy()

        def bw(g):
            full = np.zeros_like(log_probs.data)
            full[j] = g[0]
            _accum(log_probs, full)

        return _make(out_data, (log_probs,), "pick", bw)

    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    B, V = log_probs.shape
    if idx.shape[0] != B:
        raise ShapeError(f"pick_log_prob: {idx.shape[0]} indices for {B} rows")
    if idx.size and (idx.min() < 0 or idx.max() >= V):
        raise IndexError(f"index out of range for {V} classes")
    rows = np.arange(B)
    out_data = log_probs.data[rows, idx].copy()

    def bw(g):
        full = np.zeros_like(log_probs.data)
        full[rows, idx] = g
        _accum(log_probs, full)

    return _make(out_data, (log_probs,), "pick", bw)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def bw(g):
        _accum(x, np.full_like(x.data, g[0]))

    return _make(np.array([x.data.sum()]), (x,), "sum", bw)


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def bw(g):
        _accum(x, np.full_like(x.data, g[0] / n))

    return _make(np.array([x.data.mean()]), (x,), "mean", bw)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Weighted sum ``sum(a * b)`` returned as shape [1]."""
    return sum(elemwise_mul(a, b))


# ---------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.shape != (1,):
        raise ShapeError(f"backward needs a scalar of shape (1,), got {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    for node in order:
        if not node.is_leaf:
            node.grad = None
    loss.grad = np.ones(1)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # interior grads are not needed once propagated
            node.grad = None


def grad(loss: Tensor, params: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    """Gradient table of ``loss`` for each named parameter (zeros if unused)."""
    for p in params.values():
        p.grad = None
    backward(loss)
    out = {}
    for name, p in params.items():
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.grad = None
    return out


# ---------------------------------------------------------------- optimizer

class AdamState:
    def __init__(self, shapes: Dict[str, Tuple[int, ...]]):
        self.step = 0
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}

    def copy(self) -> "AdamState":
        new = AdamState({})
        new.step = self.step
        new.m = {k: v.copy() for k, v in self.m.items()}
        new.v = {k: v.copy() for k, v in self.v.items()}
        return new


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name in sorted(params):
        p, g = params[name], grads[name]
        if p.shape != g.shape or state.m[name].shape != p.shape:
            raise ShapeError(f"adam shape mismatch for {name}: param {p.shape}, grad {g.shape}")
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return float(np.sqrt(np.sum([float(np.sum(g * g)) for _, g in sorted(grads.items())])))


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    norm = global_norm(grads)
    if norm > max_norm > 0:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


def zeros_like_table(params: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def accumulate(into: Dict[str, np.ndarray], more: Dict[str, np.ndarray]) -> None:
    for k in sorted(more):
        into[k] += more[k]


__all__: Iterable[str] = [
    "Tensor", "ShapeError", "constant", "parameter", "matmul", "add", "elemwise_mul", "tanh",
    "sigmoid", "scale", "one_minus", "concat", "lookup_row", "lookup_rows", "log_softmax",
    "pick_log_prob", "sum", "mean", "dot", "backward", "grad", "AdamState", "adam_step",
    "global_norm", "clip_by_global_norm",
]
