"""Dense float64 tensors with reverse-mode differentiation.

Every operation computes its forward value with numpy and, when any input
requires a gradient, records a node holding the inputs and a closure that maps
the upstream gradient to one gradient per input. `backward` replays those nodes
in reverse topological order.
"""

import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from veille.errors import (
    ConfigError,
    ContractError,
    DimensionError,
    EmptyTapeError,
    NumericalError,
)

logger = logging.getLogger(__name__)

DTYPE = np.float64
DEFAULT_ROPE_THETA = 10000.0

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        bad = int(np.size(data) - np.count_nonzero(np.isfinite(data)))
        raise NumericalError(f"{op}: produced {bad} non-finite value(s)")


class Node:
    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: Tuple["Tensor", ...], backward_fn: BackwardFn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=DTYPE)
        _check_finite(arr, "tensor")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        name = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{flag}{name})"


def record(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wraps an operation result, attaching a tape node if a gradient can flow."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    out._node = Node(op, tuple(inputs), backward_fn) if out.requires_grad else None
    return out


def as_tensor(value: Union[Tensor, np.ndarray, Sequence, float]) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Tape:
    """Recorded operations reachable from a loss, inputs before outputs."""

    def __init__(self, entries: List[Tensor]):
        self.entries = entries

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if tensor._node is None or id(tensor) in visited:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            for parent in reversed(tensor._node.inputs):
                if parent._node is not None and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def ops(self) -> List[str]:
        return [t._node.op for t in self.entries]


def backward(loss: Tensor) -> None:
    """Accumulates d(loss)/d(leaf) into `.grad` of every leaf that requires it."""
    if loss.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    tape = Tape.from_loss(loss)
    if not len(tape):
        raise EmptyTapeError("backward: loss is not connected to any recorded operation")

    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for tensor in reversed(tape.entries):
        upstream = pending.pop(id(tensor), None)
        if upstream is None:
            continue
        node = tensor._node
        for parent, grad in zip(node.inputs, node.backward_fn(upstream)):
            if grad is None or not parent.requires_grad:
                continue
            if parent._node is None:
                parent.grad = grad.copy() if parent.grad is None else parent.grad + grad
            elif id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + grad
            else:
                pending[id(parent)] = grad


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def _backward(g):
        return g @ bd.T, ad.T @ g

    return record("matmul", ad @ bd, (a, b), _backward)


def linear(x: Tensor, w: Tensor) -> Tensor:
    """x[T, in] times w[out, in] transposed, the layout of every projection."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    xd, wd = x.data, w.data

    def _backward(g):
        return g @ wd, g.T @ xd

    return record("linear", xd @ wd.T, (x, w), _backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {a.shape}")
    return record("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {original} as {shape}") from e
    return record("reshape", out, (a,), lambda g: (g.reshape(original),))


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes differ, {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return record("scale", a.data * factor, (a,), lambda g: (g * factor,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x), the gate inside SwiGLU."""
    xd = x.data
    s = _sigmoid(xd)

    def _backward(g):
        return (g * s * (1.0 + xd * (1.0 - s)),)

    return record("silu", xd * s, (x,), _backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: kept entries are rescaled by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout: probability must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p).astype(DTYPE) / (1.0 - p)
    return record("dropout", x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Reductions and indexing
# ---------------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return record("sum", np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def weighted_sum(a: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar sum of a * weights for a constant weight array."""
    w = np.asarray(weights, dtype=DTYPE)
    if w.shape != a.shape:
        raise DimensionError(f"weighted_sum: weights shape {w.shape} differs from {a.shape}")
    return record("weighted_sum", np.array((a.data * w).sum()), (a,), lambda g: (w * float(g),))


def pick_columns(x: Tensor, columns: Sequence[int]) -> Tensor:
    """out[n] = x[n, columns[n]]."""
    cols = np.asarray(columns, dtype=np.int64)
    if x.ndim != 2 or cols.shape != (x.shape[0],):
        raise DimensionError(f"pick_columns: {len(cols)} indices for shape {x.shape}")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def _backward(g):
        gx = np.zeros(shape, dtype=DTYPE)
        gx[rows, cols] = g
        return (gx,)

    return record("pick_columns", x.data[rows, cols], (x,), _backward)


def take_row(x: Tensor, index: int) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"take_row: expected a matrix, got shape {x.shape}")
    shape = x.shape
    index = index % shape[0]

    def _backward(g):
        gx = np.zeros(shape, dtype=DTYPE)
        gx[index] = g[0]
        return (gx,)

    return record("take_row", x.data[index : index + 1].copy(), (x,), _backward)


def slice_columns(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def _backward(g):
        gx = np.zeros(shape, dtype=DTYPE)
        gx[:, start:stop] = g
        return (gx,)

    return record("slice_columns", x.data[:, start:stop].copy(), (x,), _backward)


def _concat(op: str, parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise DimensionError(f"{op}: nothing to concatenate")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        shapes = [p.shape for p in parts]
        raise DimensionError(f"{op}: incompatible shapes {shapes}") from e
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def _backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(op, out, tuple(parts), _backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    return _concat("concat_rows", parts, axis=0)


def concat_columns(parts: Sequence[Tensor]) -> Tensor:
    return _concat("concat_columns", parts, axis=1)


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stacks 1-D tensors of equal length into a matrix."""
    return concat_rows([reshape(p, (1, p.size)) for p in parts])


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    idx = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def _backward(g):
        gt = np.zeros(shape, dtype=DTYPE)
        np.add.at(gt, idx, g)
        return (gt,)

    return record("embedding", table.data[idx], (table,), _backward)


# ---------------------------------------------------------------------------
# Normalization, attention helpers
# ---------------------------------------------------------------------------


def _causal_mask(n_rows: int, n_cols: int) -> np.ndarray:
    return np.tril(np.ones((n_rows, n_cols), dtype=bool))


def softmax_rows(x: Tensor, causal: bool = False) -> Tensor:
    """Row-wise softmax with max subtraction.

    With causal=True, entry (i, j) of a matrix is excluded for j > i.
    """
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"softmax_rows: rows must be non-empty, got shape {x.shape}")
    z = x.data
    mask = None
    if causal:
        if x.ndim != 2:
            raise DimensionError(f"softmax_rows: causal mask needs a matrix, got {x.shape}")
        mask = _causal_mask(*x.shape)
        z = np.where(mask, z, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def _backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return record("softmax_rows", p, (x,), _backward)


def log_softmax_rows(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"log_softmax_rows: rows must be non-empty, got shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def _backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return record("log_softmax_rows", out, (x,), _backward)


def rmsnorm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    """gain * x / sqrt(mean(x^2) + eps) over the last axis."""
    if eps <= 0:
        raise ConfigError(f"rmsnorm: eps must be positive, got {eps}")
    if gain.ndim != 1 or x.shape[-1] != gain.shape[0]:
        raise DimensionError(f"rmsnorm: gain shape {gain.shape} does not match input {x.shape}")
    xd, gd = x.data, gain.data
    r = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    y = xd * r

    def _backward(g):
        gy = g * gd
        gx = r * (gy - y * (gy * y).mean(axis=-1, keepdims=True))
        ggain = (g * y).reshape(-1, gd.shape[0]).sum(axis=0)
        return gx, ggain

    return record("rmsnorm", y * gd, (x, gain), _backward)


def rope_frequencies(d_head: int, theta_base: float = DEFAULT_ROPE_THETA) -> np.ndarray:
    if d_head % 2:
        raise ConfigError(f"rope: head dimension must be even, got {d_head}")
    if theta_base <= 0:
        raise ConfigError(f"rope: theta_base must be positive, got {theta_base}")
    return theta_base ** (-2.0 * np.arange(d_head // 2, dtype=DTYPE) / d_head)


def rope_apply(
    x: Tensor,
    position: Union[int, Sequence[int]],
    theta_base: float = DEFAULT_ROPE_THETA,
) -> Tensor:
    """Rotates coordinate pairs (2i, 2i+1) by position * theta_base^(-2i/d).

    `position` is either one position for every row or one position per row of
    a matrix input.
    """
    freqs = rope_frequencies(x.shape[-1], theta_base)
    pos = np.asarray(position, dtype=DTYPE)
    if np.any(pos < 0):
        raise ContractError(f"rope: positions must be nonnegative, got {position}")
    if pos.ndim == 1:
        if x.ndim != 2 or pos.shape[0] != x.shape[0]:
            raise DimensionError(f"rope: {pos.shape[0]} positions for input of shape {x.shape}")
        angles = pos[:, None] * freqs[None, :]
    else:
        angles = pos * freqs
    cos, sin = np.cos(angles), np.sin(angles)

    def _rotate(v, sign):
        even, odd = v[..., 0::2], v[..., 1::2]
        out = np.empty_like(v)
        out[..., 0::2] = even * cos - sign * odd * sin
        out[..., 1::2] = sign * even * sin + odd * cos
        return out

    return record("rope", _rotate(x.data, 1.0), (x,), lambda g: (_rotate(g, -1.0),))


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------


def numerical_grad(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued `fn` with respect to `tensor`."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = fn().item()
        flat[i] = original - h
        minus = fn().item()
        flat[i] = original
        grad.reshape(-1)[i] = (plus - minus) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
