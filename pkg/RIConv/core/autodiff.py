"""
Reverse-mode automatic differentiation over dense 2-D float64 arrays.

Tensors are immutable row-major matrices. While a ``Tape`` is active every
primitive records its inputs, its output node and a closure computing the
input partials, so ``backward`` can walk the tape once in reverse order.
"""

import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.98

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to a primitive's rule."""

    pass


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf values reach a checked boundary."""

    pass


class Tensor:
    """A 2-D float64 array, optionally attached to a node of the active tape."""

    __slots__ = ("data", "node")

    def __init__(self, data, node: Optional[int] = None):
        array = np.asarray(data, dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(1, 1)
        elif array.ndim == 1:
            array = array.reshape(1, -1)
        elif array.ndim != 2:
            raise ShapeError(f"tensor: expected at most 2 dimensions, got {array.shape}")
        self.data = array
        self.node = node

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item: expected a (1, 1) tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.node})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


class Parameter:
    """A named learnable array with a gradient accumulator and momentum buffer."""

    def __init__(self, name: str, data):
        self.name = name
        self.data = np.array(data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ShapeError(f"parameter '{name}': expected 2-D data, got {self.data.shape}")
        self.grad = np.zeros_like(self.data)
        self.velocity = np.zeros_like(self.data)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    def tensor(self) -> Tensor:
        """Return the value as a tensor, watched by the active tape if any."""
        tape = active_tape()
        if tape is None:
            return Tensor(self.data)
        return tape.watch(self)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, width: int) -> "BatchNormState":
        return cls(np.zeros((1, width)), np.ones((1, width)))


@dataclass
class TapeEntry:
    kind: str
    inputs: Tuple[Optional[int], ...]
    output: int
    backward: Callable[[np.ndarray, Tuple[bool, ...]], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered record of primitive operations, usable as a context manager."""

    entries: List[TapeEntry] = field(default_factory=list)
    _next_node: int = 0
    _param_nodes: Dict[int, int] = field(default_factory=dict)
    _params: Dict[int, Parameter] = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = []
            _state.stack = stack
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        _state.stack.pop()

    def new_node(self) -> int:
        node = self._next_node
        self._next_node += 1
        return node

    def watch(self, param: Parameter) -> Tensor:
        node = self._param_nodes.get(id(param))
        if node is None:
            node = self.new_node()
            self._param_nodes[id(param)] = node
            self._params[id(param)] = param
        return Tensor(param.data, node)

    def node_of(self, param: Parameter) -> Optional[int]:
        return self._param_nodes.get(id(param))

    def parameters(self) -> List[Parameter]:
        return list(self._params.values())

    def record(self, kind, inputs, output_data, backward_fn) -> Tensor:
        node = self.new_node()
        self.entries.append(
            TapeEntry(kind, tuple(t.node for t in inputs), node, backward_fn)
        )
        return Tensor(output_data, node)


def active_tape() -> Optional[Tape]:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(kind: str, inputs: Sequence[Tensor], output: np.ndarray, backward_fn) -> Tensor:
    tape = active_tape()
    if tape is None or all(t.node is None for t in inputs):
        return Tensor(output)
    return tape.record(kind, inputs, output, backward_fn)


def _broadcast_ok(a: Tuple[int, int], b: Tuple[int, int]) -> bool:
    return all(x == y or x == 1 or y == 1 for x, y in zip(a, b))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    x, y = a.data, b.data

    def backward(g, needs):
        return (g @ y.T if needs[0] else None, x.T @ g if needs[1] else None)

    return _emit("matmul", (a, b), x @ y, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    sa, sb = a.shape, b.shape

    def backward(g, needs):
        return (
            _unbroadcast(g, sa) if needs[0] else None,
            _unbroadcast(g, sb) if needs[1] else None,
        )

    return _emit("add", (a, b), a.data + b.data, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with row/column broadcasting."""
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    x, y = a.data, b.data

    def backward(g, needs):
        return (
            _unbroadcast(g * y, x.shape) if needs[0] else None,
            _unbroadcast(g * x, y.shape) if needs[1] else None,
        )

    return _emit("mul", (a, b), x * y, backward)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _emit("scale", (a,), a.data * factor, lambda g, needs: (g * factor,))


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    rows = {t.rows for t in tensors}
    if len(rows) != 1:
        raise ShapeError(
            f"concat_cols: row counts differ, shapes {[t.shape for t in tensors]}"
        )
    splits = np.cumsum([t.cols for t in tensors])[:-1]

    def backward(g, needs):
        return tuple(np.split(g, splits, axis=1))

    return _emit(
        "concat_cols", tensors, np.concatenate([t.data for t in tensors], axis=1), backward
    )


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    cols = {t.cols for t in tensors}
    if len(cols) != 1:
        raise ShapeError(
            f"concat_rows: column counts differ, shapes {[t.shape for t in tensors]}"
        )
    splits = np.cumsum([t.rows for t in tensors])[:-1]

    def backward(g, needs):
        return tuple(np.split(g, splits, axis=0))

    return _emit(
        "concat_rows", tensors, np.concatenate([t.data for t in tensors], axis=0), backward
    )


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g, needs: (g * mask,))


def gather_rows(a: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1:
        raise ShapeError(f"gather_rows: index must be 1-D, got shape {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= a.rows):
        raise ShapeError(
            f"gather_rows: index out of range for shape {a.shape} "
            f"(min {index.min()}, max {index.max()})"
        )
    shape = a.shape

    def backward(g, needs):
        grad = np.zeros(shape)
        np.add.at(grad, index, g)
        return (grad,)

    return _emit("gather_rows", (a,), a.data[index], backward)


def _check_segments(kind: str, a: Tensor, segments: np.ndarray, count: int):
    if segments.shape != (a.rows,):
        raise ShapeError(
            f"{kind}: segment ids shape {segments.shape} does not match rows of {a.shape}"
        )
    if segments.size and (segments.min() < 0 or segments.max() >= count):
        raise ShapeError(f"{kind}: segment id out of range for {count} segments")


def segment_sum(a: Tensor, segments, count: int) -> Tensor:
    """Sum rows sharing a segment id into ``count`` output rows."""
    segments = np.asarray(segments, dtype=np.int64)
    _check_segments("segment_sum", a, segments, count)
    out = np.zeros((count, a.cols))
    np.add.at(out, segments, a.data)
    return _emit("segment_sum", (a,), out, lambda g, needs: (g[segments],))


def segment_max(a: Tensor, segments, count: int) -> Tensor:
    """Columnwise max over rows of each segment; empty segments give zeros."""
    segments = np.asarray(segments, dtype=np.int64)
    _check_segments("segment_max", a, segments, count)
    rows, cols = a.shape
    out = np.full((count, cols), -np.inf)
    np.maximum.at(out, segments, a.data)
    empty = np.bincount(segments, minlength=count) == 0
    out[empty] = 0.0

    # first row reaching the maximum wins
    winner = np.full((count, cols), rows, dtype=np.int64)
    hits = a.data == out[segments]
    candidates = np.where(hits, np.arange(rows)[:, None], rows)
    np.minimum.at(winner, segments, candidates)
    shape = a.shape

    def backward(g, needs):
        grad = np.zeros(shape)
        seg_idx, col_idx = np.nonzero(winner < rows)
        np.add.at(grad, (winner[seg_idx, col_idx], col_idx), g[seg_idx, col_idx])
        return (grad,)

    return _emit("segment_max", (a,), out, backward)


def mean_rows(a: Tensor) -> Tensor:
    n = a.rows
    return _emit(
        "mean_rows",
        (a,),
        a.data.mean(axis=0, keepdims=True),
        lambda g, needs: (np.repeat(g / n, n, axis=0),),
    )


def segment_mean(a: Tensor, segments, count: int) -> Tensor:
    segments = np.asarray(segments, dtype=np.int64)
    _check_segments("segment_mean", a, segments, count)
    counts = np.bincount(segments, minlength=count).astype(np.float64)
    safe = np.maximum(counts, 1.0)[:, None]
    out = np.zeros((count, a.cols))
    np.add.at(out, segments, a.data)
    out /= safe
    return _emit(
        "segment_mean", (a,), out, lambda g, needs: ((g / safe)[segments],)
    )


def frobenius_sq(a: Tensor) -> Tensor:
    x = a.data
    return _emit(
        "frobenius_sq",
        (a,),
        np.array([[np.sum(x * x)]]),
        lambda g, needs: (2.0 * x * g[0, 0],),
    )


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit(
        "sum_all",
        (a,),
        np.array([[a.data.sum()]]),
        lambda g, needs: (np.full(shape, g[0, 0]),),
    )


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` rows against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    m, c = logits.shape
    if labels.shape != (m,):
        raise ShapeError(
            f"softmax_cross_entropy: labels shape {labels.shape} vs logits {logits.shape}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(
            f"softmax_cross_entropy: labels must lie in [0, {c}), "
            f"got range [{labels.min()}, {labels.max()}]"
        )
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    loss = -log_probs[np.arange(m), labels].mean()

    def backward(g, needs):
        grad = np.exp(log_probs)
        grad[np.arange(m), labels] -= 1.0
        return (grad * (g[0, 0] / m),)

    return _emit("softmax_cross_entropy", (logits,), np.array([[loss]]), backward)


def reshape(a: Tensor, shape: Tuple[int, int]) -> Tensor:
    """Row-major reshape."""
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    original = a.shape
    return _emit(
        "reshape",
        (a,),
        a.data.reshape(shape),
        lambda g, needs: (g.reshape(original),),
    )


def take_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.cols:
        raise ShapeError(f"take_cols: range [{start}, {stop}) invalid for {a.shape}")
    shape = a.shape

    def backward(g, needs):
        grad = np.zeros(shape)
        grad[:, start:stop] = g
        return (grad,)

    return _emit("take_cols", (a,), a.data[:, start:stop], backward)


def row_outer(a: Tensor, b: Tensor) -> Tensor:
    """Per-row outer product, flattened as ``[i][j]`` into ``a.cols * b.cols``."""
    if a.rows != b.rows:
        raise ShapeError(f"row_outer: incompatible shapes {a.shape} and {b.shape}")
    x, y = a.data, b.data
    n, p, q = x.shape[0], x.shape[1], y.shape[1]
    out = (x[:, :, None] * y[:, None, :]).reshape(n, p * q)

    def backward(g, needs):
        g3 = g.reshape(n, p, q)
        return (
            np.einsum("npq,nq->np", g3, y) if needs[0] else None,
            np.einsum("npq,np->nq", g3, x) if needs[1] else None,
        )

    return _emit("row_outer", (a, b), out, backward)


def frame_matmul(
    a: Tensor, b: Tensor, transpose_a: bool = False, transpose_b: bool = False
) -> Tensor:
    """Row-wise 3x3 products.

    Each row of ``a`` holds one row-major 3x3 matrix, each row of ``b`` holds
    ``m`` of them. Row ``n`` of the output holds ``op(A_n) @ op(B_{n,i})`` for
    every ``i < m``.
    """
    if a.cols != 9 or b.cols % 9 or a.rows != b.rows:
        raise ShapeError(f"frame_matmul: incompatible shapes {a.shape} and {b.shape}")
    n, m = a.rows, b.cols // 9
    left = a.data.reshape(n, 3, 3)
    right = b.data.reshape(n, m, 3, 3)
    if transpose_a:
        left = left.transpose(0, 2, 1)
    if transpose_b:
        right = right.transpose(0, 1, 3, 2)
    out = np.einsum("nij,nmjk->nmik", left, right).reshape(n, 9 * m)

    def backward(g, needs):
        g4 = g.reshape(n, m, 3, 3)
        grad_a = grad_b = None
        if needs[0]:
            grad_left = np.einsum("nmik,nmjk->nij", g4, right)
            if transpose_a:
                grad_left = grad_left.transpose(0, 2, 1)
            grad_a = grad_left.reshape(n, 9)
        if needs[1]:
            grad_right = np.einsum("nij,nmik->nmjk", left, g4)
            if transpose_b:
                grad_right = grad_right.transpose(0, 1, 3, 2)
            grad_b = grad_right.reshape(n, 9 * m)
        return grad_a, grad_b

    return _emit("frame_matmul", (a, b), out, backward)


def frame_vecmul(frames: Tensor, vectors: Tensor, transpose: bool = False) -> Tensor:
    """Row-wise ``R_n @ v_n`` (or ``R_nᵀ @ v_n``) for 3x3 frames and 3-vectors."""
    if frames.cols != 9 or vectors.cols != 3 or frames.rows != vectors.rows:
        raise ShapeError(
            f"frame_vecmul: incompatible shapes {frames.shape} and {vectors.shape}"
        )
    r = frames.data.reshape(-1, 3, 3)
    v = vectors.data
    if transpose:
        out = np.einsum("nji,nj->ni", r, v)
    else:
        out = np.einsum("nij,nj->ni", r, v)

    def backward(g, needs):
        grad_r = grad_v = None
        if needs[0]:
            outer = (v[:, :, None] * g[:, None, :]) if transpose else (
                g[:, :, None] * v[:, None, :]
            )
            grad_r = outer.reshape(-1, 9)
        if needs[1]:
            if transpose:
                grad_v = np.einsum("nij,nj->ni", r, g)
            else:
                grad_v = np.einsum("nji,nj->ni", r, g)
        return grad_r, grad_v

    return _emit("frame_vecmul", (frames, vectors), out, backward)


def kernel_influence(offsets: Tensor, kernel_points: np.ndarray, sigma: float) -> Tensor:
    """Linear kernel-point influence ``max(0, 1 - |y - x_k| / sigma)`` per row."""
    if offsets.cols != 3:
        raise ShapeError(f"kernel_influence: offsets must be (n, 3), got {offsets.shape}")
    if sigma <= 0:
        raise ValueError(f"kernel_influence: sigma must be positive, got {sigma}")
    kernel_points = np.asarray(kernel_points, dtype=np.float64)
    diff = offsets.data[:, None, :] - kernel_points[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    out = np.maximum(0.0, 1.0 - dist / sigma)

    def backward(g, needs):
        active = (out > 0) & (dist > 0)
        coeff = np.where(active, -g / (sigma * np.where(dist > 0, dist, 1.0)), 0.0)
        return (np.einsum("nk,nkd->nd", coeff, diff),)

    return _emit("kernel_influence", (offsets,), out, backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str = "train",
    update_stats: bool = True,
) -> Tensor:
    """Batch normalization over rows.

    Args:
        x: (rows, width) input.
        gamma: (1, width) scale.
        beta: (1, width) shift.
        state: running statistics, updated in place in train mode.
        mode: "train" normalizes by batch statistics, "eval" by running ones.
        update_stats: set False to leave running statistics untouched.

    Returns:
        Normalized tensor of the same shape as ``x``.
    """
    width = x.cols
    if gamma.shape != (1, width) or beta.shape != (1, width):
        raise ShapeError(
            f"batch_norm: gamma {gamma.shape} / beta {beta.shape} do not match {x.shape}"
        )
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm: mode must be 'train' or 'eval', got {mode!r}")
    data, g_scale = x.data, gamma.data

    if mode == "train":
        mean = data.mean(axis=0, keepdims=True)
        var = ((data - mean) ** 2).mean(axis=0, keepdims=True)
        if update_stats:
            state.running_mean = BN_MOMENTUM * state.running_mean + (1 - BN_MOMENTUM) * mean
            state.running_var = BN_MOMENTUM * state.running_var + (1 - BN_MOMENTUM) * var
    else:
        mean, var = state.running_mean, state.running_var

    inv_std = 1.0 / np.sqrt(var + BN_EPSILON)
    x_hat = (data - mean) * inv_std
    out = g_scale * x_hat + beta.data
    m = data.shape[0]

    def backward(g, needs):
        grad_x = None
        if needs[0]:
            d_hat = g * g_scale
            if mode == "train":
                grad_x = (inv_std / m) * (
                    m * d_hat
                    - d_hat.sum(axis=0, keepdims=True)
                    - x_hat * np.sum(d_hat * x_hat, axis=0, keepdims=True)
                )
            else:
                grad_x = d_hat * inv_std
        return (
            grad_x,
            np.sum(g * x_hat, axis=0, keepdims=True) if needs[1] else None,
            g.sum(axis=0, keepdims=True) if needs[2] else None,
        )

    return _emit("batch_norm", (x, gamma, beta), out, backward)


_PRIMITIVES: Dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "scale": scale,
    "concat_cols": lambda *ts: concat_cols(ts),
    "concat_rows": lambda *ts: concat_rows(ts),
    "relu": relu,
    "gather_rows": gather_rows,
    "segment_sum": segment_sum,
    "segment_max": segment_max,
    "mean_rows": mean_rows,
    "segment_mean": segment_mean,
    "frobenius_sq": frobenius_sq,
    "sum_all": sum_all,
    "softmax_cross_entropy": softmax_cross_entropy,
    "reshape": reshape,
    "take_cols": take_cols,
    "row_outer": row_outer,
    "frame_matmul": frame_matmul,
    "frame_vecmul": frame_vecmul,
    "kernel_influence": kernel_influence,
    "batch_norm": batch_norm,
}


def primitive_forward(kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch a primitive by name, e.g. ``primitive_forward("relu", x)``."""
    try:
        op = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(
            f"Unknown primitive '{kind}'. Known: {', '.join(sorted(_PRIMITIVES))}"
        ) from None
    return op(*inputs, **attrs)


# ---------------------------------------------------------------------------
# Gradients and updates
# ---------------------------------------------------------------------------


def backward(
    tape: Tape, loss: Tensor, params: Optional[Iterable[Parameter]] = None
) -> Dict[str, np.ndarray]:
    """Propagate d(loss)/d(node) through the tape in reverse order.

    Args:
        tape: The tape the loss was recorded on.
        loss: A (1, 1) tensor.
        params: Parameters to report; defaults to every parameter the tape saw.

    Returns:
        Gradient per parameter name. Parameters the loss does not reach get
        zeros. Each gradient is also added to the parameter's accumulator.

    Raises:
        ShapeError: If the loss is not a scalar.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"backward: loss must be a (1, 1) scalar, got {loss.shape}")

    grads: Dict[int, np.ndarray] = {}
    if loss.node is not None:
        grads[loss.node] = np.ones((1, 1))
        for entry in reversed(tape.entries):
            upstream = grads.pop(entry.output, None)
            if upstream is None:
                continue
            needs = tuple(node is not None for node in entry.inputs)
            partials = entry.backward(upstream, needs)
            for node, partial in zip(entry.inputs, partials):
                if node is None or partial is None:
                    continue
                if node in grads:
                    grads[node] = grads[node] + partial
                else:
                    grads[node] = partial

    targets = list(params) if params is not None else tape.parameters()
    result: Dict[str, np.ndarray] = {}
    for param in targets:
        node = tape.node_of(param)
        grad = grads.get(node) if node is not None else None
        if grad is None:
            grad = np.zeros_like(param.data)
        param.grad = param.grad + grad
        result[param.name] = grad
    return result


def check_finite(value, where: str):
    array = value.data if isinstance(value, Tensor) else np.asarray(value)
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"Non-finite values encountered in {where}")


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for name in grads:
            grads[name] = grads[name] * factor
    return total


def sgd_step(
    params: Iterable[Parameter],
    grads: Optional[Mapping[str, np.ndarray]],
    lr: float,
    momentum: float = 0.0,
):
    """Momentum SGD: ``v <- momentum * v - lr * g``; ``p <- p + v``.

    When ``grads`` is None each parameter's accumulator is used.
    """
    if lr <= 0:
        raise ValueError(f"Learning rate must be positive, got {lr}")
    for param in params:
        grad = param.grad if grads is None else grads[param.name]
        if grad.shape != param.shape:
            raise ShapeError(
                f"sgd_step: gradient {grad.shape} does not match parameter "
                f"'{param.name}' {param.shape}"
            )
        param.velocity = momentum * param.velocity - lr * grad
        param.data = param.data + param.velocity


class ParameterStore:
    """Registry of named parameters and batch-norm buffers for one model."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: Dict[str, Parameter] = {}
        self.buffers: Dict[str, BatchNormState] = {}

    def create(self, name: str, shape: Tuple[int, int], init: str = "kaiming",
               fan_in: Optional[int] = None, gain: float = 1.0) -> Parameter:
        if name in self.params:
            raise ValueError(f"Duplicate parameter name '{name}'")
        if init == "kaiming":
            fan = fan_in if fan_in is not None else shape[0]
            data = self.rng.normal(0.0, gain * np.sqrt(2.0 / max(fan, 1)), size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ValueError(f"Unknown initializer '{init}'")
        param = Parameter(name, data)
        self.params[name] = param
        return param

    def add_buffer(self, name: str, width: int) -> BatchNormState:
        if name in self.buffers:
            raise ValueError(f"Duplicate buffer name '{name}'")
        state = BatchNormState.fresh(width)
        self.buffers[name] = state
        return state

    def parameters(self) -> List[Parameter]:
        return list(self.params.values())

    def count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self):
        for param in self.params.values():
            param.zero_grad()
