"""
Dense float64 tensors with reverse-mode differentiation.

Every Tensor is also a tape node: it remembers the op that produced it, its
parent tensors and a closure that maps the output gradient to one gradient per
parent. `backward(loss)` walks the tape in reverse topological order.

`finite_diff_grad` and `grad_check` are the central-difference oracle every
layer's backward pass is tested against.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class InvalidInputError(ValueError):
    """Raised whenever an operation receives shapes or values it cannot work with."""


class Tensor:
    """
    N-dimensional float64 array that records how it was computed.

    Leaves are created directly (optionally with requires_grad=True); every
    other tensor is produced by an op and keeps `parents` plus a backward
    closure. `grad` is filled by `backward()`.
    """

    # make `ndarray <op> Tensor` defer to Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        parents: Tuple["Tensor", ...] = (),
        backward_fn: Optional[BackwardFn] = None,
        op: str = "leaf",
    ):
        self.data: np.ndarray = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.grad: Optional[np.ndarray] = None

    # ------------------------------------------------------------------
    # basic properties
    # ------------------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.backward_fn is None

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def item(self) -> float:
        if self.data.size != 1:
            raise InvalidInputError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    # arithmetic
    # ------------------------------------------------------------------

    def __add__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return make_node(
            self.data + other.data,
            (self, other),
            lambda g: (unbroadcast(g, a_shape), unbroadcast(g, b_shape)),
            "add",
        )

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) + self

    def __sub__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return make_node(
            self.data - other.data,
            (self, other),
            lambda g: (unbroadcast(g, a_shape), unbroadcast(-g, b_shape)),
            "sub",
        )

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return make_node(
            a * b,
            (self, other),
            lambda g: (unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)),
            "mul",
        )

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) * self

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return make_node(
            a / b,
            (self, other),
            lambda g: (unbroadcast(g / b, a.shape), unbroadcast(-g * a / (b * b), b.shape)),
            "div",
        )

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) / self

    def __neg__(self) -> "Tensor":
        return make_node(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float) -> "Tensor":
        a = self.data
        p = float(exponent)
        return make_node(a**p, (self,), lambda g: (g * p * a ** (p - 1.0),), "pow")

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        shape = self.shape

        def _backward(g: np.ndarray):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            return (full,)

        return make_node(self.data[index], (self,), _backward, "getitem")

    # ------------------------------------------------------------------
    # elementwise functions
    # ------------------------------------------------------------------

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return make_node(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        a = self.data
        return make_node(np.log(a), (self,), lambda g: (g / a,), "log")

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return make_node(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    def abs(self) -> "Tensor":
        a = self.data
        return make_node(np.abs(a), (self,), lambda g: (g * np.sign(a),), "abs")

    def relu(self) -> "Tensor":
        mask = (self.data > 0).astype(np.float64)
        return make_node(self.data * mask, (self,), lambda g: (g * mask,), "relu")

    # ------------------------------------------------------------------
    # reductions and shape ops
    # ------------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        axes = _normalize_axes(axis, self.ndim)

        def _backward(g: np.ndarray):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, shape).copy(),)

        return make_node(self.data.sum(axis=axes, keepdims=keepdims), (self,), _backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        axes = _normalize_axes(axis, self.ndim)
        count = int(np.prod([self.shape[a] for a in axes])) if axes else 1
        if count == 0:
            raise InvalidInputError("mean over an empty axis")
        return self.sum(axis=axes, keepdims=keepdims) / float(count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        return make_node(self.data.reshape(shape), (self,), lambda g: (g.reshape(original),), "reshape")

    def transpose(self, axes: Optional[Sequence[int]] = None) -> "Tensor":
        if axes is None:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return make_node(
            np.transpose(self.data, axes), (self,), lambda g: (np.transpose(g, inverse),), "transpose"
        )


class Parameter(Tensor):
    """
    A learnable leaf tensor.

    bounds: optional closed interval the optimizer projects the value back into.
    decay: whether weight decay applies to this parameter.
    """

    def __init__(
        self,
        data: ArrayLike,
        name: str = "",
        bounds: Optional[Tuple[float, float]] = None,
        decay: bool = True,
    ):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.bounds = bounds
        self.decay = decay

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape}, bounds={self.bounds})"


# ----------------------------------------------------------------------
# tape plumbing
# ----------------------------------------------------------------------


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def make_node(
    data: np.ndarray,
    parents: Tuple[Tensor, ...],
    backward_fn: BackwardFn,
    op: str,
) -> Tensor:
    """Create the output tensor of an op. Constant inputs produce a constant output."""
    requires_grad = any(p.requires_grad for p in parents)
    if not requires_grad:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for dim, extent in enumerate(shape):
        if extent == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _topological_order(root: Tensor) -> List[Tensor]:
    # Iterative post-order DFS; parents are explored in declaration order.
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.parents):
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """
    Reverse-mode sweep from a scalar loss.

    Every node on the tape gets a zeroed gradient accumulator, the loss is
    seeded with 1, and nodes are visited once in reverse topological order.

    Returns:
        Mapping leaf tensor -> gradient array (same shape as the leaf).
    """
    if loss.data.size != 1:
        raise InvalidInputError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}

    order = _topological_order(loss)
    for node in order:
        node.grad = np.zeros_like(node.data)
    loss.grad = np.ones_like(loss.data)

    for node in reversed(order):
        if node.backward_fn is None:
            continue
        parent_grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, parent_grads):
            if g is None or not parent.requires_grad:
                continue
            parent.grad += g

    leaves = {node: node.grad for node in order if node.is_leaf}
    logger.debug("backward visited %d nodes, %d leaves", len(order), len(leaves))
    return leaves


# ----------------------------------------------------------------------
# ops used by the normalization layers and models
# ----------------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise InvalidInputError("concat of zero tensors")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def _backward(g: np.ndarray):
        return tuple(np.split(g, cuts, axis=axis))

    return make_node(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), _backward, "concat"
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise InvalidInputError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def _backward(g: np.ndarray):
        if y.ndim == 1:
            return np.outer(g, y), x.T @ g
        return g @ y.T, x.T @ g

    return make_node(x @ y, (a, b), _backward, "matmul")


def matvec(matrix: Tensor, vector: Tensor) -> Tensor:
    """Matrix-vector product M·v."""
    if matrix.ndim != 2 or vector.ndim != 1 or matrix.shape[1] != vector.shape[0]:
        raise InvalidInputError(f"matvec shape mismatch: {matrix.shape} · {vector.shape}")
    return matmul(matrix, vector)


def softmax_rows(matrix: Tensor) -> Tensor:
    """Row-wise softmax; each row's maximum is subtracted before exponentiating."""
    if matrix.ndim != 2:
        raise InvalidInputError(f"softmax_rows needs a matrix, got shape {matrix.shape}")
    shifted = matrix.data - matrix.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def _backward(g: np.ndarray):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return make_node(s, (matrix,), _backward, "softmax_rows")


def log_softmax(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def _backward(g: np.ndarray):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return make_node(out, (logits,), _backward, "log_softmax")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under row-softmax logits."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise InvalidInputError(f"cross_entropy shape mismatch: {logits.shape} vs labels {labels.shape}")
    if labels.size == 0:
        raise InvalidInputError("cross_entropy over an empty batch")
    picked = log_softmax(logits)[np.arange(labels.size), labels]
    return -picked.mean()


def reduction_axes(ndim: int) -> Tuple[int, ...]:
    """All axes except the channel axis (axis 1)."""
    return (0,) + tuple(range(2, ndim))


def channel_moments(x: Tensor) -> Tuple[Tensor, Tensor]:
    """
    Per-channel batch mean and biased variance of x[N, C, ...].

    Both come from one fused node so x sees a single gradient contribution
    from its statistics.
    """
    if x.ndim < 2:
        raise InvalidInputError(f"channel_moments needs at least [N, C], got shape {x.shape}")
    axes = reduction_axes(x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise InvalidInputError("channel_moments on an empty batch")

    channels = x.shape[1]
    bshape = (1, channels) + (1,) * (x.ndim - 2)
    mu = x.data.mean(axis=axes)
    centered = x.data - mu.reshape(bshape)
    var = (centered * centered).mean(axis=axes)

    def _backward(g: np.ndarray):
        g_mu = g[0].reshape(bshape)
        g_var = g[1].reshape(bshape)
        return (np.broadcast_to(g_mu / count, x.shape) + g_var * 2.0 * centered / count,)

    stacked = make_node(np.stack([mu, var]), (x,), _backward, "channel_moments")
    return stacked[0], stacked[1]


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Valid-padding, stride-1 2-D convolution: x[N,Cin,H,W], weight[Cout,Cin,kh,kw]."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise InvalidInputError(f"conv2d shape mismatch: {x.shape} vs weight {weight.shape}")
    kh, kw = weight.shape[2], weight.shape[3]
    if x.shape[2] < kh or x.shape[3] < kw:
        raise InvalidInputError(f"conv2d kernel {kh}x{kw} larger than input {x.shape[2:]}")

    windows = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    out = np.einsum("nchwij,ocij->nohw", windows, weight.data)
    out_h, out_w = out.shape[2], out.shape[3]
    w = weight.data

    def _backward_x_w(g: np.ndarray):
        gx = np.zeros(x.shape)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i : i + out_h, j : j + out_w] += np.einsum("nohw,oc->nchw", g, w[:, :, i, j])
        gw = np.einsum("nchwij,nohw->ocij", windows, g)
        return gx, gw

    node = make_node(out, (x, weight), _backward_x_w, "conv2d")
    if bias is None:
        return node
    return node + bias.reshape(1, -1, 1, 1)


# ----------------------------------------------------------------------
# finite-difference oracle
# ----------------------------------------------------------------------


def _scalar(value: Union[Tensor, float]) -> float:
    if isinstance(value, Tensor):
        return value.item()
    return float(value)


def finite_diff_grad(
    f: Callable[[Tensor], Union[Tensor, float]],
    x: Union[Tensor, ArrayLike],
    h: float = 1e-5,
) -> np.ndarray:
    """Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate of x."""
    if h <= 0:
        raise InvalidInputError(f"finite-difference step must be positive, got {h}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    for i in range(base.size):
        original = base.flat[i]
        base.flat[i] = original + h
        f_plus = _scalar(f(Tensor(base.copy())))
        base.flat[i] = original - h
        f_minus = _scalar(f(Tensor(base.copy())))
        base.flat[i] = original
        grad.flat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


@dataclass
class GradCheckResult:
    """Outcome of comparing analytic gradients with central differences."""

    tolerance: float
    errors: Dict[str, float] = field(default_factory=dict)
    worst_input: str = ""
    worst_index: Tuple[int, ...] = ()
    worst_error: float = 0.0
    worst_analytic: float = 0.0
    worst_numeric: float = 0.0

    @property
    def passed(self) -> bool:
        return self.worst_error <= self.tolerance

    def describe(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} worst relative error {self.worst_error:.3e} (tol {self.tolerance:.1e}) "
            f"at {self.worst_input}{list(self.worst_index)}: "
            f"analytic={self.worst_analytic:.10g} numeric={self.worst_numeric:.10g}"
        )


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor turns tiny gradients into an absolute check."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def grad_check(
    loss_fn: Callable[[Dict[str, Tensor]], Tensor],
    inputs: Dict[str, ArrayLike],
    tol: float = 1e-4,
    h: float = 1e-5,
) -> GradCheckResult:
    """
    Compare backward() against finite_diff_grad for every named input.

    loss_fn receives a dict name -> Tensor and must return a scalar Tensor.
    With the default floor of 1e-3 a coordinate passes when
    |a - n| <= tol * max(|a|, |n|, 1e-3), i.e. 1e-4 relative with a 1e-7 absolute floor.
    """
    arrays = {name: np.array(value.data if isinstance(value, Tensor) else value, dtype=np.float64)
              for name, value in inputs.items()}
    leaves = {name: Tensor(arr.copy(), requires_grad=True) for name, arr in arrays.items()}
    loss = loss_fn(leaves)
    backward(loss)

    result = GradCheckResult(tolerance=tol)
    result.worst_error = -1.0
    for name, arr in arrays.items():
        analytic = leaves[name].grad if leaves[name].grad is not None else np.zeros_like(arr)

        def probe(t: Tensor, _name=name) -> Tensor:
            probe_inputs = {k: Tensor(v) for k, v in arrays.items()}
            probe_inputs[_name] = t
            return loss_fn(probe_inputs)

        numeric = finite_diff_grad(probe, arr, h)
        errors = relative_error(analytic, numeric)
        flat = int(np.argmax(errors)) if errors.size else 0
        result.errors[name] = float(errors.max()) if errors.size else 0.0
        if errors.size and errors.flat[flat] > result.worst_error:
            result.worst_error = float(errors.flat[flat])
            result.worst_input = name
            result.worst_index = tuple(int(i) for i in np.unravel_index(flat, arr.shape))
            result.worst_analytic = float(analytic.flat[flat])
            result.worst_numeric = float(numeric.flat[flat])
    result.worst_error = max(result.worst_error, 0.0)
    logger.debug("grad_check: %s", result.describe())
    return result
