"""
Dense tensor numerics for ACT Lab.
Provides 64-bit tensors, differentiable primitives and a reverse-mode tape.
"""

import logging
from typing import Any, Callable, Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

DTYPE = np.float64

ArrayLike = Union[np.ndarray, float, int, Sequence[Any]]


class ShapeError(ValueError):
    """Exception raised when operand shapes are incompatible."""

    pass


class NumericalError(ArithmeticError):
    """Exception raised when an operation produces non-finite values."""

    pass


class ContractError(RuntimeError):
    """Exception raised when a differentiation contract is violated."""

    pass


def _log_softmax_rows(values: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax using the max-shift trick."""
    shifted = values - values.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def log_softmax_array(values: np.ndarray) -> np.ndarray:
    """
    Row-wise log-probabilities of a plain array (no tape).

    Shares its arithmetic with the differentiable ``log_softmax`` so constants
    derived from it match the tape values bit for bit.
    """
    return _log_softmax_rows(np.asarray(values, dtype=DTYPE))


def softmax_array(values: np.ndarray) -> np.ndarray:
    """Row-wise probabilities of a plain array (no tape)."""
    return np.exp(log_softmax_array(values))


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement ``forward`` on raw arrays and ``backward`` mapping the
    gradient of the output to one gradient per input (``None`` when an input
    receives nothing).
    """

    name = "function"

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{self.name} has no forward pass")

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{self.name} has no backward pass")

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs: Any) -> "Tensor":
        """
        Run the forward pass and attach the result to the tape.

        Args:
            *inputs: Operand tensors
            **kwargs: Operation parameters forwarded to ``forward``

        Returns:
            Output tensor, recording this function as its creator when any
            operand requires gradients

        Raises:
            NumericalError: If the forward pass produced non-finite values
        """
        func = cls(*inputs)
        with np.errstate(over="ignore", invalid="ignore"):
            out = func.forward(*(t.data for t in inputs), **kwargs)
        if not np.all(np.isfinite(out)):
            raise NumericalError(f"{cls.name} produced non-finite values")
        requires_grad = any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=requires_grad, creator=func if requires_grad else None)


class Tensor:
    """
    An n-dimensional float64 array participating in a differentiation tape.

    Leaves created with ``requires_grad=True`` collect gradients; tensors
    produced by operations remember their creator function.
    """

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        creator: Optional[Function] = None,
    ):
        self.data: np.ndarray = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.creator = creator
        self.node_id: Optional[int] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def is_leaf(self) -> bool:
        return self.creator is None

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        """Return a constant tensor sharing this tensor's values."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic

    def __add__(self, other: Any) -> "Tensor":
        if _is_scalar(other):
            return AddScalar.apply(self, value=float(other))
        return Add.apply(self, as_tensor(other))

    def __radd__(self, other: Any) -> "Tensor":
        return self.__add__(other)

    def __sub__(self, other: Any) -> "Tensor":
        if _is_scalar(other):
            return AddScalar.apply(self, value=-float(other))
        return Sub.apply(self, as_tensor(other))

    def __rsub__(self, other: Any) -> "Tensor":
        return (-self) + other

    def __mul__(self, other: Any) -> "Tensor":
        if _is_scalar(other):
            return Scale.apply(self, factor=float(other))
        return Mul.apply(self, as_tensor(other))

    def __rmul__(self, other: Any) -> "Tensor":
        return self.__mul__(other)

    def __truediv__(self, other: Any) -> "Tensor":
        if not _is_scalar(other):
            raise ShapeError("tensor division is only defined by a scalar")
        return Scale.apply(self, factor=1.0 / float(other))

    def __neg__(self) -> "Tensor":
        return Scale.apply(self, factor=-1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, as_tensor(other))

    # Reductions and views

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return Sum.apply(self, axis=axis)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        count = self.size if axis is None else self.shape[axis]
        return Scale.apply(Sum.apply(self, axis=axis), factor=1.0 / count)

    def reshape(self, *shape: int) -> "Tensor":
        return Reshape.apply(self, shape=tuple(shape))

    @property
    def T(self) -> "Tensor":
        return Transpose.apply(self)

    def backward(self) -> None:
        """Accumulate gradients into every leaf that requires them."""
        tape = Tape(self)
        grads = tape.backward()
        for node in tape.nodes:
            tensor = node.tensor
            if tensor.is_leaf and tensor.requires_grad:
                grad = grads.get(node.node_id)
                if grad is None:
                    grad = np.zeros_like(tensor.data)
                tensor.grad = grad if tensor.grad is None else tensor.grad + grad


def _is_scalar(value: Any) -> bool:
    return isinstance(value, (int, float, np.floating, np.integer)) and not isinstance(value, bool)


def as_tensor(value: Any) -> Tensor:
    """Wrap arrays and numbers as constant tensors; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False)


# Elementwise primitives


def _check_same_or_bias(op: str, a: np.ndarray, b: np.ndarray) -> bool:
    """Return True for a bias-add over the batch dimension, False for equal shapes."""
    if a.shape == b.shape:
        return False
    if a.ndim >= 2 and b.shape == a.shape[1:]:
        return True
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


class Add(Function):
    name = "add"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.bias = _check_same_or_bias(self.name, a, b)
        return a + b

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return grad, grad.sum(axis=0) if self.bias else grad


class Sub(Function):
    name = "sub"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.bias = _check_same_or_bias(self.name, a, b)
        return a - b

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return grad, -(grad.sum(axis=0) if self.bias else grad)


class Mul(Function):
    name = "mul"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.shape != b.shape:
            raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
        self.a, self.b = a, b
        return a * b

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return grad * self.b, grad * self.a


class Scale(Function):
    name = "scale"

    def forward(self, a: np.ndarray, factor: float = 1.0) -> np.ndarray:
        self.factor = factor
        return a * factor

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (grad * self.factor,)


class AddScalar(Function):
    name = "add_scalar"

    def forward(self, a: np.ndarray, value: float = 0.0) -> np.ndarray:
        return a + value

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (grad,)


class Relu(Function):
    name = "relu"

    def forward(self, a: np.ndarray) -> np.ndarray:
        # subgradient at 0 is 0
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (grad * self.mask,)


# Shape primitives


class Sum(Function):
    name = "sum"

    def forward(self, a: np.ndarray, axis: Optional[int] = None) -> np.ndarray:
        self.axis = axis
        self.in_shape = a.shape
        return np.asarray(a.sum(axis=axis))

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        if self.axis is None:
            return (np.full(self.in_shape, float(grad.reshape(-1)[0])),)
        return (np.broadcast_to(np.expand_dims(grad, self.axis), self.in_shape).copy(),)


class Reshape(Function):
    name = "reshape"

    def forward(self, a: np.ndarray, shape: tuple[int, ...] = ()) -> np.ndarray:
        self.in_shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot view shape {a.shape} as {shape}")

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (grad.reshape(self.in_shape),)


class Transpose(Function):
    name = "transpose"

    def forward(self, a: np.ndarray) -> np.ndarray:
        if a.ndim != 2:
            raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
        return a.T.copy()

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (grad.T.copy(),)


class Pick(Function):
    """Select one entry per row: ``out[i] = a[i, index[i]]``."""

    name = "pick"

    def forward(self, a: np.ndarray, index: Optional[np.ndarray] = None) -> np.ndarray:
        if a.ndim != 2 or index is None or index.shape != (a.shape[0],):
            raise ShapeError(f"pick: index must have one entry per row of {a.shape}")
        self.index = index
        self.in_shape = a.shape
        return a[np.arange(a.shape[0]), index]

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        out = np.zeros(self.in_shape)
        out[np.arange(self.in_shape[0]), self.index] = grad
        return (out,)


# Linear algebra and layers


class MatMul(Function):
    name = "matmul"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return grad @ self.b.T, self.a.T @ grad


class Conv2d(Function):
    """Cross-correlation with zero padding over NCHW inputs."""

    name = "conv2d"

    def forward(
        self,
        x: np.ndarray,
        w: np.ndarray,
        b: Optional[np.ndarray] = None,
        stride: int = 1,
        pad: int = 0,
    ) -> np.ndarray:
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d: incompatible input {x.shape} and kernel {w.shape}")
        if stride < 1 or pad < 0:
            raise ShapeError(f"conv2d: invalid stride {stride} or pad {pad}")
        n, c, h, wd = x.shape
        f, _, kh, kw = w.shape
        if b is not None and b.shape != (f,):
            raise ShapeError(f"conv2d: bias {b.shape} does not match {f} filters")
        span_h, span_w = h + 2 * pad - kh, wd + 2 * pad - kw
        if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
            raise ShapeError(
                f"conv2d: non-integral output size for input {x.shape}, "
                f"kernel {w.shape}, stride {stride}, pad {pad}"
            )
        out_h, out_w = span_h // stride + 1, span_w // stride + 1
        padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
        windows = windows[:, :, ::stride, ::stride]
        self.windows, self.w = windows, w
        self.padded_shape, self.stride, self.pad = padded.shape, stride, pad
        self.out_hw = (out_h, out_w)
        out = np.einsum("nchwij,fcij->nfhw", windows, w)
        if b is not None:
            out = out + b.reshape(1, f, 1, 1)
        return out

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        f, _, kh, kw = self.w.shape
        out_h, out_w = self.out_hw
        s = self.stride
        dw = np.einsum("nchwij,nfhw->fcij", self.windows, grad)
        dpadded = np.zeros(self.padded_shape)
        for i in range(kh):
            for j in range(kw):
                dpadded[:, :, i : i + s * out_h : s, j : j + s * out_w : s] += np.einsum(
                    "nfhw,fc->nchw", grad, self.w[:, :, i, j]
                )
        p = self.pad
        dx = dpadded[:, :, p : dpadded.shape[2] - p, p : dpadded.shape[3] - p]
        grads: list[Optional[np.ndarray]] = [dx.copy(), dw]
        if len(self.inputs) == 3:
            grads.append(grad.sum(axis=(0, 2, 3)))
        return tuple(grads)


class MaxPool2d(Function):
    """Non-overlapping 2x2 max-pooling; ties route the gradient to the first maximum."""

    name = "maxpool2d"

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"maxpool2d: spatial dims of {x.shape} must be even")
        n, c, h, w = x.shape
        blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
        self.argmax = blocks.argmax(axis=-1)
        self.in_shape = x.shape
        return np.take_along_axis(blocks, self.argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        n, c, h, w = self.in_shape
        blocks = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(blocks, self.argmax[..., None], grad[..., None], axis=-1)
        blocks = blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (blocks.reshape(n, c, h, w),)


class LogSoftmax(Function):
    name = "log_softmax"

    def forward(self, a: np.ndarray) -> np.ndarray:
        if a.ndim != 2 or a.shape[1] < 2:
            raise ShapeError(f"log_softmax: expected N x C logits with C >= 2, got {a.shape}")
        self.out = _log_softmax_rows(a)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (grad - np.exp(self.out) * grad.sum(axis=1, keepdims=True),)


# Functional interface


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product of two 2-D tensors.

    Raises:
        ShapeError: If the inner dimensions disagree (names both shapes)
    """
    return MatMul.apply(a, b)


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
) -> Tensor:
    """
    2-D cross-correlation (no kernel flip) with zero padding.

    Args:
        x: Input of shape N x C x H x W
        w: Kernel of shape F x C x kH x kW
        b: Optional per-filter bias of shape F
        stride: Positive stride
        pad: Non-negative zero padding on each side

    Returns:
        Output of shape N x F x H' x W'

    Raises:
        ShapeError: If the output size is not integral
    """
    if b is None:
        return Conv2d.apply(x, w, stride=stride, pad=pad)
    return Conv2d.apply(x, w, b, stride=stride, pad=pad)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def maxpool2d(x: Tensor) -> Tensor:
    return MaxPool2d.apply(x)


def log_softmax(logits: Tensor) -> Tensor:
    """Row-wise log-probabilities of N x C logits."""
    return LogSoftmax.apply(logits)


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    return Pick.apply(x, index=np.asarray(index, dtype=np.int64))


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the batch dimension."""
    return x.reshape(x.shape[0], int(np.prod(x.shape[1:])))


# Tape


class TapeNode:
    """One record of the tape: the tensor, its op kind and its input ids."""

    def __init__(self, node_id: int, tensor: Tensor, input_ids: tuple[int, ...]):
        self.node_id = node_id
        self.tensor = tensor
        self.op = tensor.creator.name if tensor.creator else "leaf"
        self.input_ids = input_ids


class Tape:
    """
    Topologically ordered record of the operations leading to a scalar root.

    Only tensors that require gradients are recorded; every input id precedes
    its consumer, so a single reverse sweep visits each node once.
    """

    def __init__(self, root: Tensor):
        if root.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        self.root = root
        self.nodes: list[TapeNode] = []
        index: dict[int, int] = {}
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                inputs = _graph_inputs(tensor)
                node = TapeNode(len(self.nodes), tensor, tuple(index[id(t)] for t in inputs))
                tensor.node_id = node.node_id
                index[id(tensor)] = node.node_id
                self.nodes.append(node)
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            for parent in reversed(_graph_inputs(tensor)):
                if id(parent) not in visited:
                    stack.append((parent, False))

    def backward(self) -> dict[int, np.ndarray]:
        """
        Propagate gradients from the root to every recorded node.

        Returns:
            Gradient arrays keyed by node id
        """
        grads: dict[int, np.ndarray] = {}
        if not self.root.requires_grad:
            return grads
        grads[self.root.node_id] = np.ones_like(self.root.data)  # type: ignore[index]
        for node in reversed(self.nodes):
            grad = grads.get(node.node_id)
            creator = node.tensor.creator
            if grad is None or creator is None:
                continue
            input_grads = creator.backward(grad)
            for parent, parent_grad in zip(creator.inputs, input_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = parent.node_id
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad  # type: ignore[index]
        return grads


def _graph_inputs(tensor: Tensor) -> list[Tensor]:
    if tensor.creator is None:
        return []
    return [t for t in tensor.creator.inputs if t.requires_grad]


def backward(root: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
    """
    Reverse-mode gradients of a scalar root with respect to the given leaves.

    Args:
        root: Scalar tensor
        leaves: Tensors to differentiate against

    Returns:
        One gradient array per leaf; leaves not on any path to the root get zeros

    Raises:
        ContractError: If the root is not scalar
    """
    tape = Tape(root)
    grads = tape.backward()
    recorded = {id(node.tensor): node.node_id for node in tape.nodes}
    result = []
    for leaf in leaves:
        node_id = recorded.get(id(leaf))
        grad = grads.get(node_id) if node_id is not None else None
        result.append(np.zeros_like(leaf.data) if grad is None else grad)
    return result


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: ArrayLike,
    h: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """
    Compare tape gradients against central finite differences.

    Args:
        f: Scalar-valued function of one tensor
        x: Point of evaluation
        h: Central difference step
        floor: Lower bound on the relative-error denominator

    Returns:
        Maximum over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, floor)
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    leaf = Tensor(base.copy(), requires_grad=True)
    analytic = backward(f(leaf), [leaf])[0].reshape(-1)

    flat = base.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += h
        minus[i] -= h
        f_plus = f(Tensor(plus.reshape(base.shape))).item()
        f_minus = f(Tensor(minus.reshape(base.shape))).item()
        numeric[i] = (f_plus - f_minus) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    error = float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
    logger.debug(f"finite difference check over {flat.size} coordinates: max rel err {error:.3e}")
    return error
