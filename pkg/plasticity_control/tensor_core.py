"""
Minimal reverse-mode automatic differentiation over dense numpy arrays.

Only the operations required by the convolutional classifier (and the
losses built on top of it) are provided. Every operation records its
parents and a backward rule on the tensor it produces; ``Tensor.backward``
orders the reachable graph topologically and applies the rules in reverse,
visiting each node exactly once.

Tie rules are fixed so runs are reproducible:
    - relu passes zero gradient at exactly 0;
    - abs uses sign(x), i.e. 0 at 0;
    - max pooling routes the gradient to the first maximal element of a
      window in row-major scan order.
"""
import logging
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from plasticity_control import errors

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]


def _no_backward() -> None:
    pass


class Tensor:
    """n-dimensional array participating in a reverse-mode graph.

    Args:
        data: array values; integer input is promoted to float64.
        parents: tensors this one was computed from.
        op: name of the producing operation (debugging only).
        requires_grad: whether gradients should flow into this tensor.
        Op outputs require grad whenever any parent does.
        dtype: optional dtype to cast data to.
    """

    def __init__(
        self,
        data: ArrayLike,
        parents: Sequence["Tensor"] = (),
        op: str = "",
        requires_grad: bool = False,
        dtype: Optional[np.dtype] = None,
    ) -> None:
        array = np.asarray(data, dtype=dtype)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents: Tuple["Tensor", ...] = tuple(parents)
        self._op = op
        self._backward: Callable[[], None] = _no_backward

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, gradient: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            # first contribution: own a copy, upstream buffers may be shared
            self.grad = np.array(np.broadcast_to(gradient, self.data.shape), dtype=self.data.dtype)
        else:
            self.grad += gradient

    def backward(self, seed: Optional[np.ndarray] = None) -> "Graph":
        graph = Graph(self)
        graph.backward(seed=seed)
        return graph

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None) -> "Tensor":
        return tensor_sum(self, axis=axis)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None) -> "Tensor":
        return tensor_mean(self, axis=axis)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"


class Graph:
    """Operation records reachable from a root tensor.

    ``nodes`` holds every tensor that requires grad and is reachable from
    the root, in topological order (parents before children).
    """

    def __init__(self, root: Tensor) -> None:
        self.root = root
        self.nodes: List[Tensor] = self._topological_order(root)

    @staticmethod
    def _topological_order(root: Tensor) -> List[Tensor]:
        order: List[Tensor] = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        """Populate gradients of every node, overwriting earlier values.

        Args:
            seed: upstream gradient for the root; defaults to one, in which
            case the root must be a scalar.

        Raises:
            DimensionError: if no seed is given and the root is not scalar.
        """
        if seed is None:
            if self.root.data.size != 1:
                raise errors.DimensionError(
                    f"backward without seed requires a scalar root, got shape {self.root.shape}"
                )
            seed = np.ones_like(self.root.data)
        for node in self.nodes:
            node.grad = None
        self.root.grad = np.array(seed, dtype=self.root.dtype).reshape(self.root.shape)
        # grads are allocated on first write; nodes nothing flowed into get zeros
        for node in reversed(self.nodes):
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node._backward()


def as_tensor(value: ArrayLike, dtype: Optional[np.dtype] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def parameter(data: ArrayLike, dtype: Optional[np.dtype] = None) -> Tensor:
    """Leaf tensor that receives gradients."""
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


def zero_grad(tensors: Sequence[Tensor]) -> None:
    for tensor in tensors:
        tensor.zero_grad()


def _unbroadcast(gradient: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while gradient.ndim > len(shape):
        gradient = gradient.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and gradient.shape[axis] != 1:
            gradient = gradient.sum(axis=axis, keepdims=True)
    return gradient


def _binary_operands(a: ArrayLike, b: ArrayLike) -> Tuple[Tensor, Tensor]:
    # plain numbers take the dtype of the tensor operand
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        a = Tensor(a, dtype=b.dtype)
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype if not isinstance(b, Tensor) else None)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise errors.DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}")
    return a, b


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary_operands(a, b)
    out = Tensor(a.data + b.data, (a, b), "add")

    def _backward() -> None:
        a._accumulate(_unbroadcast(out.grad, a.shape))
        b._accumulate(_unbroadcast(out.grad, b.shape))

    out._backward = _backward
    return out


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary_operands(a, b)
    out = Tensor(a.data - b.data, (a, b), "sub")

    def _backward() -> None:
        a._accumulate(_unbroadcast(out.grad, a.shape))
        b._accumulate(_unbroadcast(-out.grad, b.shape))

    out._backward = _backward
    return out


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary_operands(a, b)
    out = Tensor(a.data * b.data, (a, b), "mul")

    def _backward() -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad * a.data, b.shape))

    out._backward = _backward
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, (a,), "neg")

    def _backward() -> None:
        a._accumulate(-out.grad)

    out._backward = _backward
    return out


def tensor_abs(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.data), (a,), "abs")

    def _backward() -> None:
        a._accumulate(out.grad * np.sign(a.data))

    out._backward = _backward
    return out


def tensor_sum(a: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None) -> Tensor:
    out = Tensor(np.sum(a.data, axis=axis), (a,), "sum")

    def _backward() -> None:
        gradient = out.grad
        if axis is not None:
            gradient = np.expand_dims(gradient, axis)
        a._accumulate(np.broadcast_to(gradient, a.shape))

    out._backward = _backward
    return out


def tensor_mean(a: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None) -> Tensor:
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    out = Tensor(np.mean(a.data, axis=axis), (a,), "mean")

    def _backward() -> None:
        gradient = out.grad / count
        if axis is not None:
            gradient = np.expand_dims(gradient, axis)
        a._accumulate(np.broadcast_to(gradient, a.shape))

    out._backward = _backward
    return out


def reshape(a: Tensor, shape: Union[int, Tuple[int, ...]]) -> Tensor:
    out = Tensor(a.data.reshape(shape), (a,), "reshape")

    def _backward() -> None:
        a._accumulate(out.grad.reshape(a.shape))

    out._backward = _backward
    return out


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise errors.DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    out = Tensor(a.data.T, (a,), "transpose")

    def _backward() -> None:
        a._accumulate(out.grad.T)

    out._backward = _backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an m×k and a k×n tensor.

    Raises:
        DimensionError: if either operand is not a matrix or the inner
        dimensions disagree; the message names both shapes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise errors.DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = Tensor(a.data @ b.data, (a, b), "matmul")

    def _backward() -> None:
        if a.requires_grad:
            a._accumulate(out.grad @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ out.grad)

    out._backward = _backward
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0).astype(x.dtype), (x,), "relu")

    def _backward() -> None:
        x._accumulate(out.grad * mask)

    out._backward = _backward
    return out


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """Spatial output size of a cross-correlation.

    Raises:
        ConfigurationError: if the stride is not positive, the kernel does
        not fit the padded input or the output size is not integral.
    """
    if stride < 1:
        raise errors.ConfigurationError(f"stride must be >= 1, got {stride}")
    padded = size + 2 * padding
    if kernel > padded:
        raise errors.ConfigurationError(
            f"kernel size {kernel} exceeds padded input size {padded}"
        )
    if (padded - kernel) % stride:
        raise errors.ConfigurationError(
            f"non-integer output size: ({size} + 2*{padding} - {kernel}) / {stride} + 1"
        )
    return (padded - kernel) // stride + 1


def conv2d(
    x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0
) -> Tensor:
    """Cross-correlation with zero padding.

    Args:
        x: input of shape N×C×H×W.
        kernel: filters of shape F×C×kh×kw.
        bias: per-filter offsets of shape F.
        stride: step between windows.
        padding: zeros added on every spatial border.

    Returns:
        output of shape N×F×H'×W' with H' = (H + 2p - kh) / s + 1.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise errors.DimensionError(
            f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}"
        )
    if bias.shape != (kernel.shape[0],):
        raise errors.DimensionError(
            f"conv2d: bias {bias.shape} does not match kernel {kernel.shape}"
        )
    _, _, height, width = x.shape
    num_filters, _, kh, kw = kernel.shape
    out_h = conv_output_size(height, kh, stride, padding)
    out_w = conv_output_size(width, kw, stride, padding)

    num, channels = x.shape[:2]
    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[
        :, :, ::stride, ::stride
    ]
    # im2col: one contiguous (N·H'·W')×(C·kh·kw) buffer, reused by the kernel gradient
    columns = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        num * out_h * out_w, channels * kh * kw
    )
    flat_kernel = kernel.data.reshape(num_filters, -1)
    result = (columns @ flat_kernel.T).reshape(num, out_h, out_w, num_filters)
    result = result.transpose(0, 3, 1, 2) + bias.data[None, :, None, None]
    out = Tensor(np.ascontiguousarray(result), (x, kernel, bias), "conv2d")

    def _backward() -> None:
        gradient = out.grad
        flat_grad = gradient.transpose(0, 2, 3, 1).reshape(-1, num_filters)
        if kernel.requires_grad:
            kernel._accumulate((flat_grad.T @ columns).reshape(kernel.shape))
        if bias.requires_grad:
            bias._accumulate(gradient.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            # N×H'×W'×C×kh×kw, folded back onto the padded input
            column_grad = (flat_grad @ flat_kernel).reshape(num, out_h, out_w, channels, kh, kw)
            padded_grad = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    padded_grad[
                        :,
                        :,
                        i : i + stride * out_h : stride,
                        j : j + stride * out_w : stride,
                    ] += column_grad[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            x._accumulate(
                padded_grad[:, :, padding : padding + height, padding : padding + width]
            )

    out._backward = _backward
    return out


def maxpool2d(x: Tensor, window: int = 2, stride: Optional[int] = None) -> Tensor:
    """Non-overlapping max pooling; trailing rows/columns are truncated.

    Raises:
        ConfigurationError: if stride differs from the window size or the
        input is smaller than one window.
    """
    stride = window if stride is None else stride
    if stride != window:
        raise errors.ConfigurationError(
            f"only non-overlapping pooling is supported (window {window}, stride {stride})"
        )
    num, channels, height, width = x.shape
    out_h, out_w = height // window, width // window
    if out_h == 0 or out_w == 0:
        raise errors.ConfigurationError(
            f"input {x.shape} smaller than pooling window {window}"
        )
    trimmed = x.data[:, :, : out_h * window, : out_w * window]
    blocks = (
        trimmed.reshape(num, channels, out_h, window, out_w, window)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(num, channels, out_h, out_w, window * window)
    )
    # argmax returns the first maximum: row-major tie rule
    winners = blocks.argmax(axis=-1)[..., None]
    out = Tensor(np.take_along_axis(blocks, winners, axis=-1)[..., 0], (x,), "maxpool2d")

    def _backward() -> None:
        routed = np.zeros_like(blocks)
        np.put_along_axis(routed, winners, out.grad[..., None], axis=-1)
        gradient = np.zeros_like(x.data)
        gradient[:, :, : out_h * window, : out_w * window] = (
            routed.reshape(num, channels, out_h, out_w, window, window)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(num, channels, out_h * window, out_w * window)
        )
        x._accumulate(gradient)

    out._backward = _backward
    return out


def grad_check(
    f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6
) -> float:
    """Compare analytic gradients against central differences.

    Args:
        f: closure producing a scalar tensor from the current values of
        ``params``; it must be deterministic.
        params: tensors to perturb, modified in place and restored.
        eps: finite-difference step.

    Returns:
        max over all parameter elements of
        |analytic - numeric| / max(1, |numeric|).
    """
    f().backward()
    analytic = [
        np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params
    ]
    worst = 0.0
    for tensor, gradient in zip(params, analytic):
        for index in np.ndindex(tensor.shape):
            original = tensor.data[index]
            tensor.data[index] = original + eps
            plus = f().item()
            tensor.data[index] = original - eps
            minus = f().item()
            tensor.data[index] = original
            numeric = (plus - minus) / (2 * eps)
            error = abs(gradient[index] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, float(error))
    logger.debug(f"gradient check over {len(params)} tensors: max error {worst:.3e}")
    return worst
