"""Dense tensors with reverse-mode automatic differentiation.

Only the primitives the two networks and the loss terms need are provided.
Values live in numpy arrays (float32 for training, float64 for gradient
checks); every operation is a ``Function`` subclass with a forward rule over
arrays and a backward rule returning one gradient per input.
"""

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .logger import ConfigurationError, NumericError, UsageError

DEFAULT_DTYPE = np.float32
FLOAT_DTYPES = (np.float32, np.float64)

_grad_mode = threading.local()


def grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction inside the block (per thread)."""
    previous = grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


def _check_finite(values: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericError(f"Non-finite values produced by {op}", op=op)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """Base class for differentiable operations."""

    name = "function"

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs) -> "Tensor":
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        _check_finite(out, cls.name)
        requires_grad = grad_enabled() and any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=requires_grad, _ctx=fn if requires_grad else None)


class Tensor:
    """N-dimensional array with an optional gradient slot."""

    def __init__(
        self,
        data: Union[np.ndarray, float, Sequence[float]],
        requires_grad: bool = False,
        dtype: Optional[np.dtype] = None,
        _ctx: Optional[Function] = None,
    ):
        values = np.asarray(data, dtype=dtype)
        if values.dtype not in FLOAT_DTYPES:
            values = values.astype(DEFAULT_DTYPE)
        self.data = values
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._ctx = _ctx

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, grad: np.ndarray) -> None:
        """Add ``grad`` into the gradient slot; gradients sum across uses."""
        if grad.shape != self.shape:
            raise ConfigurationError(
                f"Gradient shape {grad.shape} does not match tensor shape {self.shape}",
                field="grad",
            )
        grad = grad.astype(self.dtype, copy=False)
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad += grad

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Propagate gradients from this tensor to every leaf that requires them."""
        if not self.requires_grad:
            raise UsageError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise UsageError(
                    f"backward() without a seed gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)

        order = _topological_order(self)
        pending = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            node_grad = pending.pop(id(node), None)
            if node_grad is None:
                continue
            if node._ctx is None:
                node.accumulate_grad(node_grad)
                continue
            ctx = node._ctx
            input_grads = ctx.backward(node_grad)
            for inp, inp_grad in zip(ctx.inputs, input_grads):
                if inp_grad is None or not inp.requires_grad:
                    continue
                _check_finite(inp_grad, f"{ctx.name}.backward")
                key = id(inp)
                if key in pending:
                    pending[key] = pending[key] + inp_grad
                else:
                    pending[key] = inp_grad

    def reshape(self, *shape: int) -> "Tensor":
        return Reshape.apply(self, shape=shape)

    def __add__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, Tensor):
            return Add.apply(self, other)
        return AddScalar.apply(self, value=float(other))

    __radd__ = __add__

    def __sub__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, Tensor):
            return Sub.apply(self, other)
        return AddScalar.apply(self, value=-float(other))

    def __rsub__(self, other: float) -> "Tensor":
        return AddScalar.apply(ScalarMul.apply(self, factor=-1.0), value=float(other))

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, Tensor):
            return Mul.apply(self, other)
        return ScalarMul.apply(self, factor=float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return ScalarMul.apply(self, factor=-1.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable tensor with its ADAM state."""

    def __init__(self, data: np.ndarray, name: str, dtype: Optional[np.dtype] = None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.data = np.array(self.data, copy=True)
        self.name = name
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape}, step={self.step})"


def _topological_order(root: Tensor) -> List[Tensor]:
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
        if node._ctx is not None:
            for inp in node._ctx.inputs:
                if inp.requires_grad and id(inp) not in visited:
                    stack.append((inp, False))
    return order


def _require_same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigurationError(
            f"{op}: incompatible shapes {a.shape} and {b.shape}", field="shape"
        ) from None


# Elementwise arithmetic

class Add(Function):
    name = "add"

    def forward(self, a, b):
        _require_same_shape(a, b, self.name)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        _require_same_shape(a, b, self.name)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        _require_same_shape(a, b, self.name)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return _unbroadcast(grad * self.b, self.a.shape), _unbroadcast(grad * self.a, self.b.shape)


class ScalarMul(Function):
    name = "scalar_mul"

    def forward(self, x, factor: float):
        self.factor = x.dtype.type(factor)
        return x * self.factor

    def backward(self, grad):
        return (grad * self.factor,)


class AddScalar(Function):
    name = "add_scalar"

    def forward(self, x, value: float):
        return x + x.dtype.type(value)

    def backward(self, grad):
        return (grad,)


class Reshape(Function):
    name = "reshape"

    def forward(self, x, shape):
        self.in_shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError:
            raise ConfigurationError(
                f"reshape: cannot view shape {x.shape} as {shape}", field="shape"
            ) from None

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


# Activations

class ReLU(Function):
    name = "relu"

    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, x.dtype.type(0))

    def backward(self, grad):
        return (grad * self.mask,)


class LeakyReLU(Function):
    name = "leaky_relu"

    def forward(self, x, slope: float):
        self.slope = x.dtype.type(slope)
        self.mask = x > 0
        return np.where(self.mask, x, x * self.slope)

    def backward(self, grad):
        return (np.where(self.mask, grad, grad * self.slope),)


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, x):
        e = np.exp(-np.abs(x))
        self.out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1 - self.out),)


class Log(Function):
    name = "log"

    def forward(self, x):
        if np.any(x <= 0):
            raise NumericError("log of a non-positive value", op=self.name)
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


class Clip(Function):
    name = "clip"

    def forward(self, x, low: float, high: float):
        self.inside = (x >= low) & (x <= high)
        return np.clip(x, low, high).astype(x.dtype)

    def backward(self, grad):
        return (grad * self.inside,)


# Reductions

class Mean(Function):
    name = "mean"

    def forward(self, x):
        self.in_shape = x.shape
        self.dtype = x.dtype
        return np.asarray(x.mean(), dtype=x.dtype)

    def backward(self, grad):
        count = int(np.prod(self.in_shape)) or 1
        return (np.full(self.in_shape, grad / count, dtype=self.dtype),)


class MeanSquare(Function):
    name = "mean_square"

    def forward(self, x):
        self.x = x
        return np.asarray(np.mean(x * x), dtype=x.dtype)

    def backward(self, grad):
        count = self.x.size or 1
        return (grad * 2.0 * self.x / count,)


# Layers

class Conv2d(Function):
    """Cross-correlation over NCHW input with an OIKK kernel."""

    name = "conv2d"

    def forward(self, x, weight, bias, stride: int, padding: int):
        if x.ndim != 4 or weight.ndim != 4:
            raise ConfigurationError(
                f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}",
                field="shape",
            )
        n, c, h, w = x.shape
        out_ch, in_ch, kh, kw = weight.shape
        if c != in_ch:
            raise ConfigurationError(
                f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}",
                field="shape",
            )
        if bias.shape != (out_ch,):
            raise ConfigurationError(
                f"conv2d bias shape {bias.shape} does not match weight {weight.shape}",
                field="shape",
            )
        if stride < 1 or padding < 0:
            raise ConfigurationError("conv2d needs stride >= 1 and padding >= 0", field="stride")
        if h + 2 * padding < kh or w + 2 * padding < kw:
            raise ConfigurationError(
                f"conv2d kernel {weight.shape} does not fit padded input {x.shape}",
                field="shape",
            )

        padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        out = np.tensordot(windows, weight, axes=([1, 4, 5], [1, 2, 3]))
        out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + bias[None, :, None, None]

        self.windows = windows
        self.weight = weight
        self.padded_shape = padded.shape
        self.in_shape = x.shape
        self.stride = stride
        self.padding = padding
        return out

    def backward(self, grad):
        n, c, h, w = self.in_shape
        _, _, kh, kw = self.weight.shape
        out_h, out_w = grad.shape[2], grad.shape[3]
        s = self.stride

        grad_weight = np.tensordot(grad, self.windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_bias = grad.sum(axis=(0, 2, 3))

        cols = np.tensordot(grad, self.weight, axes=([1], [0]))
        grad_padded = np.zeros(self.padded_shape, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                grad_padded[:, :, i:i + s * (out_h - 1) + 1:s, j:j + s * (out_w - 1) + 1:s] += (
                    cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        p = self.padding
        grad_x = grad_padded[:, :, p:p + h, p:p + w]
        return grad_x, grad_weight, grad_bias


class PixelShuffle(Function):
    name = "pixel_shuffle"

    def forward(self, x, factor: int):
        if x.ndim != 4:
            raise ConfigurationError(f"pixel_shuffle expects NCHW input, got {x.shape}", field="shape")
        n, c, h, w = x.shape
        r = factor
        if c % (r * r) != 0:
            raise ConfigurationError(
                f"pixel_shuffle: {c} channels not divisible by {r}^2", field="channels", value=c
            )
        self.in_shape = x.shape
        self.factor = r
        out_c = c // (r * r)
        return x.reshape(n, out_c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, out_c, h * r, w * r)

    def backward(self, grad):
        return (pixel_unshuffle_array(grad, self.factor),)


def pixel_unshuffle_array(x: np.ndarray, factor: int) -> np.ndarray:
    """Inverse rearrangement of ``pixel_shuffle`` on a raw array."""
    n, c, hr, wr = x.shape
    r = factor
    h, w = hr // r, wr // r
    return x.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)


class FullyConnected(Function):
    name = "fully_connected"

    def forward(self, x, weight, bias):
        if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
            raise ConfigurationError(
                f"fully_connected shape mismatch: input {x.shape} vs weight {weight.shape}",
                field="shape",
            )
        if bias.shape != (weight.shape[0],):
            raise ConfigurationError(
                f"fully_connected bias shape {bias.shape} does not match weight {weight.shape}",
                field="shape",
            )
        self.x, self.weight = x, weight
        return x @ weight.T + bias

    def backward(self, grad):
        return grad @ self.weight, grad.T @ self.x, grad.sum(axis=0)


class MaxPool2d(Function):
    """2x2 max pooling with stride 2."""

    name = "max_pool2d"

    def forward(self, x):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ConfigurationError(f"max_pool2d needs even extents, got {x.shape}", field="shape")
        blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        self.argmax = blocks.argmax(axis=-1)
        self.in_shape = x.shape
        return np.take_along_axis(blocks, self.argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        n, c, h, w = self.in_shape
        onehot = np.arange(4) == self.argmax[..., None]
        spread = (onehot * grad[..., None]).astype(grad.dtype)
        return (spread.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)


# Functional surface

def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return Conv2d.apply(x, weight, bias, stride=stride, padding=padding)


def pixel_shuffle(x: Tensor, factor: int) -> Tensor:
    return PixelShuffle.apply(x, factor=factor)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return LeakyReLU.apply(x, slope=slope)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def log(x: Tensor) -> Tensor:
    return Log.apply(x)


def clip(x: Tensor, low: float, high: float) -> Tensor:
    return Clip.apply(x, low=low, high=high)


def mean(x: Tensor) -> Tensor:
    return Mean.apply(x)


def mean_square(x: Tensor) -> Tensor:
    return MeanSquare.apply(x)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return FullyConnected.apply(x, weight, bias)


def max_pool2d(x: Tensor) -> Tensor:
    return MaxPool2d.apply(x)


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-4,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` must map ``inputs`` to a scalar tensor. Inputs should hold float64
    data; each is perturbed in place and restored.
    """
    for tensor in inputs:
        tensor.zero_grad()
    out = fn(*inputs)
    out.backward()
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs
    ]

    worst = 0.0
    with no_grad():
        for tensor, exact in zip(inputs, analytic):
            tensor.data = np.ascontiguousarray(tensor.data)
            numeric = np.zeros_like(tensor.data)
            flat = tensor.data.reshape(-1)
            for idx in range(flat.size):
                original = flat[idx]
                flat[idx] = original + eps
                plus = float(fn(*inputs).data)
                flat[idx] = original - eps
                minus = float(fn(*inputs).data)
                flat[idx] = original
                numeric.reshape(-1)[idx] = (plus - minus) / (2 * eps)
            scale = max(np.linalg.norm(exact), np.linalg.norm(numeric), 1e-12)
            worst = max(worst, float(np.linalg.norm(exact - numeric) / scale))
    for tensor in inputs:
        tensor.zero_grad()
    return worst
