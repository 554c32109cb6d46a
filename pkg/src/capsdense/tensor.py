"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation is a :class:`Function` subclass with a static
``forward`` working on numpy arrays and a static ``backward`` returning one
gradient per input.  Calling ``Function.apply`` records a node on the output
tensor; :func:`backward` replays the recorded graph in reverse topological
order.

Storage is 32-bit by default.  The :func:`precision` context switches every
newly created tensor to another float type, which is how gradient checks
re-evaluate a computation in 64-bit.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Any, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

_dtype: type = np.float32
_grad_enabled = True


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the float type used for new tensors."""
    global _dtype
    previous, _dtype = _dtype, np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (evaluation, finite differences)."""
    global _grad_enabled
    previous, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


@dataclass
class Node:
    """One recorded operation: the rule that produced a tensor and its inputs."""

    fn: type
    inputs: tuple
    ctx: Any


class Tensor:
    """N-dimensional float array with an optional gradient slot."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_dtype, order="C")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: Node | None = None

    # -- metadata -----------------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return NotImplemented

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """Base class of differentiable operations.

    Subclasses implement ``forward(ctx, *arrays, **kwargs) -> array`` and
    ``backward(ctx, grad) -> tuple`` with one entry (array or None) per input.
    Each subclass is registered under its lower-cased class name.
    """

    registry: dict[str, type] = {}

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        Function.registry[cls.__name__.lower()] = cls

    @staticmethod
    def forward(ctx, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    @staticmethod
    def backward(ctx, grad):  # pragma: no cover - abstract
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = tuple(as_tensor(t) for t in inputs)
        ctx = _Context()
        ctx.needs_input_grad = tuple(t.requires_grad for t in tensors)
        out = Tensor(cls.forward(ctx, *(t.data for t in tensors), **kwargs))
        if _grad_enabled and any(ctx.needs_input_grad):
            out.requires_grad = True
            out._node = Node(cls, tensors, ctx)
        return out


class _Context:
    def save(self, **values):
        self.__dict__.update(values)


@dataclass
class GradTape:
    """Topologically ordered record of the nodes reachable from a root."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "GradTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for parent in t._node.inputs:
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))
        return cls(order)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf."""
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    tape = GradTape.from_root(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for t in reversed(tape.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        node = t._node
        in_grads = node.fn.backward(node.ctx, g)
        for parent, pg in zip(node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype)
            if pg.shape != parent.shape:
                raise DimensionError(
                    f"{node.fn.__name__}.backward produced gradient {pg.shape} "
                    f"for input of shape {parent.shape}"
                )
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"{op}: axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


# -- elementwise -------------------------------------------------------------


class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a_shape=a.shape, b_shape=b.shape)
        return a + b

    @staticmethod
    def backward(ctx, g):
        return _unbroadcast(g, ctx.a_shape), _unbroadcast(g, ctx.b_shape)


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a=a, b=b)
        return a * b

    @staticmethod
    def backward(ctx, g):
        ga = _unbroadcast(g * ctx.b, ctx.a.shape) if ctx.needs_input_grad[0] else None
        gb = _unbroadcast(g * ctx.a, ctx.b.shape) if ctx.needs_input_grad[1] else None
        return ga, gb


class Scale(Function):
    @staticmethod
    def forward(ctx, a, factor=1.0):
        ctx.save(factor=factor)
        return a * factor

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.factor,)


class Relu(Function):
    @staticmethod
    def forward(ctx, a):
        mask = a > 0
        ctx.save(mask=mask)
        return np.where(mask, a, 0)

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.mask,)


class Sigmoid(Function):
    @staticmethod
    def forward(ctx, a):
        y = 0.5 * (1.0 + np.tanh(0.5 * a))
        ctx.save(y=y)
        return y

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.y * (1.0 - ctx.y),)


# -- shape ---------------------------------------------------------------------


class Reshape(Function):
    @staticmethod
    def forward(ctx, a, shape=()):
        ctx.save(shape=a.shape)
        try:
            return a.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from exc

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx.shape),)


class Transpose(Function):
    @staticmethod
    def forward(ctx, a, axes=None):
        axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
        ctx.save(axes=axes)
        return a.transpose(axes)

    @staticmethod
    def backward(ctx, g):
        return (g.transpose(np.argsort(ctx.axes)),)


class Concat(Function):
    @staticmethod
    def forward(ctx, *arrays, axis=0):
        ctx.save(axis=axis, sizes=[a.shape[axis] for a in arrays])
        return np.concatenate(arrays, axis=axis)

    @staticmethod
    def backward(ctx, g):
        bounds = np.cumsum(ctx.sizes)[:-1]
        return tuple(np.split(g, bounds, axis=ctx.axis))


# -- reductions and normalisations --------------------------------------------


class Sum(Function):
    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        ctx.save(shape=a.shape, axis=axis, keepdims=keepdims)
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, g):
        if ctx.axis is not None and not ctx.keepdims:
            g = np.expand_dims(g, ctx.axis)
        return (np.broadcast_to(g, ctx.shape).copy(),)


class Softmax(Function):
    @staticmethod
    def forward(ctx, a, axis=-1):
        y = softmax_np(a, axis)
        ctx.save(y=y, axis=axis)
        return y

    @staticmethod
    def backward(ctx, g):
        y = ctx.y
        return (y * (g - (g * y).sum(axis=ctx.axis, keepdims=True)),)


class L2Norm(Function):
    @staticmethod
    def forward(ctx, a, axis=-1, eps=1e-9, keepdims=False):
        n = np.sqrt((a * a).sum(axis=axis, keepdims=True) + eps)
        ctx.save(a=a, n=n, axis=axis, keepdims=keepdims)
        return n if keepdims else np.squeeze(n, axis=axis)

    @staticmethod
    def backward(ctx, g):
        if not ctx.keepdims:
            g = np.expand_dims(g, ctx.axis)
        return (g * ctx.a / ctx.n,)


class MSE(Function):
    @staticmethod
    def forward(ctx, a, b):
        if a.shape != b.shape:
            raise DimensionError(f"mse: shapes {a.shape} and {b.shape} differ")
        diff = a - b
        ctx.save(diff=diff)
        return np.asarray((diff * diff).mean())

    @staticmethod
    def backward(ctx, g):
        d = 2.0 * g * ctx.diff / ctx.diff.size
        return d, -d


class MatMul(Function):
    @staticmethod
    def forward(ctx, a, b):
        if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
            raise DimensionError(
                f"matmul: inner axes disagree, a[-1]={a.shape[-1]} vs b[-2]={b.shape[-2]}"
            )
        ctx.save(a=a, b=b)
        return a @ b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.a, ctx.b
        ga = gb = None
        if ctx.needs_input_grad[0]:
            ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
        if ctx.needs_input_grad[1]:
            gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
        return ga, gb


# -- convolution ---------------------------------------------------------------


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    """Pads giving ``ceil(size / stride)`` outputs; the odd pixel goes bottom/right."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def conv_output_size(size: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-size // stride)
    if padding == "valid":
        return (size - kernel) // stride + 1
    raise ContractError(f"unknown padding mode {padding!r}")


class Conv2d(Function):
    @staticmethod
    def forward(ctx, x, kernel, bias, stride=1, padding="valid"):
        n, c, h, w = x.shape
        k, kc, kh, kw = kernel.shape
        if c != kc:
            raise DimensionError(
                f"conv2d: input channels (input axis 1) = {c} but kernel in-channels "
                f"(kernel axis 1) = {kc}"
            )
        if bias.shape != (k,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} != ({k},) (kernel axis 0)")
        if stride < 1:
            raise ContractError(f"conv2d: stride must be >= 1, got {stride}")
        if padding == "same":
            pt, pb = same_padding(h, kh, stride)
            pl, pr = same_padding(w, kw, stride)
        elif padding == "valid":
            pt = pb = pl = pr = 0
        else:
            raise ContractError(f"conv2d: unknown padding mode {padding!r}")
        if h + pt + pb < kh or w + pl + pr < kw:
            raise DimensionError(
                f"conv2d: kernel {kh}x{kw} larger than padded input {h + pt + pb}x{w + pl + pr} "
                "(axes 2, 3)"
            )
        xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if pt + pb + pl + pr else x
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        ho, wo = win.shape[2], win.shape[3]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
        kmat = kernel.reshape(k, -1)
        out = cols @ kmat.T + bias
        ctx.save(
            cols=cols, kmat=kmat, xp_shape=xp.shape, pads=(pt, pb, pl, pr),
            stride=stride, dims=(n, c, ho, wo, k, kh, kw), kshape=kernel.shape,
        )
        return out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2)

    @staticmethod
    def backward(ctx, g):
        n, c, ho, wo, k, kh, kw = ctx.dims
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, k)
        gx = gk = gb = None
        if ctx.needs_input_grad[1]:
            gk = (gmat.T @ ctx.cols).reshape(ctx.kshape)
        if ctx.needs_input_grad[2]:
            gb = gmat.sum(axis=0)
        if ctx.needs_input_grad[0]:
            s = ctx.stride
            # rows ordered (kh, kw, c) so every kernel-offset slice below is contiguous
            kmat = ctx.kmat.reshape(k, c, kh, kw).transpose(2, 3, 1, 0).reshape(kh * kw * c, k)
            dcols = (kmat @ gmat.T).reshape(kh, kw, c, n, ho, wo)
            _, _, hp, wp = ctx.xp_shape
            dxp = np.zeros((c, n, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dcols[i, j]
            pt, pb, pl, pr = ctx.pads
            gx = dxp[:, :, pt:hp - pb, pl:wp - pr].transpose(1, 0, 2, 3)
        return gx, gk, gb


# -- numpy helpers shared with non-differentiable bookkeeping ------------------


def softmax_np(a: np.ndarray, axis: int = -1) -> np.ndarray:
    z = a - a.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# -- public functional API -------------------------------------------------------


def add(a, b) -> Tensor:
    return Add.apply(a, b)


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


def scale(a, factor: float) -> Tensor:
    return Scale.apply(a, factor=float(factor))


def relu(a) -> Tensor:
    return Relu.apply(a)


def sigmoid(a) -> Tensor:
    return Sigmoid.apply(a)


def reshape(a, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    return Transpose.apply(a, axes=axes)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ref = tensors[0].shape
    axis = _check_axis(axis, len(ref), "concat")
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[d] != ref[d] for d in range(len(ref)) if d != axis
        ):
            raise DimensionError(f"concat along axis {axis}: shapes {ref} and {t.shape} disagree")
    return Concat.apply(*tensors, axis=axis)


def concat_channels(tensors: Sequence) -> Tensor:
    """Join ``[N, C_i, H, W]`` tensors along the channel axis, in argument order."""
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors:
        if t.ndim != 4:
            raise DimensionError(f"concat_channels: expected NCHW, got shape {t.shape}")
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise DimensionError(
                f"concat_channels: N/H/W (axes 0, 2, 3) mismatch {ref} vs {t.shape}"
            )
    return concat(tensors, axis=1)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is not None:
        axis = _check_axis(axis, a.ndim, "sum")
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[_check_axis(axis, a.ndim, "mean")]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    return Softmax.apply(a, axis=_check_axis(axis, a.ndim, "softmax"))


def l2_norm(a, axis: int = -1, eps: float = 1e-9, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return L2Norm.apply(a, axis=_check_axis(axis, a.ndim, "l2_norm"), eps=eps, keepdims=keepdims)


def mse(a, b) -> Tensor:
    return MSE.apply(a, b)


def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


def conv2d(x, kernel, bias, stride: int = 1, padding: str = "valid") -> Tensor:
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(
            f"conv2d: expected 4-d input and kernel, got {x.shape} and {kernel.shape}"
        )
    return Conv2d.apply(x, kernel, bias, stride=int(stride), padding=padding)
