"""Dense tensors with reverse-mode automatic differentiation.

Everything is backed by numpy arrays. Training runs in float32; tests that
compare against finite differences build their tensors from float64 arrays
and every operation keeps the dtype of its inputs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_param_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(DEFAULT_DTYPE)
    return arr


class Tensor:
    """An n-dimensional array that records how it was computed.

    ``grad`` stays ``None`` until a backward pass reaches the tensor.
    """

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward_fn: Optional[Callable[[np.ndarray], None]] = None,
        op: str = "",
    ):
        self.data = _as_array(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = tuple(parents)
        self._backward_fn = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op or 'leaf'})"

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate ``grad`` on every tensor this scalar depends on."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        # iterative post-order DFS; parents are visited in recorded order
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __sub__(self, other) -> "Tensor":
        return add(self, -_lift(other, self.dtype))

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


class Parameter(Tensor):
    """A trainable leaf tensor carrying its own momentum buffer."""

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.velocity = np.zeros_like(self.data)
        self.id = next(_param_ids)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name or self.id}, shape={self.shape})"


@dataclass
class BatchNormState:
    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def create(cls, channels: int, dtype=DEFAULT_DTYPE, name: str = "", eps: float = BN_EPS,
               momentum: float = BN_MOMENTUM) -> "BatchNormState":
        return cls(
            gamma=Parameter(np.ones(channels, dtype=dtype), name=f"{name}.gamma"),
            beta=Parameter(np.zeros(channels, dtype=dtype), name=f"{name}.beta"),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            eps=eps,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.size


def _lift(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _lift(b, a.dtype)
    out_data = a.data + b.data

    def backward_fn(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return Tensor(out_data, parents=(a, b), backward_fn=backward_fn, op="add")


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Element-wise sum of equally shaped tensors (residual junctions)."""
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"add junction needs identical shapes, got {sorted(shapes)}")
    out_data = tensors[0].data.copy()
    for t in tensors[1:]:
        out_data = out_data + t.data

    def backward_fn(g):
        for t in tensors:
            t._accumulate(g)

    return Tensor(out_data, parents=tuple(tensors), backward_fn=backward_fn, op="add")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _lift(b, a.dtype)
    out_data = a.data * b.data

    def backward_fn(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor(out_data, parents=(a, b), backward_fn=backward_fn, op="mul")


def tensor_sum(x: Tensor) -> Tensor:
    def backward_fn(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return Tensor(x.data.sum(), parents=(x,), backward_fn=backward_fn, op="sum")


def reshape(x: Tensor, shape) -> Tensor:
    def backward_fn(g):
        x._accumulate(g.reshape(x.shape))

    return Tensor(x.data.reshape(shape), parents=(x,), backward_fn=backward_fn, op="reshape")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward_fn(g):
        x._accumulate(g * mask)

    return Tensor(x.data * mask, parents=(x,), backward_fn=backward_fn, op="relu")


# ---------------------------------------------------------------------------
# weighted-sum layers


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape [N, F] and ``weight`` [G, F]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"linear expects 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear: input features F={x.shape[1]} do not match weight in_features={weight.shape[1]}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match out_features={weight.shape[0]}")
    out_data = x.data @ weight.data.T
    if bias is not None:
        out_data = out_data + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        x._accumulate(g @ weight.data)
        weight._accumulate(g.T @ x.data)
        if bias is not None:
            bias._accumulate(g.sum(axis=0))

    return Tensor(out_data, parents=parents, backward_fn=backward_fn, op="linear")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (N, C, H', W', k, k) view over a padded input
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def _scatter_windows(dwin: np.ndarray, padded_shape, k: int, stride: int, dtype) -> np.ndarray:
    """Adjoint of ``_windows``: sum window gradients (N,C,H',W',k,k) back into the input."""
    dxp = np.zeros(padded_shape, dtype=dtype)
    ho, wo = dwin.shape[2], dwin.shape[3]
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += dwin[..., i, j]
    return dxp


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-d cross-correlation of [N, C_in, H, W] with [C_out, C_in, k, k]."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, w_cin, k, k2 = weight.shape
    if w_cin != c_in:
        raise ShapeError(f"conv2d: input channels C_in={c_in} do not match weight C_in={w_cin}")
    if k != k2:
        raise ShapeError(f"conv2d: only square kernels are supported, got {k}x{k2}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} or padding={padding}")
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {h}x{w} (padding {padding})")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match C_out={c_out}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = _windows(xp, k, stride)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c_in * k * k)
    wmat = weight.data.reshape(c_out, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out_data = out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
        weight._accumulate((gmat.T @ cols).reshape(weight.shape))
        if bias is not None:
            bias._accumulate(gmat.sum(axis=0))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, c_in, k, k).transpose(0, 3, 1, 2, 4, 5)
            dxp = _scatter_windows(dcols, xp.shape, k, stride, x.dtype)
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + w]
            x._accumulate(dxp)

    return Tensor(np.ascontiguousarray(out_data), parents=parents, backward_fn=backward_fn, op="conv2d")


# ---------------------------------------------------------------------------
# normalization and pooling


def batchnorm(x: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Per-channel batch normalization of [N, C] or [N, C, H, W] input.

    In train mode the mini-batch statistics (biased variance) normalize the
    input and the running statistics move by an exponential average. In
    inference mode the running statistics are used instead.
    """
    if x.data.ndim not in (2, 4):
        raise ShapeError(f"batchnorm expects [N,C] or [N,C,H,W], got {x.shape}")
    c = x.shape[1]
    if c != state.channels:
        raise ShapeError(f"batchnorm: input has C={c} channels, state has {state.channels}")
    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.data.ndim == 2 else (1, c, 1, 1)
    m = x.data.size // c
    gamma, beta = state.gamma, state.beta

    if train:
        if m < 2:
            raise ShapeError("batchnorm: train mode needs at least 2 values per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        mom = state.momentum
        state.running_mean[...] = (1 - mom) * state.running_mean + mom * mean
        state.running_var[...] = (1 - mom) * state.running_var + mom * var
    else:
        mean, var = state.running_mean.astype(x.dtype), state.running_var.astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + x.dtype.type(state.eps))
    xhat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out_data = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward_fn(g):
        gamma._accumulate((g * xhat).sum(axis=axes))
        beta._accumulate(g.sum(axis=axes))
        if not x.requires_grad:
            return
        dxhat = g * gamma.data.reshape(bshape)
        if train:
            s1 = dxhat.sum(axis=axes).reshape(bshape)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
            dx = (dxhat - s1 / m - xhat * s2 / m) * inv_std.reshape(bshape)
        else:
            dx = dxhat * inv_std.reshape(bshape)
        x._accumulate(dx)

    return Tensor(out_data, parents=(x, gamma, beta), backward_fn=backward_fn, op="batchnorm")


def max_pool2d(x: Tensor, kernel: int, stride: Optional[int] = None) -> Tensor:
    stride = stride or kernel
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2d expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = conv_output_size(h, kernel, stride, 0), conv_output_size(w, kernel, stride, 0)
    if ho < 1 or wo < 1:
        raise ShapeError(f"max_pool2d: kernel {kernel} larger than input {h}x{w}")
    win = _windows(x.data, kernel, stride).reshape(n, c, ho, wo, kernel * kernel)
    idx = win.argmax(axis=-1)
    out_data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        onehot = (idx[..., None] == np.arange(kernel * kernel)) * g[..., None]
        dwin = onehot.reshape(n, c, ho, wo, kernel, kernel).astype(x.dtype, copy=False)
        x._accumulate(_scatter_windows(dwin, x.shape, kernel, stride, x.dtype))

    return Tensor(np.ascontiguousarray(out_data), parents=(x,), backward_fn=backward_fn, op="max_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C] by spatial averaging."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    hw = x.shape[2] * x.shape[3]

    def backward_fn(g):
        x._accumulate(np.broadcast_to(g[:, :, None, None] / hw, x.shape))

    return Tensor(x.data.mean(axis=(2, 3)), parents=(x,), backward_fn=backward_fn, op="gap")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [N,K] logits, got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label index out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(n), labels].mean()

    def backward_fn(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1
        logits._accumulate(d * (g / n))

    return Tensor(np.asarray(loss, dtype=logits.dtype), parents=(logits,), backward_fn=backward_fn,
                  op="softmax_cross_entropy")


# ---------------------------------------------------------------------------
# optimizer


def sgd_nesterov_step(params: Iterable[Parameter], learning_rate: float, momentum: float) -> None:
    """One SGD step with Nesterov momentum, then clear gradients.

    Uses the common formulation ``v <- m*v + g`` and ``w <- w - lr*(g + m*v)``.
    """
    params = list(params)
    missing = [p.name or str(p.id) for p in params if p.grad is None]
    if missing:
        raise ValueError(f"missing gradient for parameter(s): {', '.join(missing)}")
    for p in params:
        g = p.grad
        p.velocity *= momentum
        p.velocity += g
        p.data -= learning_rate * (g + momentum * p.velocity)
        p.grad = None


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
