from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import TYPE_CHECKING, Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from selfretrieve.exceptions import NormalizationError

if TYPE_CHECKING:
    from collections.abc import Iterator

NORM_EPS = 1e-12

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording for the current thread."""
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    """A numpy array that records the operations producing it.

    Leaf tensors created with ``requires_grad=True`` accumulate gradients in ``grad`` when
    :meth:`backward` is called on a scalar result. Intermediate tensors keep a reference to their parents
    and a closure mapping the output gradient to one gradient per parent.
    """

    __slots__ = ("_backward", "_parents", "data", "grad", "name", "requires_grad")

    def __init__(self, data: np.ndarray | float, requires_grad: bool = False, name: str | None = None):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        self.data = data
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None = None

    def __repr__(self) -> str:
        return f"<Tensor name={self.name} shape={self.shape} dtype={self.dtype}>"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate gradients from this tensor to every leaf that requires them."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("An explicit gradient is required for non-scalar tensors")
            grad = np.ones_like(self.data)

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            node_grad = grads.pop(id(node), None)
            if node_grad is None:
                continue

            if node.is_leaf:
                node.grad = node_grad if node.grad is None else node.grad + node_grad
                continue

            for parent, parent_grad in zip(node._parents, node._backward(node_grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + parent_grad if key in grads else parent_grad

    def __add__(self, other: Tensor | float) -> Tensor:
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Tensor | float) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor | float) -> Tensor:
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def sum(self) -> Tensor:
        return total(self)

    def mean(self) -> Tensor:
        return mean(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    order = []
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
        stack.extend((parent, False) for parent in node._parents if id(parent) not in visited)
    return order


def _as_tensor(value: Tensor | np.ndarray | float) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(parent.requires_grad for parent in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor | float, b: Tensor | float) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a: Tensor | float, b: Tensor | float) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)

    return _result(a.data - b.data, (a, b), backward)


def mul(a: Tensor | float, b: Tensor | float) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(grad * b.data, a.shape), _unbroadcast(grad * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def backward(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return grad @ b.data.T, a.data.T @ grad

    return _result(a.data @ b.data, (a, b), backward)


def total(x: Tensor) -> Tensor:
    def backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (np.broadcast_to(grad, x.shape).copy(),)

    return _result(np.asarray(x.data.sum()), (x,), backward)


def mean(x: Tensor) -> Tensor:
    def backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (np.full(x.shape, grad / x.data.size, dtype=x.dtype),)

    return _result(np.asarray(x.data.mean()), (x,), backward)


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Select the rows ``index`` of a ``(N, ...)`` tensor."""
    index = np.asarray(index, dtype=np.intp)

    def backward(grad: np.ndarray) -> tuple[np.ndarray]:
        grad_x = np.zeros(x.shape, dtype=grad.dtype)
        np.add.at(grad_x, index, grad)
        return (grad_x,)

    return _result(x.data[index], (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * mask,)

    return _result(x.data * mask, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` with ``weight`` stored as ``(in, out)``."""

    def backward(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return grad @ weight.data.T, x.data.T @ grad, grad.sum(axis=0)

    return _result(x.data @ weight.data + bias.data, (x, weight, bias), backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: int = 0) -> Tensor:
    """Stride 1 cross-correlation of ``(N, C, H, W)`` input with ``(F, C, k, k)`` filters."""
    n, _, height, width = x.shape
    filters, channels, kh, kw = weight.shape
    if x.shape[1] != channels:
        raise ValueError(f"Input has {x.shape[1]} channels, filters expect {channels}")

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    out_h = height + 2 * padding - kh + 1
    out_w = width + 2 * padding - kw + 1

    # (N, C, Ho, Wo, kh, kw) -> (N * Ho * Wo, C * kh * kw)
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, channels * kh * kw)
    kernel = weight.data.reshape(filters, -1)

    out = cols @ kernel.T + bias.data
    out = out.reshape(n, out_h, out_w, filters).transpose(0, 3, 1, 2)

    def backward(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        flat = grad.transpose(0, 2, 3, 1).reshape(-1, filters)
        grad_weight = (flat.T @ cols).reshape(weight.shape)
        grad_bias = flat.sum(axis=0)

        grad_cols = (flat @ kernel).reshape(n, out_h, out_w, channels, kh, kw)
        grad_padded = np.zeros(padded.shape, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                grad_padded[:, :, i : i + out_h, j : j + out_w] += grad_cols[..., i, j].transpose(0, 3, 1, 2)

        if padding:
            grad_padded = grad_padded[:, :, padding:-padding, padding:-padding]
        return grad_padded, grad_weight, grad_bias

    return _result(np.ascontiguousarray(out), (x, weight, bias), backward)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; a trailing odd row or column is dropped."""
    n, c, height, width = x.shape
    out_h, out_w = height // 2, width // 2

    blocks = x.data[:, :, : out_h * 2, : out_w * 2].reshape(n, c, out_h, 2, out_w, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, out_h, out_w, 4)
    index = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, index, axis=-1)[..., 0]

    def backward(grad: np.ndarray) -> tuple[np.ndarray]:
        grad_blocks = np.zeros(blocks.shape, dtype=grad.dtype)
        np.put_along_axis(grad_blocks, index, grad[..., None], axis=-1)
        grad_blocks = grad_blocks.reshape(n, c, out_h, out_w, 2, 2).transpose(0, 1, 2, 4, 3, 5)

        grad_x = np.zeros(x.shape, dtype=grad.dtype)
        grad_x[:, :, : out_h * 2, : out_w * 2] = grad_blocks.reshape(n, c, out_h * 2, out_w * 2)
        return (grad_x,)

    return _result(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Reduce ``(N, C, H, W)`` to ``(N, C)`` by spatial averaging."""
    n, c, height, width = x.shape

    def backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (np.broadcast_to(grad[:, :, None, None] / (height * width), x.shape).copy(),)

    return _result(x.data.mean(axis=(2, 3)), (x,), backward)


def l2_normalize(x: Tensor) -> Tensor:
    """Normalize each row of a ``(N, D)`` tensor to unit length."""
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    zero = np.flatnonzero(norms[:, 0] < NORM_EPS)
    if zero.size:
        raise NormalizationError(f"Cannot normalize zero vector at row {int(zero[0])}")
    out = x.data / norms

    def backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return ((grad - out * (grad * out).sum(axis=1, keepdims=True)) / norms,)

    return _result(out, (x,), backward)


def _logsumexp(logits: np.ndarray) -> np.ndarray:
    top = logits.max(axis=1, keepdims=True)
    return (top + np.log(np.exp(logits - top).sum(axis=1, keepdims=True)))[:, 0]


def info_nce_loss(
    query: Tensor, keys: np.ndarray, negatives: np.ndarray, temperature: float, include_positive: bool = True
) -> Tensor:
    """Mean InfoNCE loss of a batch of query rows against their positive keys and shared negatives.

    Args:
        query: ``(N, P)`` unit query embeddings.
        keys: ``(N, P)`` unit positive keys, treated as constants.
        negatives: ``(K, P)`` unit negative keys, treated as constants.
        temperature: Softmax temperature, must be positive.
        include_positive: Whether the positive term is part of the denominator.
    """
    if temperature <= 0:
        raise ValueError(f"Temperature must be positive, got {temperature}")

    n = query.shape[0]
    positive = (query.data * keys).sum(axis=1) / temperature
    negative = query.data @ negatives.T / temperature

    logits = np.concatenate([positive[:, None], negative], axis=1) if include_positive else negative
    lse = _logsumexp(logits)
    loss = (lse - positive).mean()

    def backward(grad: np.ndarray) -> tuple[np.ndarray]:
        probs = np.exp(logits - lse[:, None])
        if include_positive:
            grad_positive = probs[:, 0] - 1.0
            grad_negative = probs[:, 1:]
        else:
            grad_positive = -np.ones(n, dtype=probs.dtype)
            grad_negative = probs
        grad_query = (grad_positive[:, None] * keys + grad_negative @ negatives) / temperature
        return (grad * grad_query / n,)

    return _result(np.asarray(loss), (query,), backward)


def triplet_margin_loss(anchor: Tensor, positive: Tensor, negative: Tensor, margin: float) -> Tensor:
    """Mean of ``max(margin + |a - p|^2 - |a - n|^2, 0)`` over the rows of a batch."""
    n = anchor.shape[0]
    to_positive = anchor.data - positive.data
    to_negative = anchor.data - negative.data
    violation = margin + (to_positive**2).sum(axis=1) - (to_negative**2).sum(axis=1)
    active = (violation > 0).astype(anchor.dtype)[:, None]

    def backward(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        scale = grad * 2.0 * active / n
        return scale * (to_positive - to_negative), -scale * to_positive, scale * to_negative

    return _result(np.asarray(np.maximum(violation, 0).mean()), (anchor, positive, negative), backward)
