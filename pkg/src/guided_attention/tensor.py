"""Dense tensors with tape-based reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`; when any input requires a
gradient (and recording is enabled) the result keeps references to its inputs
and a closure that maps the output gradient to input gradients. The graph is
rebuilt on every forward pass.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence, Tuple

import numpy as np

from .errors import DimensionError, UsageError

ArrayLike = "np.ndarray | float | int | Sequence"
BackwardFn = Callable[[np.ndarray], Tuple["np.ndarray | None", ...]]

_DTYPES = {"float64": np.float64, "float32": np.float32}
_default_dtype: type = np.float64
_state = threading.local()

#: Finite stand-in for -inf in masked correlations.
MASK_VALUE = -1e9


def set_default_dtype(name: str) -> None:
    """Select the scalar precision used for new tensors (``float64``/``float32``)."""

    global _default_dtype
    try:
        _default_dtype = _DTYPES[name]
    except KeyError:
        raise ValueError(f"Unsupported precision '{name}', expected one of {sorted(_DTYPES)}.") from None


def get_default_dtype() -> type:
    return _default_dtype


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""

    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """A numpy buffer with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_prev", "_backward")

    def __init__(self, data, *, requires_grad: bool = False, dtype=None) -> None:
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.array(data, dtype=dtype or _default_dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._prev: Tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    # ------------------------------------------------------------------
    # Metadata
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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # ------------------------------------------------------------------
    # Operators
    # ------------------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key) -> "Tensor":
        return index(self, key)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    # ------------------------------------------------------------------
    # Autodiff
    # ------------------------------------------------------------------
    def backward(self) -> None:
        backward(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data) -> Tensor:
    """Return a leaf tensor that requires a gradient."""

    return Tensor(data, requires_grad=True)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._prev = ()
    out._backward = None
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""

    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Back-propagate from a scalar ``loss``.

    Leaf tensors accumulate into ``grad`` so repeated calls add up;
    intermediate tensors receive the gradient of this pass only.

    Raises
    ------
    UsageError
        If ``loss`` is not a scalar or was not produced by recorded operations.
    """

    if loss.size != 1:
        raise UsageError(f"backward() requires a scalar loss, got shape {loss.shape}.")
    if not loss.requires_grad:
        raise UsageError("backward() called on a tensor that does not require grad.")

    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._prev:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node.is_leaf:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        node.grad = grad
        parent_grads = node._backward(grad)
        for parent, pgrad in zip(node._prev, parent_grads):
            if pgrad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pgrad if key in grads else pgrad


# ----------------------------------------------------------------------
# Elementwise arithmetic
# ----------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""

    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)
    return _result(x.data * factor, (x,), lambda g: (g * factor,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    positive = x.data > 0
    return _result(np.where(positive, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * positive,))


def masked_fill(x, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by ``value`` (no gradient there)."""

    x = as_tensor(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    return _result(
        np.where(mask, np.asarray(value, dtype=x.dtype), x.data),
        (x,),
        lambda g: (np.where(mask, 0.0, g),),
    )


# ----------------------------------------------------------------------
# Shape manipulation
# ----------------------------------------------------------------------
def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    original = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(original),))


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def index(x, key) -> Tensor:
    """Basic or integer-array indexing; the gradient scatters back additively."""

    x = as_tensor(x)

    def _backward(g: np.ndarray):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return _result(x.data[key], (x,), _backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    """Concatenate along ``axis``."""

    items = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in items]
    try:
        data = np.concatenate([t.data for t in items], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(t.shape) for t in items)
        raise DimensionError(f"Cannot concatenate shapes {shapes} along axis {axis}.") from exc
    bounds = np.cumsum([0] + sizes)

    def _backward(g: np.ndarray):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(items))
        )

    return _result(data, items, _backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    items = [as_tensor(t) for t in tensors]
    try:
        data = np.stack([t.data for t in items], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(t.shape) for t in items)
        raise DimensionError(f"Cannot stack shapes {shapes}.") from exc

    def _backward(g: np.ndarray):
        return tuple(np.take(g, i, axis=axis) for i in range(len(items)))

    return _result(data, items, _backward)


# ----------------------------------------------------------------------
# Reductions
# ----------------------------------------------------------------------
def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)) if g.ndim else g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _result(
        np.sum(x.data, axis=axis, keepdims=keepdims),
        (x,),
        lambda g: (_expand_reduced(g, shape, axis, keepdims).copy(),),
    )


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    """Arithmetic mean along ``axis`` (all axes when ``None``)."""

    x = as_tensor(x)
    shape = x.shape
    count = x.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))
    return _result(
        np.mean(x.data, axis=axis, keepdims=keepdims),
        (x,),
        lambda g: (_expand_reduced(g, shape, axis, keepdims) / count,),
    )


# ----------------------------------------------------------------------
# Linear algebra
# ----------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes.

    Raises
    ------
    DimensionError
        If the inner dimensions disagree.
    """

    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}.")

    def _backward(g: np.ndarray):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), _backward)


def linear(x, weight, bias=None) -> Tensor:
    """Affine map ``x @ weight + bias`` with ``weight`` of shape ``(in, out)``."""

    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def embedding(weight, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``."""

    weight = as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise DimensionError(f"Embedding ids out of range for table of shape {weight.shape}.")

    def _backward(g: np.ndarray):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids, g)
        return (full,)

    return _result(weight.data[ids], (weight,), _backward)


# ----------------------------------------------------------------------
# Normalisation over the last axis
# ----------------------------------------------------------------------
def _check_mask(x: Tensor, mask) -> np.ndarray | None:
    if mask is None:
        return None
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool)
    try:
        mask = np.broadcast_to(mask, x.shape)
    except ValueError:
        raise DimensionError(f"Mask of shape {mask.shape} does not broadcast to {x.shape}.") from None
    if not mask.any(axis=-1).all():
        raise UsageError("softmax over a fully masked row is undefined.")
    return mask


def softmax_lastdim(x, mask=None) -> Tensor:
    """Row-max stabilised softmax over the last axis.

    Positions where ``mask`` is false receive exactly zero weight.

    Raises
    ------
    UsageError
        If some row is masked everywhere.
    """

    x = as_tensor(x)
    valid = _check_mask(x, mask)
    data = x.data if valid is None else np.where(valid, x.data, -np.inf)
    shifted = data - data.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    y = exp / exp.sum(axis=-1, keepdims=True)

    def _backward(g: np.ndarray):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), _backward)


def log_softmax_lastdim(x, mask=None) -> Tensor:
    x = as_tensor(x)
    valid = _check_mask(x, mask)
    data = x.data if valid is None else np.where(valid, x.data, -np.inf)
    shifted = data - data.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - log_norm
    probs = np.exp(y)

    def _backward(g: np.ndarray):
        gx = g - probs * g.sum(axis=-1, keepdims=True)
        return (gx if valid is None else np.where(valid, gx, 0.0),)

    return _result(y, (x,), _backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then scale and shift."""

    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    n = x.shape[-1]

    def _backward(g: np.ndarray):
        gxhat = g * gamma.data
        gx = inv_std / n * (n * gxhat - gxhat.sum(axis=-1, keepdims=True)
                            - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), _backward)


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalisation over axis 1 of an ``(N, C, ...)`` tensor.

    In training mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance); in evaluation mode the running
    statistics make the op a fixed affine map.
    """

    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    channels = x.shape[1]
    axes = tuple(a for a in range(x.ndim) if a != 1)
    bshape = [1] * x.ndim
    bshape[1] = channels
    g_data = gamma.data.reshape(bshape)
    b_data = beta.data.reshape(bshape)

    if not training:
        inv_std = 1.0 / np.sqrt(running_var.reshape(bshape) + eps)
        xhat = (x.data - running_mean.reshape(bshape)) * inv_std

        def _eval_backward(g: np.ndarray):
            return (
                g * g_data * inv_std,
                (g * xhat).sum(axis=axes),
                g.sum(axis=axes),
            )

        return _result(xhat * g_data + b_data, (x, gamma, beta), _eval_backward)

    count = x.size // channels
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    running_mean *= 1.0 - momentum
    running_mean += momentum * mu.reshape(-1)
    unbiased = var.reshape(-1) * (count / max(count - 1, 1))
    running_var *= 1.0 - momentum
    running_var += momentum * unbiased

    def _train_backward(g: np.ndarray):
        gxhat = g * g_data
        gx = inv_std / count * (
            count * gxhat
            - gxhat.sum(axis=axes, keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _result(xhat * g_data + b_data, (x, gamma, beta), _train_backward)


def dropout(x, rate: float, rng: np.random.Generator | None, *, training: bool) -> Tensor:
    """Inverted dropout; the identity outside training or when ``rate == 0``."""

    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in training mode needs a random generator.")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(x.dtype)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


def cross_entropy(logits, targets: np.ndarray, *, ignore_index: int = 0) -> Tensor:
    """Mean token cross-entropy over positions whose target is not ``ignore_index``.

    Raises
    ------
    DimensionError
        If ``targets`` does not match the leading shape of ``logits``.
    UsageError
        If every target is ignored.
    """

    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"Targets of shape {targets.shape} do not match logits {logits.shape}.")
    keep = targets != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise UsageError("cross_entropy with every target equal to the ignore index.")

    flat = logits.data.reshape(-1, logits.shape[-1])
    flat_targets = targets.reshape(-1)
    flat_keep = keep.reshape(-1)
    shifted = flat - flat.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    picked = log_probs[np.arange(flat.shape[0]), flat_targets]
    loss = -(picked * flat_keep).sum() / count

    def _backward(g: np.ndarray):
        probs = np.exp(log_probs)
        probs[np.arange(flat.shape[0]), flat_targets] -= 1.0
        probs *= flat_keep[:, None] / count
        return ((probs * g).reshape(logits.shape),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), _backward)


# ----------------------------------------------------------------------
# Convolution and pooling
# ----------------------------------------------------------------------
def _as_batched(x: Tensor) -> Tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"Expected a C×H×W or N×C×H×W tensor, got shape {x.shape}.")
    return x, False


def conv2d(x, kernel, bias=None, *, padding: int = 0, stride: int = 1) -> Tensor:
    """2-D cross-correlation (no kernel flip).

    Parameters
    ----------
    x:
        Input of shape ``C_in×H×W`` or ``N×C_in×H×W``.
    kernel:
        Weights of shape ``C_out×C_in×k×k`` with odd ``k``.
    bias:
        Optional ``C_out`` vector.
    padding, stride:
        Zero padding on every side and the sliding stride.

    Raises
    ------
    DimensionError
        On a channel mismatch or an even kernel size.
    """

    x, kernel = as_tensor(x), as_tensor(kernel)
    batched, squeeze = _as_batched(x)
    n, c_in, height, width = batched.shape
    c_out, k_in, kh, kw = kernel.shape
    if k_in != c_in:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}.")
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"conv2d needs an odd square kernel, got {kernel.shape}.")

    padded = np.pad(batched.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (height + 2 * padding - kh) // stride + 1
    out_w = (width + 2 * padding - kw) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise DimensionError(f"conv2d kernel {kernel.shape} larger than padded input {x.shape}.")

    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    windows = windows[:, :, : out_h * stride : stride, : out_w * stride : stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, c_in * kh * kw)
    w_mat = kernel.data.reshape(c_out, -1)
    out = (cols @ w_mat.T).reshape(n, out_h, out_w, c_out).transpose(0, 3, 1, 2)
    parents: list[Tensor] = [batched, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, c_out, 1, 1)
        parents.append(bias)

    def _backward(g: np.ndarray):
        g_flat = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        g_kernel = (g_flat.T @ cols).reshape(kernel.shape)
        g_cols = (g_flat @ w_mat).reshape(n, out_h, out_w, c_in, kh, kw)
        g_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                g_padded[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += (
                    g_cols[..., i, j].transpose(0, 3, 1, 2)
                )
        g_x = g_padded[:, :, padding : padding + height, padding : padding + width]
        grads = [g_x, g_kernel]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    result = _result(np.ascontiguousarray(out), parents, _backward)
    return reshape(result, result.shape[1:]) if squeeze else result


def _pool_pad(data: np.ndarray, fill: float) -> np.ndarray:
    pad_h = data.shape[2] % 2
    pad_w = data.shape[3] % 2
    return np.pad(data, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)), constant_values=fill)


def avg_pool2d(x) -> Tensor:
    """2×2 average pooling, stride 2, ceil mode (edge windows average what they cover)."""

    x = as_tensor(x)
    batched, squeeze = _as_batched(x)
    n, c, height, width = batched.shape
    padded = _pool_pad(batched.data, 0.0)
    counts = _pool_pad(np.ones((1, 1, height, width), dtype=batched.dtype), 0.0)
    out_h, out_w = padded.shape[2] // 2, padded.shape[3] // 2
    sums = padded.reshape(n, c, out_h, 2, out_w, 2).sum(axis=(3, 5))
    denom = counts.reshape(1, 1, out_h, 2, out_w, 2).sum(axis=(3, 5))

    def _backward(g: np.ndarray):
        spread = np.repeat(np.repeat(g / denom, 2, axis=2), 2, axis=3)
        return (spread[:, :, :height, :width],)

    result = _result(sums / denom, (batched,), _backward)
    return reshape(result, result.shape[1:]) if squeeze else result


def max_pool2d(x) -> Tensor:
    """2×2 max pooling, stride 2, ceil mode; ties route the gradient to the first maximum."""

    x = as_tensor(x)
    batched, squeeze = _as_batched(x)
    n, c, height, width = batched.shape
    padded = _pool_pad(batched.data, -np.inf)
    out_h, out_w = padded.shape[2] // 2, padded.shape[3] // 2
    blocks = padded.reshape(n, c, out_h, 2, out_w, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, out_h, out_w, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def _backward(g: np.ndarray):
        routed = np.zeros((n, c, out_h, out_w, 4), dtype=g.dtype)
        np.put_along_axis(routed, arg[..., None], g[..., None], axis=-1)
        full = routed.reshape(n, c, out_h, out_w, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        full = full.reshape(n, c, out_h * 2, out_w * 2)
        return (full[:, :, :height, :width],)

    result = _result(out, (batched,), _backward)
    return reshape(result, result.shape[1:]) if squeeze else result
