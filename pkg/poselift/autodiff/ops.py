# poselift/autodiff/ops.py
"""
Differentiable operations. Each returns a new Tensor and, under an active
tape, records a closure mapping the upstream gradient to input gradients.
"""
from typing import Sequence

import numpy as np

from poselift.autodiff.tensor import Tensor, record
from poselift.core.errors import ConfigError, ShapeError


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def _matrix(op: str, x: Tensor) -> None:
    if len(x.shape) != 2:
        raise ShapeError(f"{op}: expected a 2-D tensor, got shape {x.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _matrix("matmul", a)
    _matrix("matmul", b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    out = Tensor(a.data @ b.data)
    return record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return record(Tensor(a.data + b.data), (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return record(Tensor(a.data - b.data), (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product."""
    _same_shape("mul", a, b)
    return record(Tensor(a.data * b.data), (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return record(Tensor(x.data * c), (x,), lambda g: (g * c,), "scale")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x[m, n] + bias[n], the bias broadcast over rows."""
    _matrix("add_bias", x)
    if bias.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: bias shape {bias.shape} does not fit input {x.shape}")
    return record(Tensor(x.data + bias.data), (x, bias), lambda g: (g, g.sum(axis=0)), "add_bias")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(Tensor(np.where(mask, x.data, 0.0)), (x,), lambda g: (g * mask,), "relu")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: nothing to concatenate")
    ndim = len(tensors[0].shape)
    axis = axis % ndim
    for t in tensors[1:]:
        rest = [d for i, d in enumerate(t.shape) if i != axis]
        first = [d for i, d in enumerate(tensors[0].shape) if i != axis]
        if len(t.shape) != ndim or rest != first:
            raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    return record(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def gather_cols(x: Tensor, index: Sequence[int]) -> Tensor:
    """out[:, k] = x[:, index[k]]; repeated indices accumulate in backward."""
    _matrix("gather_cols", x)
    index = np.asarray(index, dtype=np.int64)
    if index.size == 0 or index.min() < -x.shape[1] or index.max() >= x.shape[1]:
        raise ShapeError(f"gather_cols: index out of range for shape {x.shape}")

    def grad(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), index), g)
        return (gx,)

    return record(Tensor(x.data[:, index]), (x,), grad, "gather_cols")


def take_rows(x: Tensor, index: Sequence[int]) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    if index.size == 0 or index.min() < -x.shape[0] or index.max() >= x.shape[0]:
        raise ShapeError(f"take_rows: index out of range for shape {x.shape}")

    def grad(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return record(Tensor(x.data[index]), (x,), grad, "take_rows")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from e
    return record(Tensor(data), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def sum_all(x: Tensor) -> Tensor:
    return record(Tensor(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),), "sum_all")


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return record(Tensor(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),), "mean_all")


def detach(x: Tensor) -> Tensor:
    """Same values, cut from the tape."""
    return Tensor(x.data)


def grad_reversal(x: Tensor, lam: float) -> Tensor:
    """
    Identity forward; backward multiplies the upstream gradient by -lam.

    Raises:
        ConfigError: If lam is not positive
    """
    if not lam > 0:
        raise ConfigError(f"gradient reversal strength must be positive, got {lam}")
    lam = float(lam)
    return record(Tensor(x.data), (x,), lambda g: (-lam * g,), "grad_reversal")


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction."""
    _matrix("softmax_rows", x)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def grad(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return record(Tensor(s), (x,), grad, "softmax_rows")


def soft_argmax_grid(h: Tensor, height: int, width: int, beta: float) -> Tensor:
    """
    Batched soft-argmax: h[B, height*width] row-major grids -> [B, 2] (x, y)
    expectations of the grid coordinates under softmax(beta * h).
    """
    if not beta > 0:
        raise ConfigError(f"soft-argmax beta must be positive, got {beta}")
    _matrix("soft_argmax_grid", h)
    if h.shape[1] != height * width:
        raise ShapeError(f"soft_argmax_grid: {h.shape} does not hold {height}x{width} grids")
    ys, xs = np.divmod(np.arange(height * width, dtype=np.float64), width)
    grid = np.stack([xs, ys], axis=1)
    z = beta * h.data
    e = np.exp(z - z.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def grad(g):
        d_p = g @ grid.T
        return (beta * p * (d_p - (d_p * p).sum(axis=1, keepdims=True)),)

    return record(Tensor(p @ grid), (h,), grad, "soft_argmax")


def soft_argmax2d(h: Tensor, beta: float = 1.0) -> Tensor:
    """Soft-argmax of one H x W heatmap -> (x, y) in grid units."""
    if len(h.shape) != 2:
        raise ShapeError(f"soft_argmax2d: expected an H x W heatmap, got shape {h.shape}")
    height, width = h.shape
    out = soft_argmax_grid(reshape(h, (1, height * width)), height, width, beta)
    return reshape(out, (2,))
