# poselift/autodiff/losses.py
from typing import Sequence

import numpy as np

from poselift.autodiff.ops import softmax_rows
from poselift.autodiff.tensor import Tensor, record
from poselift.core.errors import ShapeError

LOG_CLAMP = 1e-12


def cross_entropy(probs: Tensor, labels: Sequence[int]) -> Tensor:
    """
    Mean over rows of -log probs[row, label], the log clamped at 1e-12.

    Raises:
        ShapeError: If labels do not match the rows or a class index is out of range
    """
    if len(probs.shape) != 2:
        raise ShapeError(f"cross_entropy: expected m x c probabilities, got shape {probs.shape}")
    m, c = probs.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape != (m,):
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for {m} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ShapeError(f"cross_entropy: class index out of range [0, {c})")
    rows = np.arange(m)
    picked = probs.data[rows, labels]
    clamped = np.maximum(picked, LOG_CLAMP)

    def grad(g):
        gp = np.zeros_like(probs.data)
        gp[rows, labels] = np.where(picked > LOG_CLAMP, -float(g) / (m * clamped), 0.0)
        return (gp,)

    return record(Tensor(-np.log(clamped).mean()), (probs,), grad, "cross_entropy")


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    return cross_entropy(softmax_rows(logits), labels)


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference; the subgradient at a tie is 0."""
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: shapes {pred.shape} and {target.shape} do not match")
    diff = pred.data - target.data
    n = diff.size

    def grad(g):
        gd = np.sign(diff) * (float(g) / n)
        return (gd, -gd)

    return record(Tensor(np.abs(diff).mean()), (pred, target), grad, "l1_loss")


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shapes {pred.shape} and {target.shape} do not match")
    diff = pred.data - target.data
    n = diff.size

    def grad(g):
        gd = diff * (2.0 * float(g) / n)
        return (gd, -gd)

    return record(Tensor((diff ** 2).mean()), (pred, target), grad, "mse_loss")
