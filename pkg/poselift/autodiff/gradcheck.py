# poselift/autodiff/gradcheck.py
"""
Central finite-difference gradient checks.
"""
from typing import Callable, Dict, Sequence

import numpy as np

from poselift.autodiff.tensor import Tape, Tensor

FD_STEP = 1e-5


def numerical_grad(fn: Callable[[], Tensor], tensor: Tensor, step: float = FD_STEP) -> np.ndarray:
    """d fn() / d tensor by central differences, perturbing tensor.data in place."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    for k in range(flat.size):
        original = flat[k]
        flat[k] = original + step
        plus = fn().item()
        flat[k] = original - step
        minus = fn().item()
        flat[k] = original
        out[k] = (plus - minus) / (2.0 * step)
    return grad


def analytic_grads(fn: Callable[[], Tensor], inputs: Sequence[Tensor]) -> Dict[int, np.ndarray]:
    with Tape() as tape:
        loss = fn()
    grads = tape.backward(loss)
    return {i: grads[t] if t in grads else np.zeros_like(t.data) for i, t in enumerate(inputs)}


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-10)
    return float(np.linalg.norm(analytic - numeric) / scale)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = FD_STEP) -> float:
    """
    Largest relative error between tape and finite-difference gradients over inputs.

    fn must rebuild its scalar output from the current values of inputs on
    every call; inputs must require gradients.
    """
    analytic = analytic_grads(fn, inputs)
    return max(relative_error(analytic[i], numerical_grad(fn, t, step)) for i, t in enumerate(inputs))
