# poselift/autodiff/optim.py
"""
Trainable parameter collections and the RMSprop update.
"""
import logging
from typing import Dict, Iterator, Mapping, Optional, Tuple

import numpy as np

from poselift.autodiff.tensor import Tensor
from poselift.core.errors import CheckpointError, ConfigError, ShapeError

logger = logging.getLogger(__name__)


class Params:
    """Named trainable tensors plus their RMSprop accumulators, in insertion order."""

    def __init__(self, prefix: str = ""):
        self.prefix = prefix
        self._tensors: Dict[str, Tensor] = {}
        self._acc: Dict[str, np.ndarray] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        name = f"{self.prefix}{name}"
        if name in self._tensors:
            raise ConfigError(f"parameter {name!r} is already defined")
        tensor = Tensor(data, requires_grad=True, name=name)
        self._tensors[name] = tensor
        self._acc[name] = np.zeros_like(tensor.data)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._tensors.items())

    def accumulator(self, name: str) -> np.ndarray:
        return self._acc[name]

    def count(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def state(self) -> Dict[str, np.ndarray]:
        """Copies of the current parameter values."""
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def load_state(self, values: Mapping[str, np.ndarray], reset_accumulators: bool = True) -> None:
        """
        Overwrite parameter values by name.

        Raises:
            CheckpointError: If names or shapes differ from this collection
        """
        missing = [n for n in self._tensors if n not in values]
        extra = [n for n in values if n not in self._tensors]
        if missing or extra:
            raise CheckpointError(f"parameter names differ: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, tensor in self._tensors.items():
            value = np.asarray(values[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise CheckpointError(f"parameter {name!r}: expected shape {tensor.shape}, got {value.shape}")
        for name, tensor in self._tensors.items():
            tensor.data = np.array(values[name], dtype=np.float64)
            if reset_accumulators:
                self._acc[name] = np.zeros_like(tensor.data)


def rmsprop_step(
    params: Params,
    grads: Mapping[str, np.ndarray],
    lr: float,
    alpha: float = 0.99,
    eps: float = 1e-8,
) -> None:
    """
    One RMSprop update of every tensor in params.

    acc <- alpha * acc + (1 - alpha) * g^2
    theta <- theta - lr * g / (sqrt(acc) + eps)

    Tensors absent from grads are treated as having zero gradient.

    Raises:
        ConfigError: If lr, alpha or eps is out of range
        ShapeError: If a gradient does not match its parameter
    """
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if not 0 < alpha < 1:
        raise ConfigError(f"RMSprop alpha must lie in (0, 1), got {alpha}")
    if not eps > 0:
        raise ConfigError(f"RMSprop eps must be positive, got {eps}")
    unknown = [name for name in grads if name not in params]
    if unknown:
        raise ShapeError(f"gradients for unknown parameters: {unknown[:3]}")

    for name, tensor in params.items():
        g: Optional[np.ndarray] = grads.get(name)
        if g is None:
            g = np.zeros_like(tensor.data)
        elif np.shape(g) != tensor.shape:
            raise ShapeError(f"gradient for {name!r} has shape {np.shape(g)}, parameter has {tensor.shape}")
        acc = alpha * params._acc[name] + (1.0 - alpha) * g * g
        params._acc[name] = acc
        tensor.data = tensor.data - lr * g / (np.sqrt(acc) + eps)
