# poselift/autodiff/tensor.py
"""
Tensors and the differentiation tape.

Operations record onto the active Tape only while one is open and at least
one input requires gradients. Tape.backward walks the record in reverse.
"""
import logging
from contextvars import ContextVar
from typing import Callable, Dict, Iterator, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from poselift.core import config
from poselift.core.errors import ShapeError, TapeError

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_ACTIVE_TAPE: ContextVar[Optional["Tape"]] = ContextVar("poselift_active_tape", default=None)


class Tensor:
    """Row-major float64 array with an optional gradient requirement."""

    __slots__ = ("data", "requires_grad", "name", "_recorded")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if any(dim <= 0 for dim in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._recorded = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return not self._recorded

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the op implementations live in autodiff.ops
    def __add__(self, other: "Tensor") -> "Tensor":
        from poselift.autodiff.ops import add
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        from poselift.autodiff.ops import sub
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        from poselift.autodiff.ops import mul
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from poselift.autodiff.ops import matmul
        return matmul(self, other)


class Node(NamedTuple):
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: BackwardFn
    op: str


class Gradients(Mapping):
    """Gradients of one backward pass, keyed by the leaf tensors themselves."""

    def __init__(self, entries: Dict[int, Tuple[Tensor, np.ndarray]]):
        self._entries = entries

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        try:
            return self._entries[id(tensor)][1]
        except KeyError:
            raise KeyError(f"no gradient for {tensor!r}") from None

    def __contains__(self, tensor) -> bool:
        return isinstance(tensor, Tensor) and id(tensor) in self._entries and self._entries[id(tensor)][0] is tensor

    def __iter__(self) -> Iterator[Tensor]:
        return (tensor for tensor, _ in self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)

    def by_name(self, params) -> Dict[str, np.ndarray]:
        """Gradients of the named tensors in a Params collection that were reached."""
        return {name: self[t] for name, t in params.items() if t in self}


class Tape:
    """
    Ordered record of executed operations.

    Use as a context manager around a forward pass, then call backward on the
    scalar loss. Backward does not consume the record, so repeated calls give
    identical gradients.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        if self._token is not None:
            raise TapeError("tape is already active")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> Gradients:
        """
        Reverse-mode gradients of a scalar loss with respect to every leaf
        tensor that requires gradients and contributes to it.

        Raises:
            TapeError: If loss is not a scalar produced on this tape
        """
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        end = next((i for i in range(len(self.nodes) - 1, -1, -1) if self.nodes[i].output is loss), None)
        if end is None:
            raise TapeError("loss was not produced on this tape")

        adjoints: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: Dict[int, Tensor] = {}
        for node in reversed(self.nodes[:end + 1]):
            upstream = adjoints.pop(id(node.output), None)
            if upstream is None:
                continue
            for tensor, grad in zip(node.inputs, node.backward(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                adjoints[key] = adjoints[key] + grad if key in adjoints else grad
                if tensor.is_leaf:
                    leaves[key] = tensor

        return Gradients({key: (tensor, adjoints[key]) for key, tensor in leaves.items()})


def record(output: Tensor, inputs: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Attach output to the active tape when any input requires gradients.

    With POSELIFT_DEBUG set, a non-finite output raises TapeError naming the op.
    """
    if config.POSELIFT_DEBUG and not np.all(np.isfinite(output.data)):
        raise TapeError(f"{op} produced non-finite values")
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        output._recorded = True
        tape.nodes.append(Node(output, tuple(inputs), backward, op))
    return output


def backward(loss: Tensor, tape: Optional[Tape] = None) -> Gradients:
    """Backward pass on the given tape, or the active one."""
    tape = tape or _ACTIVE_TAPE.get()
    if tape is None:
        raise TapeError("no tape recorded the forward pass")
    return tape.backward(loss)
