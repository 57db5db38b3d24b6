# poselift/autodiff/checkpoint.py
"""
Parameter checkpoints.

Layout: b"PLCK", little-endian uint32 header length, UTF-8 JSON header
{format_version, model_kind, layer_sizes, seed, tensors: [{name, shape}]},
then each tensor's float64 little-endian values in header order.
"""
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ValidationError

from poselift.autodiff.optim import Params
from poselift.core.config import CHECKPOINT_FORMAT_VERSION
from poselift.core.errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"PLCK"
_LENGTH = struct.Struct("<I")


class TensorEntry(BaseModel):
    name: str
    shape: Tuple[int, ...]


class CheckpointHeader(BaseModel):
    format_version: int = CHECKPOINT_FORMAT_VERSION
    model_kind: str
    layer_sizes: Dict[str, Any]
    seed: int
    tensors: List[TensorEntry] = []


def save_checkpoint(
    path: Union[str, Path],
    params: Params,
    model_kind: str,
    layer_sizes: Dict[str, Any],
    seed: int,
) -> None:
    header = CheckpointHeader(
        model_kind=model_kind,
        layer_sizes=layer_sizes,
        seed=seed,
        tensors=[TensorEntry(name=name, shape=t.shape) for name, t in params.items()],
    )
    encoded = json.dumps(header.model_dump(), separators=(",", ":"), sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(_LENGTH.pack(len(encoded)))
        fh.write(encoded)
        for _, tensor in params.items():
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    logger.info(f"Wrote {model_kind} checkpoint with {params.count()} parameters to {path}")


def read_checkpoint(path: Union[str, Path]) -> Tuple[CheckpointHeader, Dict[str, np.ndarray]]:
    """
    Raises:
        CheckpointError: If the file is not a readable checkpoint
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"{path}: no such checkpoint")
    blob = path.read_bytes()
    if blob[:4] != MAGIC or len(blob) < 8:
        raise CheckpointError(f"{path}: not a poselift checkpoint")
    (length,) = _LENGTH.unpack_from(blob, 4)
    try:
        header = CheckpointHeader.model_validate_json(blob[8:8 + length])
    except ValidationError as e:
        raise CheckpointError(f"{path}: unreadable header ({e.error_count()} problem(s))") from e
    if header.format_version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {header.format_version} is not supported")

    values: Dict[str, np.ndarray] = {}
    offset = 8 + length
    for entry in header.tensors:
        count = int(np.prod(entry.shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(blob):
            raise CheckpointError(f"{path}: truncated at tensor {entry.name!r}")
        values[entry.name] = np.frombuffer(blob[offset:end], dtype="<f8").astype(np.float64).reshape(entry.shape)
        offset = end
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return header, values


def load_checkpoint(
    path: Union[str, Path],
    params: Params,
    model_kind: Optional[str] = None,
    layer_sizes: Optional[Dict[str, Any]] = None,
) -> CheckpointHeader:
    """
    Load values into params after checking the model kind and layer sizes.

    Raises:
        CheckpointError: On any mismatch, naming the mismatched dimensions
    """
    header, values = read_checkpoint(path)
    if model_kind is not None and header.model_kind != model_kind:
        raise CheckpointError(f"{path}: holds a {header.model_kind} model, expected {model_kind}")
    if layer_sizes is not None:
        expected = json.loads(json.dumps(layer_sizes))
        diffs = [
            f"{key}: checkpoint {header.layer_sizes.get(key)} vs model {value}"
            for key, value in expected.items()
            if header.layer_sizes.get(key) != value
        ]
        if diffs:
            raise CheckpointError(f"{path}: layer sizes differ ({'; '.join(diffs)})")
    params.load_state(values)
    logger.info(f"Loaded {header.model_kind} checkpoint from {path}")
    return header
