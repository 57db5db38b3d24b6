# pipeline/regressors/store.py
"""
Save and restore trained networks through parameter checkpoints.
"""
import logging
from pathlib import Path
from typing import Union

from pipeline.regressors.multitask import MultiTaskHead
from pipeline.regressors.progressive import BaselineNet, ProgressiveNet, build_net
from poselift.autodiff.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from poselift.core.errors import CheckpointError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
PoseNet = Union[ProgressiveNet, BaselineNet]


def save_model(path: PathLike, model) -> None:
    save_checkpoint(path, model.params, model.kind, model.layer_sizes(), model.seed)


def load_net(path: PathLike) -> PoseNet:
    """
    Rebuild a progressive or baseline net from a checkpoint.

    Raises:
        CheckpointError: If the file holds another kind of model or does not fit
    """
    header, _ = read_checkpoint(path)
    if header.model_kind not in (ProgressiveNet.kind, BaselineNet.kind):
        raise CheckpointError(f"{path}: holds a {header.model_kind} model, expected a 3D pose network")
    sizes = header.layer_sizes
    try:
        net = build_net(header.model_kind, int(sizes["width"]), int(sizes["depth"]), bool(sizes["use_attributes"]), header.seed)
    except KeyError as e:
        raise CheckpointError(f"{path}: layer sizes lack {e.args[0]!r}") from e
    load_checkpoint(path, net.params, model_kind=net.kind, layer_sizes=net.layer_sizes())
    return net


def load_head(path: PathLike) -> MultiTaskHead:
    header, _ = read_checkpoint(path)
    if header.model_kind != MultiTaskHead.kind:
        raise CheckpointError(f"{path}: holds a {header.model_kind} model, expected {MultiTaskHead.kind}")
    sizes = header.layer_sizes
    try:
        head = MultiTaskHead(
            width=int(sizes["width"]),
            heatmap_size=int(sizes["heatmap_size"]),
            heatmap_sigma=float(sizes["heatmap_sigma"]),
            beta=float(sizes["beta"]),
            seed=header.seed,
        )
    except KeyError as e:
        raise CheckpointError(f"{path}: layer sizes lack {e.args[0]!r}") from e
    load_checkpoint(path, head.params, model_kind=head.kind, layer_sizes=head.layer_sizes())
    return head
