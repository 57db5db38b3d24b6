# pipeline/tasks/training.py
"""
Three-stage training: the multi-task head on mixed batches (stage 1), the 3D
network on 2D evidence plus ground-truth attributes (stage 2), then joint
fine-tuning of both (stage 3). Inference helpers live here too.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from pipeline.regressors.evidence import ATTR_DIM, encode_evidence, evidence_matrix, jitter_coords, normalized_coords
from pipeline.regressors.multitask import LAB_DOMAIN, WILD_DOMAIN, MultiTaskHead, loss_attr
from pipeline.regressors.progressive import MM_PER_UNIT, assemble_pose, loss_3d, outputs_to_poses, targets_from_poses
from pipeline.regressors.store import PoseNet
from poselift.autodiff.losses import softmax_cross_entropy
from poselift.autodiff.ops import add, concat, reshape, scale, softmax_rows, take_rows
from poselift.autodiff.optim import rmsprop_step
from poselift.autodiff.tensor import Tape, Tensor
from poselift.core.errors import ConfigError, DatasetFormatError
from poselift.models.schemas import NUM_ATTR_CLASSES, NUM_ATTR_JOINTS, EpochRecord, TrainConfig
from poselift.services.geometry import compute_attributes, resolve_tau
from poselift.services.skeleton import Dataset, Pose2D, Pose3D, mixed_epoch, shuffled_batches

logger = logging.getLogger(__name__)

PREDICT_CHUNK = 256

# attr_strategy -> how the domain classifier is attached during training
DOMAIN_MODE = {"3d_only": None, "mixed": "detach", "mixed_da": "reverse"}


@dataclass(frozen=True)
class DatasetArrays:
    coords: np.ndarray
    targets: Optional[np.ndarray]
    labels: Optional[np.ndarray]
    index: Dict[str, int]

    def rows(self, records) -> np.ndarray:
        return np.array([self.index[r.id] for r in records], dtype=np.int64)


def attribute_labels(ds: Dataset) -> np.ndarray:
    """
    N x 9 class indices: stored attributes, or labels computed from pose3d
    with the dataset's threshold.
    """
    labels = []
    for record in ds:
        attrs = record.attributes
        if attrs is None:
            if record.pose3d is None:
                raise DatasetFormatError(f"record {record.id!r} has neither attributes nor pose3d")
            attrs = compute_attributes(record.pose3d, resolve_tau(record.pose3d, ds.meta.tau_mm, ds.meta.tau_mode))
        labels.append(attrs.indices())
    return np.stack(labels) if labels else np.zeros((0, NUM_ATTR_JOINTS), dtype=np.int64)


def dataset_arrays(ds: Dataset, targets: bool = False, labels: bool = False) -> DatasetArrays:
    if targets:
        missing = [r.id for r in ds if r.pose3d is None]
        if missing:
            raise DatasetFormatError(f"dataset {ds.meta.name}: {len(missing)} record(s) lack pose3d, first {missing[0]!r}")
    return DatasetArrays(
        coords=normalized_coords([r.pose2d for r in ds]),
        targets=targets_from_poses(np.stack([r.pose3d.coords for r in ds])) if targets and len(ds) else None,
        labels=attribute_labels(ds) if labels else None,
        index={r.id: i for i, r in enumerate(ds)},
    )


def one_hot(labels: np.ndarray) -> np.ndarray:
    """N x 9 class indices -> N x 9 x 3 one-hot probabilities."""
    return np.eye(NUM_ATTR_CLASSES)[np.asarray(labels, dtype=np.int64)]


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == np.asarray(labels).reshape(-1)).mean())


def _epoch_batches(dsA: Dataset, dsB: Optional[Dataset], cfg: TrainConfig, epoch: int, mixed: bool):
    if mixed:
        return [(b.from_a, b.from_b) for b in mixed_epoch(dsA, dsB, cfg.batch_size, cfg.seed, epoch)]
    return [(batch, ()) for batch in shuffled_batches(dsA, cfg.batch_size, cfg.seed, epoch)]


def train_multitask(
    head: MultiTaskHead,
    dsA: Dataset,
    dsB: Optional[Dataset],
    cfg: TrainConfig,
    progress: bool = False,
) -> Tuple[MultiTaskHead, List[EpochRecord]]:
    """
    Stage 1. Attribute loss on the Labeled3D half of each batch, domain loss
    on both halves; the domain classifier sits behind gradient reversal
    (mixed_da), a stop-gradient (mixed) or is unused (3d_only).
    """
    cfg = cfg.for_stage(1)
    mode = DOMAIN_MODE[cfg.attr_strategy]
    mixed = mode is not None
    if mixed and (dsB is None or len(dsB) == 0):
        raise ConfigError(f"attr_strategy {cfg.attr_strategy} needs a nonempty Labeled2D dataset")
    arrA = dataset_arrays(dsA, labels=True)
    arrB = dataset_arrays(dsB) if mixed else None
    logger.info(
        f"Stage 1: {cfg.epochs} epochs, batch {cfg.batch_size}, lr {cfg.lr:g} to {cfg.lr * cfg.lr_decay:g}, "
        f"strategy {cfg.attr_strategy}, {len(dsA)} lab + {len(dsB) if mixed else 0} wild records"
    )

    history = []
    for epoch in tqdm(range(cfg.epochs), desc="stage 1", unit="epoch", disable=not progress):
        lr = cfg.epoch_lr(epoch)
        rng = np.random.default_rng([cfg.seed, epoch, 1])
        totals = np.zeros(5)
        batches = _epoch_batches(dsA, dsB, cfg, epoch, mixed)
        for recs_a, recs_b in batches:
            rows_a = arrA.rows(recs_a)
            coords = arrA.coords[rows_a]
            if mixed:
                coords = np.concatenate([coords, arrB.coords[arrB.rows(recs_b)]])
            coords = jitter_coords(coords, cfg.scale_jitter, rng)
            labels = arrA.labels[rows_a]
            n_a = len(rows_a)

            with Tape() as tape:
                out = head.forward(coords, domain=mode, lam=cfg.lambda_grl)
                attr_logits = take_rows(out.attr_logits, np.arange(n_a * NUM_ATTR_JOINTS))
                l_attr = loss_attr(attr_logits, labels)
                loss = l_attr
                if mixed:
                    domains = np.array([LAB_DOMAIN] * n_a + [WILD_DOMAIN] * len(recs_b))
                    l_domain = softmax_cross_entropy(out.domain_logits, domains)
                    loss = add(l_attr, l_domain)
            grads = tape.backward(loss)
            rmsprop_step(head.params, grads.by_name(head.params), lr, cfg.rms_alpha, cfg.rms_eps)

            totals += [
                loss.item(),
                l_attr.item(),
                l_domain.item() if mixed else 0.0,
                _accuracy(attr_logits.data, labels),
                _accuracy(out.domain_logits.data, domains) if mixed else 0.0,
            ]

        means = totals / len(batches)
        record = EpochRecord(
            stage=1,
            epoch=epoch,
            lr=lr,
            loss=means[0],
            loss_attr=means[1],
            loss_domain=means[2] if mixed else None,
            attr_acc=means[3],
            domain_acc=means[4] if mixed else None,
        )
        history.append(record)
        logger.info(f"Stage 1 epoch {epoch}: loss {record.loss:.5f}, attr acc {record.attr_acc:.3f}")
    return head, history


def _train_stage2(net: PoseNet, head: Optional[MultiTaskHead], ds: Dataset, cfg: TrainConfig, progress: bool):
    arr = dataset_arrays(ds, targets=True, labels=net.use_attributes)
    head_acc = None
    if head is not None and net.use_attributes:
        predicted = head.attr_probs(arr.coords).argmax(axis=2)
        head_acc = float((predicted == arr.labels).mean())
    logger.info(
        f"Stage 2: {cfg.epochs} epochs, batch {cfg.batch_size}, lr {cfg.lr:g} to {cfg.lr * cfg.lr_decay:g}, "
        f"{net.kind} net, {len(ds)} records"
    )

    history = []
    for epoch in tqdm(range(cfg.epochs), desc="stage 2", unit="epoch", disable=not progress):
        lr = cfg.epoch_lr(epoch)
        total = 0.0
        batches = shuffled_batches(ds, cfg.batch_size, cfg.seed, epoch)
        for batch in batches:
            rows = arr.rows(batch)
            probs = one_hot(arr.labels[rows]) if net.use_attributes else None
            x = Tensor(evidence_matrix(arr.coords[rows], probs))
            with Tape() as tape:
                block1, block2 = net.forward(x)
                loss = loss_3d(block1, block2, Tensor(arr.targets[rows]))
            grads = tape.backward(loss)
            rmsprop_step(net.params, grads.by_name(net.params), lr, cfg.rms_alpha, cfg.rms_eps)
            total += loss.item()
        mean = total / len(batches)
        record = EpochRecord(stage=2, epoch=epoch, lr=lr, loss=mean, loss_3d=mean, attr_acc=head_acc)
        history.append(record)
        logger.info(f"Stage 2 epoch {epoch}: L3D {record.loss:.6f}")
    return net, head, history


def _train_stage3(
    net: PoseNet,
    head: MultiTaskHead,
    ds: Dataset,
    wild: Optional[Dataset],
    cfg: TrainConfig,
    progress: bool,
):
    mode = DOMAIN_MODE[cfg.attr_strategy]
    mixed = mode is not None and wild is not None and len(wild) > 0
    if mode is not None and not mixed:
        logger.warning("Stage 3 without a Labeled2D dataset: domain loss disabled")
    arr = dataset_arrays(ds, targets=True, labels=True)
    arr_w = dataset_arrays(wild) if mixed else None
    logger.info(
        f"Stage 3: {cfg.epochs} epochs, batch {cfg.batch_size}, lr {cfg.lr:g} to {cfg.lr * cfg.lr_decay:g}, "
        f"lambda_attr {cfg.lambda_attr}, lambda_domain {cfg.lambda_domain}"
    )

    history = []
    for epoch in tqdm(range(cfg.epochs), desc="stage 3", unit="epoch", disable=not progress):
        lr = cfg.epoch_lr(epoch)
        rng = np.random.default_rng([cfg.seed, epoch, 3])
        totals = np.zeros(6)
        batches = _epoch_batches(ds, wild, cfg, epoch, mixed)
        for recs_a, recs_b in batches:
            rows = arr.rows(recs_a)
            n_a = len(rows)
            coords = arr.coords[rows]
            if mixed:
                coords = np.concatenate([coords, arr_w.coords[arr_w.rows(recs_b)]])
            coords = jitter_coords(coords, cfg.scale_jitter, rng)
            labels = arr.labels[rows]

            with Tape() as tape:
                out = head.forward(coords, domain=mode if mixed else None, lam=cfg.lambda_grl)
                attr_logits = take_rows(out.attr_logits, np.arange(n_a * NUM_ATTR_JOINTS))
                l_attr = loss_attr(attr_logits, labels)
                x = Tensor(coords[:n_a])
                if net.use_attributes:
                    x = concat([x, reshape(softmax_rows(attr_logits), (n_a, ATTR_DIM))])
                block1, block2 = net.forward(x)
                l_3d = loss_3d(block1, block2, Tensor(arr.targets[rows]))
                loss = add(l_3d, scale(l_attr, cfg.lambda_attr))
                if mixed:
                    domains = np.array([LAB_DOMAIN] * n_a + [WILD_DOMAIN] * len(recs_b))
                    l_domain = softmax_cross_entropy(out.domain_logits, domains)
                    loss = add(loss, scale(l_domain, cfg.lambda_domain))
            grads = tape.backward(loss)
            rmsprop_step(net.params, grads.by_name(net.params), lr, cfg.rms_alpha, cfg.rms_eps)
            rmsprop_step(head.params, grads.by_name(head.params), lr, cfg.rms_alpha, cfg.rms_eps)

            totals += [
                loss.item(),
                l_3d.item(),
                l_attr.item(),
                l_domain.item() if mixed else 0.0,
                _accuracy(attr_logits.data, labels),
                _accuracy(out.domain_logits.data, domains) if mixed else 0.0,
            ]

        means = totals / len(batches)
        record = EpochRecord(
            stage=3,
            epoch=epoch,
            lr=lr,
            loss=means[0],
            loss_3d=means[1],
            loss_attr=means[2],
            loss_domain=means[3] if mixed else None,
            attr_acc=means[4],
            domain_acc=means[5] if mixed else None,
        )
        history.append(record)
        logger.info(f"Stage 3 epoch {epoch}: loss {record.loss:.6f}, L3D {record.loss_3d:.6f}")
    return net, head, history


def train_pose(
    net: PoseNet,
    head: Optional[MultiTaskHead],
    ds: Dataset,
    cfg: TrainConfig,
    wild: Optional[Dataset] = None,
    progress: bool = False,
) -> Tuple[PoseNet, Optional[MultiTaskHead], List[EpochRecord]]:
    """
    Stage 2 (cfg.stage == 2) trains the 3D net alone on 2D evidence plus
    ground-truth attributes. Stage 3 fine-tunes head and net jointly with
    L3D + lambda_attr * Lattr + lambda_domain * Ldomain.
    """
    stage = cfg.stage if cfg.stage in (2, 3) else 2
    cfg = cfg.for_stage(stage)
    if stage == 2:
        return _train_stage2(net, head, ds, cfg, progress)
    if head is None:
        raise ConfigError("stage 3 fine-tuning needs a trained multi-task head")
    return _train_stage3(net, head, ds, wild, cfg, progress)


def predict_batch(
    net: PoseNet,
    head: Optional[MultiTaskHead],
    coords: np.ndarray,
    attr_probs: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    N x 32 normalized coordinates -> (N x 16 x 3 root-relative mm, N x 9 x 3 probabilities).

    attr_probs overrides the head's predictions (oracle attributes).
    """
    coords = np.asarray(coords, dtype=np.float64)
    probs = attr_probs
    if probs is None and head is not None:
        probs = head.attr_probs(coords)
    if net.use_attributes and probs is None:
        raise ConfigError(f"{net.kind} net reads attributes; supply a head or oracle attributes")
    x = Tensor(evidence_matrix(coords, probs if net.use_attributes else None))
    return outputs_to_poses(net.final(x).data), probs


def predict(
    net: PoseNet,
    head: Optional[MultiTaskHead],
    p2d: Pose2D,
    attr_probs: Optional[np.ndarray] = None,
) -> Tuple[Pose3D, Optional[np.ndarray]]:
    """Block II prediction for one 2D pose, with the attribute probabilities used."""
    probs = None if attr_probs is None else np.asarray(attr_probs, dtype=np.float64)
    if probs is None and head is not None:
        probs = head.attr_probs(p2d.normalized()[None])[0]
    if net.use_attributes and probs is None:
        raise ConfigError(f"{net.kind} net reads attributes; supply a head or oracle attributes")
    evidence = encode_evidence(p2d, probs if net.use_attributes else None)
    _, block2 = net.forward(Tensor(evidence.values[None]))
    return assemble_pose(*(MM_PER_UNIT * group.data for group in block2)), probs


def attribute_predictions(head: MultiTaskHead, ds: Dataset) -> Tuple[np.ndarray, np.ndarray]:
    """(N x 9 predicted class indices, N x 9 x 3 probabilities)."""
    coords = normalized_coords([r.pose2d for r in ds])
    probs = np.concatenate([head.attr_probs(coords[k:k + PREDICT_CHUNK]) for k in range(0, len(coords), PREDICT_CHUNK)]) \
        if len(coords) else np.zeros((0, NUM_ATTR_JOINTS, NUM_ATTR_CLASSES))
    return probs.argmax(axis=2), probs


def domain_accuracy(head: MultiTaskHead, dsA: Dataset, dsB: Dataset) -> float:
    """Fraction of records whose domain the head's classifier gets right."""
    correct = 0
    total = 0
    for ds, target in ((dsA, LAB_DOMAIN), (dsB, WILD_DOMAIN)):
        coords = normalized_coords([r.pose2d for r in ds])
        for k in range(0, len(coords), PREDICT_CHUNK):
            probs = head.domain_probs(coords[k:k + PREDICT_CHUNK])
            correct += int((probs.argmax(axis=1) == target).sum())
            total += len(probs)
    if total == 0:
        raise ConfigError("domain accuracy needs at least one record")
    return correct / total


def history_rows(history: Sequence[EpochRecord]) -> List[Dict[str, object]]:
    return [record.model_dump() for record in history]
