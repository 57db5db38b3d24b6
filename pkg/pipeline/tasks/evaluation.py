# pipeline/tasks/evaluation.py
"""
Sharded evaluation of a trained 3D network.

Records are cut into fixed-size shards independent of the worker count,
predicted concurrently, concatenated back in sample order and reduced once,
so any POSELIFT_THREADS setting gives the same numbers bit for bit.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from pipeline.regressors.evidence import normalized_coords
from pipeline.regressors.multitask import MultiTaskHead
from pipeline.regressors.store import PoseNet
from pipeline.tasks.training import attribute_labels, domain_accuracy, one_hot, predict_batch
from poselift.core.config import POSELIFT_THREADS
from poselift.core.errors import ConfigError, DatasetFormatError
from poselift.models.schemas import EvalReport
from poselift.services.metrics import auc_thresholds, build_report, pck_curve, per_joint_errors, procrustes_errors
from poselift.services.skeleton import Dataset

logger = logging.getLogger(__name__)

SHARD_SIZE = 256


@dataclass(frozen=True)
class ShardResult:
    errors: np.ndarray
    p2_errors: np.ndarray
    attr_pred: Optional[np.ndarray]


@dataclass(frozen=True)
class Evaluation:
    report: EvalReport
    errors: np.ndarray
    thresholds: np.ndarray
    curve: np.ndarray


def _evaluate_shard(net, head, coords, gts, oracle) -> ShardResult:
    poses, probs = predict_batch(net, head, coords, oracle)
    attr_pred = None if probs is None or oracle is not None else probs.argmax(axis=2)
    return ShardResult(per_joint_errors(poses, gts), procrustes_errors(poses, gts), attr_pred)


def evaluate(
    net: PoseNet,
    head: Optional[MultiTaskHead],
    ds: Dataset,
    method: Optional[str] = None,
    oracle_attrs: bool = False,
    wild: Optional[Dataset] = None,
    threads: int = POSELIFT_THREADS,
) -> Evaluation:
    """
    Evaluate net (and head) on a Labeled3D dataset.

    Raises:
        DatasetFormatError: If a record lacks pose3d
        ConfigError: If the dataset is empty or the attributes cannot be supplied
    """
    if len(ds) == 0:
        raise ConfigError(f"dataset {ds.meta.name} is empty")
    missing = [r.id for r in ds if r.pose3d is None]
    if missing:
        raise DatasetFormatError(f"evaluation needs pose3d; {len(missing)} record(s) lack it, first {missing[0]!r}")

    coords = normalized_coords([r.pose2d for r in ds])
    gts = np.stack([r.pose3d.coords for r in ds])
    gt_labels = attribute_labels(ds) if head is not None or oracle_attrs else None
    oracle = one_hot(gt_labels) if oracle_attrs else None

    shards = [slice(k, min(k + SHARD_SIZE, len(ds))) for k in range(0, len(ds), SHARD_SIZE)]
    workers = max(1, min(int(threads), len(shards)))
    logger.info(f"Evaluating {len(ds)} records in {len(shards)} shard(s) on {workers} thread(s)")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(
            lambda s: _evaluate_shard(net, head, coords[s], gts[s], None if oracle is None else oracle[s]),
            shards,
        ))

    errors = np.concatenate([r.errors for r in results])
    p2_errors = np.concatenate([r.p2_errors for r in results])
    attr_pred = None
    if head is not None and not oracle_attrs:
        attr_pred = np.concatenate([r.attr_pred for r in results])
    dom_acc = domain_accuracy(head, ds, wild) if head is not None and wild is not None else None

    label = method or (f"{net.kind}+attr" if net.use_attributes else net.kind)
    report = build_report(
        errors,
        p2_errors,
        method=label,
        attr_pred=attr_pred,
        attr_gt=gt_labels if attr_pred is not None else None,
        domain_acc=dom_acc,
    )
    thresholds = np.concatenate([[0.0], auc_thresholds()])
    logger.info(f"{label}: MPJPE {report.mpjpe_p1_mm:.2f} mm, P2 {report.mpjpe_p2_mm:.2f} mm, PCK {report.pck3d:.3f}")
    return Evaluation(report, errors, thresholds, pck_curve(errors, thresholds))


def evaluate_ablation(
    models: Dict[str, Tuple[PoseNet, Optional[MultiTaskHead]]],
    ds: Dataset,
    oracle_attrs: bool = False,
    threads: int = POSELIFT_THREADS,
) -> Dict[str, EvalReport]:
    """Evaluate each named (net, head) pair on the same dataset."""
    return {
        method: evaluate(net, head, ds, method=method, oracle_attrs=oracle_attrs and net.use_attributes,
                         threads=threads).report
        for method, (net, head) in models.items()
    }
