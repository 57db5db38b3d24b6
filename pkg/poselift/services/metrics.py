# poselift/services/metrics.py
"""
Pose accuracy measures and report export.

Every 3D measure reduces the N x 16 root-relative error matrix from
per_joint_errors, so per-shard matrices concatenated in sample order give
exactly the single-pass result.
"""
import csv
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from poselift.core.config import AUC_STEP_MM, PCK_THRESHOLD_MM
from poselift.core.errors import ConfigError, ShapeError
from poselift.models.schemas import NUM_ATTR_JOINTS, NUM_JOINTS, EvalReport, JointId
from poselift.services.geometry import procrustes_transform
from poselift.services.skeleton import ATTRIBUTE_JOINTS, JOINT_FAMILIES, Pose3D

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
PoseBatch = Union[np.ndarray, Sequence[Pose3D]]

ABLATION_METHODS = ("baseline", "progressive", "progressive+attr")


def auc_thresholds(step: float = AUC_STEP_MM, limit: float = PCK_THRESHOLD_MM) -> np.ndarray:
    """step, 2*step, ..., limit (30 points at the defaults)."""
    return np.arange(1, int(round(limit / step)) + 1) * step


def _as_batch(poses: PoseBatch) -> np.ndarray:
    if isinstance(poses, np.ndarray):
        arr = poses.astype(np.float64, copy=False)
    else:
        arr = np.stack([p.coords for p in poses]) if len(poses) else np.zeros((0, NUM_JOINTS, 3))
    if arr.ndim == 2:
        arr = arr[None]
    if arr.shape[1:] != (NUM_JOINTS, 3):
        raise ShapeError(f"expected N x {NUM_JOINTS} x 3 poses, got {arr.shape}")
    return arr


def _root_relative(arr: np.ndarray) -> np.ndarray:
    return arr - arr[:, JointId.PELVIS:JointId.PELVIS + 1, :]


def per_joint_errors(preds: PoseBatch, gts: PoseBatch) -> np.ndarray:
    """N x 16 Euclidean joint errors after root alignment, in mm."""
    p = _as_batch(preds)
    g = _as_batch(gts)
    if p.shape != g.shape:
        raise ShapeError(f"{len(p)} predictions for {len(g)} ground-truth poses")
    return np.linalg.norm(_root_relative(p) - _root_relative(g), axis=2)


def mpjpe_p1(pred: Pose3D, gt: Pose3D) -> Tuple[np.ndarray, float]:
    """Protocol #1: (per-joint errors, mean) after full root-relative alignment."""
    errors = per_joint_errors([pred], [gt])[0]
    return errors, float(errors.mean())


def mpjpe_p2(pred: Pose3D, gt: Pose3D, with_scale: bool = False) -> float:
    """Protocol #2: mean joint error after rigid Procrustes alignment of pred onto gt."""
    return float(procrustes_errors(pred.coords[None], gt.coords[None], with_scale)[0])


def procrustes_errors(preds: PoseBatch, gts: PoseBatch, with_scale: bool = False) -> np.ndarray:
    """Per-sample Protocol #2 mean errors."""
    p = _as_batch(preds)
    g = _as_batch(gts)
    if p.shape != g.shape:
        raise ShapeError(f"{len(p)} predictions for {len(g)} ground-truth poses")
    out = np.empty(len(p))
    for i in range(len(p)):
        aligned = procrustes_transform(p[i], g[i], with_scale=with_scale).apply(p[i])
        out[i] = np.linalg.norm(aligned - g[i], axis=1).mean()
    return out


def pck_from_errors(errors: np.ndarray, threshold: float = PCK_THRESHOLD_MM) -> float:
    """Fraction of joint errors strictly below threshold."""
    if not threshold > 0:
        raise ConfigError(f"PCK threshold must be positive, got {threshold}")
    errors = np.asarray(errors)
    if errors.size == 0:
        raise ShapeError("PCK of an empty error set")
    return float((errors < threshold).mean())


def pck3d(preds: PoseBatch, gts: PoseBatch, threshold: float = PCK_THRESHOLD_MM) -> float:
    return pck_from_errors(per_joint_errors(preds, gts), threshold)


def pck_curve(errors: np.ndarray, thresholds: Iterable[float]) -> np.ndarray:
    """PCK at each threshold; a zero threshold gives 0 under the strict comparison."""
    errors = np.asarray(errors)
    return np.array([float((errors < t).mean()) for t in thresholds])


def auc_from_errors(errors: np.ndarray, step: float = AUC_STEP_MM, limit: float = PCK_THRESHOLD_MM) -> float:
    return float(pck_curve(errors, auc_thresholds(step, limit)).mean())


def auc(preds: PoseBatch, gts: PoseBatch) -> float:
    """Mean PCK over thresholds 5, 10, ..., 150 mm."""
    return auc_from_errors(per_joint_errors(preds, gts))


def attribute_accuracy(pred_labels: np.ndarray, gt_labels: np.ndarray) -> Tuple[np.ndarray, float]:
    """
    Exact-match rate per attribute joint and the mean over the nine.

    Raises:
        ShapeError: If the label arrays differ in length or are not N x 9
    """
    pred = np.asarray([np.asarray(getattr(v, "labels", v), dtype=np.int64) for v in pred_labels])
    gt = np.asarray([np.asarray(getattr(v, "labels", v), dtype=np.int64) for v in gt_labels])
    if len(pred) != len(gt):
        raise ShapeError(f"{len(pred)} predicted label rows for {len(gt)} ground-truth rows")
    if len(gt) == 0:
        raise ShapeError("attribute accuracy of an empty label set")
    if pred.shape[1:] != (NUM_ATTR_JOINTS,) or gt.shape[1:] != (NUM_ATTR_JOINTS,):
        raise ShapeError(f"expected N x {NUM_ATTR_JOINTS} labels, got {pred.shape} and {gt.shape}")
    per_joint = (pred == gt).mean(axis=0)
    return per_joint, float(per_joint.mean())


def family_table(per_joint_mm: Sequence[float]) -> Dict[str, float]:
    """Fold 16 per-joint values into symmetric joint families."""
    values = np.asarray(per_joint_mm, dtype=np.float64)
    if values.shape != (NUM_JOINTS,):
        raise ShapeError(f"expected {NUM_JOINTS} per-joint values, got {values.shape}")
    return {family: float(values[[int(j) for j in joints]].mean()) for family, joints in JOINT_FAMILIES.items()}


def build_report(
    errors: np.ndarray,
    p2_errors: np.ndarray,
    method: str = "progressive",
    attr_pred: Optional[np.ndarray] = None,
    attr_gt: Optional[np.ndarray] = None,
    domain_acc: Optional[float] = None,
) -> EvalReport:
    """Reduce an N x 16 error matrix and per-sample Protocol #2 errors into a report."""
    errors = np.asarray(errors)
    per_joint_attr = None
    attr_mean = None
    if attr_pred is not None and attr_gt is not None:
        per_joint, attr_mean = attribute_accuracy(attr_pred, attr_gt)
        per_joint_attr = [float(v) for v in per_joint]
    return EvalReport(
        method=method,
        sample_count=len(errors),
        per_joint_mpjpe_mm=[float(v) for v in errors.mean(axis=0)],
        mpjpe_p1_mm=float(errors.mean()),
        mpjpe_p2_mm=float(np.mean(p2_errors)),
        pck_threshold_mm=PCK_THRESHOLD_MM,
        pck3d=pck_from_errors(errors, PCK_THRESHOLD_MM),
        auc_step_mm=AUC_STEP_MM,
        auc=auc_from_errors(errors),
        per_joint_attr_acc=per_joint_attr,
        attr_acc_mean=attr_mean,
        domain_acc=domain_acc,
    )


def _joint_name(j: JointId) -> str:
    return JointId(j).name.lower()


def write_report_csv(report: EvalReport, path: PathLike) -> None:
    """One row per joint, then summary rows: metric,joint,value."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric", "joint", "value"])
        for j, value in zip(JointId, report.per_joint_mpjpe_mm):
            writer.writerow(["mpjpe_p1_mm", _joint_name(j), repr(value)])
        if report.per_joint_attr_acc is not None:
            for j, value in zip(ATTRIBUTE_JOINTS, report.per_joint_attr_acc):
                writer.writerow(["attr_acc", _joint_name(j), repr(value)])
        summary = [
            ("sample_count", report.sample_count),
            ("mpjpe_p1_mm", report.mpjpe_p1_mm),
            ("mpjpe_p2_mm", report.mpjpe_p2_mm),
            (f"pck3d@{report.pck_threshold_mm:g}", report.pck3d),
            (f"auc@{report.auc_step_mm:g}", report.auc),
            ("attr_acc", report.attr_acc_mean),
            ("domain_acc", report.domain_acc),
        ]
        for name, value in summary:
            if value is not None:
                writer.writerow([name, "all", repr(value)])


def write_report_json(report: EvalReport, path: PathLike) -> None:
    Path(path).write_text(json.dumps(report.model_dump(), indent=2) + "\n", encoding="utf-8")


def write_pck_svg(thresholds: Sequence[float], values: Sequence[float], path: PathLike, title: str = "3DPCK") -> None:
    """Standalone SVG line plot of PCK against threshold."""
    width, height, margin = 480, 320, 48
    t_max = max(thresholds) or 1.0
    plot_w = width - 2 * margin
    plot_h = height - 2 * margin

    def xy(t: float, v: float) -> str:
        return f"{margin + plot_w * t / t_max:.2f},{height - margin - plot_h * v:.2f}"

    points = " ".join(xy(t, v) for t, v in zip(thresholds, values))
    ticks = []
    for k in range(6):
        t = t_max * k / 5
        x = margin + plot_w * k / 5
        ticks.append(f'<text x="{x:.2f}" y="{height - margin + 16}" font-size="11" text-anchor="middle">{t:g}</text>')
        v = k / 5
        y = height - margin - plot_h * v
        ticks.append(f'<text x="{margin - 6}" y="{y + 4:.2f}" font-size="11" text-anchor="end">{v:.1f}</text>')
    svg = "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{width / 2}" y="20" font-size="14" text-anchor="middle">{title}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        *ticks,
        f'<text x="{width / 2}" y="{height - 10}" font-size="12" text-anchor="middle">threshold (mm)</text>',
        f'<polyline fill="none" stroke="#1f77b4" stroke-width="2" points="{points}"/>',
        "</svg>",
    ])
    Path(path).write_text(svg + "\n", encoding="utf-8")


def write_ablation_csv(reports: Dict[str, EvalReport], path: PathLike) -> None:
    """
    Per-joint comparison table, one row per method, then the same rows
    folded into joint families.
    """
    missing = [m for m in ABLATION_METHODS if m not in reports]
    if missing:
        raise ConfigError(f"ablation table needs reports for {', '.join(missing)}")
    joints = [_joint_name(j) for j in JointId]
    families = list(JOINT_FAMILIES)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", *joints, "mean"])
        for method in ABLATION_METHODS:
            report = reports[method]
            writer.writerow([method, *(f"{v:.3f}" for v in report.per_joint_mpjpe_mm), f"{report.mpjpe_p1_mm:.3f}"])
        writer.writerow([])
        writer.writerow(["method", *families, "mean"])
        for method in ABLATION_METHODS:
            report = reports[method]
            folded = family_table(report.per_joint_mpjpe_mm)
            writer.writerow([method, *(f"{folded[f]:.3f}" for f in families), f"{report.mpjpe_p1_mm:.3f}"])

