# poselift/services/geometry.py
"""
Torso-plane fitting, pose attributes and rigid alignment.
"""
import logging
from dataclasses import dataclass, replace
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np

from poselift.core.errors import ConfigError, DegeneracyError
from poselift.models.schemas import NUM_ATTR_CLASSES, NUM_ATTR_JOINTS, Attribute, JointId, TauMode
from poselift.services.skeleton import ATTRIBUTE_JOINTS, CANONICAL_SPINE_MM, PLANE_ANCHORS, Dataset, Pose3D

logger = logging.getLogger(__name__)

# Relative gap below which the two smallest anchor variances count as equal.
DEGENERACY_RTOL = 1e-9


@dataclass(frozen=True, eq=False)
class Plane:
    """{x : normal . x + offset = 0}; offset in mm."""
    normal: np.ndarray
    offset: float

    def __post_init__(self):
        normal = np.array(self.normal, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(normal) - 1.0) > 1e-12:
            raise DegeneracyError(f"plane normal must have unit length, got {np.linalg.norm(normal):.15g}")
        normal.setflags(write=False)
        object.__setattr__(self, "normal", normal)
        object.__setattr__(self, "offset", float(self.offset))

    def __eq__(self, other) -> bool:
        return isinstance(other, Plane) and np.array_equal(self.normal, other.normal) and self.offset == other.offset

    __hash__ = None

    def flipped(self) -> "Plane":
        return Plane(-self.normal, -self.offset)


@dataclass(frozen=True)
class AttributeVector:
    """Nine attribute labels in ATTRIBUTE_JOINTS order."""
    labels: Tuple[Attribute, ...]

    def __post_init__(self):
        labels = tuple(Attribute(label) for label in self.labels)
        if len(labels) != NUM_ATTR_JOINTS:
            raise ConfigError(f"expected {NUM_ATTR_JOINTS} attribute labels, got {len(labels)}")
        object.__setattr__(self, "labels", labels)

    def __getitem__(self, i: int) -> Attribute:
        return self.labels[i]

    def __len__(self) -> int:
        return len(self.labels)

    def tokens(self) -> List[str]:
        return [label.token for label in self.labels]

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "AttributeVector":
        return cls(tuple(Attribute.from_token(t) for t in tokens))

    def indices(self) -> np.ndarray:
        return np.array([int(label) for label in self.labels], dtype=np.int64)

    def one_hot(self) -> np.ndarray:
        """9x3 probability table with all mass on the labelled class."""
        probs = np.zeros((NUM_ATTR_JOINTS, NUM_ATTR_CLASSES))
        probs[np.arange(NUM_ATTR_JOINTS), self.indices()] = 1.0
        return probs


def orient_plane(pl: Plane, p: Pose3D) -> Plane:
    """
    Flip the plane so its normal points to the subject's front.

    Front is the direction of (l-hip - r-hip) x (thorax - pelvis).

    Raises:
        DegeneracyError: If the hip and spine axes are parallel
    """
    hip_axis = p[JointId.L_HIP] - p[JointId.R_HIP]
    spine_axis = p[JointId.THORAX] - p[JointId.PELVIS]
    front = np.cross(hip_axis, spine_axis)
    if np.linalg.norm(front) <= 1e-12 * np.linalg.norm(hip_axis) * np.linalg.norm(spine_axis):
        raise DegeneracyError("hip axis and spine axis are parallel; front side undefined")
    if float(pl.normal @ front) < 0:
        return pl.flipped()
    return pl


def fit_torso_plane(p: Pose3D) -> Plane:
    """
    Orthogonal distance regression of the torso plane.

    The plane through the centroid of the five anchors (shoulders, hips,
    pelvis) whose normal is the direction of least variance; this minimises
    the sum of squared point-plane distances. The result is oriented to the
    front by orient_plane.

    Raises:
        DegeneracyError: If the anchors do not determine a unique plane
    """
    anchors = p.coords[[int(j) for j in PLANE_ANCHORS]]
    centroid = anchors.mean(axis=0)
    _, singular, vt = np.linalg.svd(anchors - centroid)
    variances = singular ** 2
    if variances[1] - variances[2] <= DEGENERACY_RTOL * variances[0]:
        raise DegeneracyError("torso anchors are collinear; plane is not unique")
    normal = vt[2] / np.linalg.norm(vt[2])
    return orient_plane(Plane(normal, -float(normal @ centroid)), p)


def plane_residual(pl: Plane, points: np.ndarray) -> float:
    """Sum of squared orthogonal distances."""
    return float(((points @ pl.normal + pl.offset) ** 2).sum())


def signed_distance(pl: Plane, x: np.ndarray) -> float:
    """Distance to the plane in mm, positive on the front side."""
    return float(pl.normal @ np.asarray(x, dtype=np.float64) + pl.offset)


def resolve_tau(p: Pose3D, tau_mm: float, mode: TauMode = "relative") -> float:
    """
    Absolute attribute threshold for one pose.

    Relative mode scales tau_mm by the pose's pelvis-to-thorax length over the
    canonical 500 mm, so the default 50 mm means 0.1 x spine length.
    """
    if not tau_mm > 0:
        raise ConfigError(f"tau must be positive, got {tau_mm}")
    if mode == "absolute":
        return float(tau_mm)
    if mode != "relative":
        raise ConfigError(f"unknown tau mode {mode!r}; expected 'relative' or 'absolute'")
    spine = float(np.linalg.norm(p[JointId.THORAX] - p[JointId.PELVIS]))
    return float(tau_mm) * spine / CANONICAL_SPINE_MM


def attribute_distances(p: Pose3D) -> np.ndarray:
    """Signed distances of the nine attribute joints to the oriented torso plane."""
    plane = fit_torso_plane(p)
    return np.array([signed_distance(plane, p[j]) for j in ATTRIBUTE_JOINTS])


def compute_attributes(p: Pose3D, tau: float) -> AttributeVector:
    """
    Label each attribute joint Front, OnPlane or Back.

    |d| <= tau is OnPlane (inclusive boundary); d > tau Front; d < -tau Back.
    """
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    labels = []
    for d in attribute_distances(p):
        if d > tau:
            labels.append(Attribute.FRONT)
        elif d < -tau:
            labels.append(Attribute.BACK)
        else:
            labels.append(Attribute.ON_PLANE)
    return AttributeVector(tuple(labels))


class RigidTransform(NamedTuple):
    rotation: np.ndarray
    scale: float
    translation: np.ndarray

    def apply(self, coords: np.ndarray) -> np.ndarray:
        return self.scale * coords @ self.rotation.T + self.translation


def procrustes_transform(source: np.ndarray, target: np.ndarray, with_scale: bool = False) -> RigidTransform:
    """
    Closed-form orthogonal Procrustes with reflection correction.

    Raises:
        DegeneracyError: If the cross-covariance has rank below 2
    """
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    s0 = source - mu_s
    t0 = target - mu_t
    u, singular, vt = np.linalg.svd(s0.T @ t0)
    if singular[0] <= 0 or singular[1] <= 1e-12 * singular[0]:
        raise DegeneracyError("cross-covariance is rank deficient; alignment is not unique")
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    correction = np.diag([1.0, 1.0, d])
    rotation = vt.T @ correction @ u.T
    scale = float((singular * np.diag(correction)).sum() / (s0 ** 2).sum()) if with_scale else 1.0
    translation = mu_t - scale * rotation @ mu_s
    return RigidTransform(rotation, scale, translation)


def procrustes_align(pred: Pose3D, gt: Pose3D, with_scale: bool = False) -> Pose3D:
    """Rigidly (optionally with scale) align pred onto gt."""
    transform = procrustes_transform(pred.coords, gt.coords, with_scale=with_scale)
    return Pose3D(transform.apply(pred.coords))


def root_relative(p: Pose3D) -> Pose3D:
    """Express the pose relative to the pelvis."""
    return Pose3D(p.coords - p.coords[JointId.PELVIS])


def label_dataset(ds: Dataset, tau_mm: float, tau_mode: TauMode = "relative") -> Tuple[Dataset, List[str]]:
    """
    Attach attributes to every record with a pose3d.

    Records whose torso plane is degenerate are dropped and their ids returned.
    """
    records = []
    skipped = []
    for record in ds:
        if record.pose3d is None:
            records.append(record)
            continue
        try:
            labels = compute_attributes(record.pose3d, resolve_tau(record.pose3d, tau_mm, tau_mode))
        except DegeneracyError as e:
            logger.warning(f"Skipping record {record.id}: {e}")
            skipped.append(record.id)
            continue
        records.append(replace(record, attributes=labels))
    return ds.with_records(records, tau_mm=tau_mm, tau_mode=tau_mode), skipped


def attribute_mismatches(ds: Dataset) -> List[str]:
    """Ids of records whose stored attributes disagree with their pose3d under the dataset threshold."""
    return [
        r.id for r in ds
        if r.attributes is not None and r.pose3d is not None
        and compute_attributes(r.pose3d, resolve_tau(r.pose3d, ds.meta.tau_mm, ds.meta.tau_mode)) != r.attributes
    ]
