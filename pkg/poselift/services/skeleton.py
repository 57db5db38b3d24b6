# poselift/services/skeleton.py
"""
Joint taxonomy, pose containers, sample records, dataset statistics and
batch sampling.
"""
import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from poselift.core.errors import ConfigError, DatasetFormatError, PoseError
from poselift.models.schemas import NUM_JOINTS, DatasetMeta, Domain, JointGroup, JointId, SplitConfig

if TYPE_CHECKING:
    from poselift.services.geometry import AttributeVector

logger = logging.getLogger(__name__)

GROUP_MEMBERS: Dict[JointGroup, Tuple[JointId, ...]] = {
    JointGroup.TORSO: (
        JointId.R_HIP, JointId.L_HIP, JointId.PELVIS, JointId.THORAX,
        JointId.NECK, JointId.R_SHOULDER, JointId.L_SHOULDER,
    ),
    JointGroup.PROXIMAL: (
        JointId.R_KNEE, JointId.L_KNEE, JointId.HEAD, JointId.R_ELBOW, JointId.L_ELBOW,
    ),
    JointGroup.DISTAL: (
        JointId.R_ANKLE, JointId.L_ANKLE, JointId.R_WRIST, JointId.L_WRIST,
    ),
}

# Regression order, lowest DOF first.
GROUP_ORDER: Tuple[JointGroup, ...] = (JointGroup.TORSO, JointGroup.PROXIMAL, JointGroup.DISTAL)

_GROUP_OF: Dict[JointId, JointGroup] = {
    joint: group for group, members in GROUP_MEMBERS.items() for joint in members
}

# Limb joints carrying a pose attribute, in label order.
ATTRIBUTE_JOINTS: Tuple[JointId, ...] = (
    JointId.L_SHOULDER, JointId.L_ELBOW, JointId.R_SHOULDER, JointId.R_ELBOW,
    JointId.L_KNEE, JointId.L_ANKLE, JointId.R_KNEE, JointId.R_ANKLE, JointId.HEAD,
)

# Torso-plane anchors.
PLANE_ANCHORS: Tuple[JointId, ...] = (
    JointId.L_SHOULDER, JointId.R_SHOULDER, JointId.L_HIP, JointId.R_HIP, JointId.PELVIS,
)

PARENTS: Dict[JointId, Optional[JointId]] = {
    JointId.R_ANKLE: JointId.R_KNEE,
    JointId.R_KNEE: JointId.R_HIP,
    JointId.R_HIP: JointId.PELVIS,
    JointId.L_HIP: JointId.PELVIS,
    JointId.L_KNEE: JointId.L_HIP,
    JointId.L_ANKLE: JointId.L_KNEE,
    JointId.PELVIS: None,
    JointId.THORAX: JointId.PELVIS,
    JointId.NECK: JointId.THORAX,
    JointId.HEAD: JointId.NECK,
    JointId.R_WRIST: JointId.R_ELBOW,
    JointId.R_ELBOW: JointId.R_SHOULDER,
    JointId.R_SHOULDER: JointId.THORAX,
    JointId.L_SHOULDER: JointId.THORAX,
    JointId.L_ELBOW: JointId.L_SHOULDER,
    JointId.L_WRIST: JointId.L_ELBOW,
}

# Canonical bone offsets from the parent joint, in mm. Body frame: x towards the
# subject's left, y up, z forward (the facing direction).
CANONICAL_OFFSETS: Dict[JointId, Tuple[float, float, float]] = {
    JointId.PELVIS: (0.0, 0.0, 0.0),
    JointId.R_HIP: (-100.0, 0.0, 0.0),
    JointId.L_HIP: (100.0, 0.0, 0.0),
    JointId.R_KNEE: (0.0, -450.0, 0.0),
    JointId.L_KNEE: (0.0, -450.0, 0.0),
    JointId.R_ANKLE: (0.0, -440.0, 0.0),
    JointId.L_ANKLE: (0.0, -440.0, 0.0),
    JointId.THORAX: (0.0, 500.0, 0.0),
    JointId.NECK: (0.0, 100.0, 0.0),
    JointId.HEAD: (0.0, 170.0, 0.0),
    JointId.R_SHOULDER: (-170.0, 0.0, 0.0),
    JointId.L_SHOULDER: (170.0, 0.0, 0.0),
    JointId.R_ELBOW: (0.0, -280.0, 0.0),
    JointId.L_ELBOW: (0.0, -280.0, 0.0),
    JointId.R_WRIST: (0.0, -250.0, 0.0),
    JointId.L_WRIST: (0.0, -250.0, 0.0),
}

CANONICAL_SPINE_MM = 500.0

# Symmetric joints folded together, as in the per-joint ablation table.
JOINT_FAMILIES: Dict[str, Tuple[JointId, ...]] = {
    "hip": (JointId.R_HIP, JointId.L_HIP),
    "pelvis": (JointId.PELVIS,),
    "thorax": (JointId.THORAX,),
    "neck": (JointId.NECK,),
    "shoulder": (JointId.R_SHOULDER, JointId.L_SHOULDER),
    "head": (JointId.HEAD,),
    "elbow": (JointId.R_ELBOW, JointId.L_ELBOW),
    "knee": (JointId.R_KNEE, JointId.L_KNEE),
    "wrist": (JointId.R_WRIST, JointId.L_WRIST),
    "ankle": (JointId.R_ANKLE, JointId.L_ANKLE),
}


def group_of(joint: JointId) -> JointGroup:
    """Return the DOF group of a joint."""
    return _GROUP_OF[JointId(joint)]


def joint_family_of(joint: JointId) -> str:
    joint = JointId(joint)
    for family, members in JOINT_FAMILIES.items():
        if joint in members:
            return family
    raise KeyError(joint)


def group_indices(group: JointGroup) -> List[int]:
    return [int(j) for j in GROUP_MEMBERS[group]]


def _frozen_array(values, shape: Tuple[int, ...], what: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.shape != shape:
        raise PoseError(f"{what}: expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise PoseError(f"{what}: coordinates must be finite")
    arr.setflags(write=False)
    return arr


def bone_lengths(coords: np.ndarray) -> Dict[JointId, float]:
    """Distance from each non-root joint to its parent."""
    return {
        joint: float(np.linalg.norm(coords[joint] - coords[parent]))
        for joint, parent in PARENTS.items()
        if parent is not None
    }


@dataclass(frozen=True, eq=False)
class Pose3D:
    """16x3 joint coordinates in mm, camera frame."""
    coords: np.ndarray

    def __post_init__(self):
        arr = _frozen_array(self.coords, (NUM_JOINTS, 3), "Pose3D")
        short = [j.name for j, length in bone_lengths(arr).items() if not length > 0]
        if short:
            raise PoseError(f"Pose3D: zero-length bones at {', '.join(short)}")
        object.__setattr__(self, "coords", arr)

    @classmethod
    def predicted(cls, coords) -> "Pose3D":
        """Network output: shape and finiteness are checked, bone lengths are not."""
        pose = object.__new__(cls)
        object.__setattr__(pose, "coords", _frozen_array(coords, (NUM_JOINTS, 3), "Pose3D"))
        return pose

    def __eq__(self, other) -> bool:
        return isinstance(other, Pose3D) and np.array_equal(self.coords, other.coords)

    __hash__ = None

    def __getitem__(self, joint: JointId) -> np.ndarray:
        return self.coords[int(joint)]

    def flat(self) -> List[float]:
        return [float(v) for v in self.coords.reshape(-1)]

    def transformed(self, rotation: np.ndarray, translation=(0.0, 0.0, 0.0), scale: float = 1.0) -> "Pose3D":
        return Pose3D(scale * self.coords @ np.asarray(rotation).T + np.asarray(translation))


@dataclass(frozen=True, eq=False)
class Pose2D:
    """16x2 joint coordinates in pixels plus the image size."""
    coords: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise PoseError(f"Pose2D: image size must be positive, got {self.width}x{self.height}")
        object.__setattr__(self, "coords", _frozen_array(self.coords, (NUM_JOINTS, 2), "Pose2D"))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Pose2D)
            and (self.width, self.height) == (other.width, other.height)
            and np.array_equal(self.coords, other.coords)
        )

    __hash__ = None

    @classmethod
    def from_joints(cls, joints: Sequence[Tuple[JointId, Sequence[float]]], width: int, height: int) -> "Pose2D":
        """
        Build from (joint, (x, y)) pairs, which must arrive in JointId order.

        Raises:
            PoseError: If the joints are missing, repeated or out of order
        """
        order = [JointId(j) for j, _ in joints]
        if order != list(JointId):
            raise PoseError(f"Pose2D: joints must be listed in JointId order, got {[j.name for j in order]}")
        return cls(np.array([xy for _, xy in joints], dtype=np.float64), width, height)

    @property
    def in_frame(self) -> bool:
        x, y = self.coords[:, 0], self.coords[:, 1]
        return bool(np.all((x >= 0) & (x <= self.width) & (y >= 0) & (y <= self.height)))

    def normalized(self) -> np.ndarray:
        """Coordinates mapped to [-1, 1] by image size, flattened x0, y0, x1, ..."""
        size = np.array([self.width, self.height], dtype=np.float64)
        return (self.coords / size * 2.0 - 1.0).reshape(-1)

    def flat(self) -> List[float]:
        return [float(v) for v in self.coords.reshape(-1)]


@dataclass(frozen=True)
class SampleRecord:
    id: str
    domain: Domain
    pose2d: Pose2D
    pose3d: Optional[Pose3D] = None
    attributes: Optional["AttributeVector"] = None
    subject_scale: float = 1.0

    def __post_init__(self):
        if self.domain == Domain.LABELED_3D and self.pose3d is None:
            raise PoseError(f"record {self.id}: Labeled3D record needs pose3d")
        if not self.subject_scale > 0:
            raise PoseError(f"record {self.id}: subject_scale must be positive")


@dataclass(frozen=True)
class Dataset:
    records: Tuple[SampleRecord, ...]
    meta: DatasetMeta

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if not self.meta.tau_mm > 0:
            raise ConfigError(f"dataset {self.meta.name}: tau_mm must be positive, got {self.meta.tau_mm}")
        seen = set()
        for record in self.records:
            if record.id in seen:
                raise DatasetFormatError(f"dataset {self.meta.name}: duplicate id {record.id!r}")
            seen.add(record.id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[SampleRecord]:
        return iter(self.records)

    def subset(self, indices: Sequence[int], name: Optional[str] = None) -> "Dataset":
        meta = self.meta if name is None else self.meta.model_copy(update={"name": name})
        return Dataset(tuple(self.records[i] for i in indices), meta)

    def with_records(self, records: Sequence[SampleRecord], **meta_updates) -> "Dataset":
        return Dataset(tuple(records), self.meta.model_copy(update=meta_updates))


class JointStd(NamedTuple):
    per_joint: np.ndarray
    mean: float


def joint_std(ds: Dataset) -> JointStd:
    """
    Per-joint spread of root-centred 3D locations.

    For each joint returns sqrt(trace(cov)) with the population (divide by N)
    convention, plus the mean over the 16 joints.

    Raises:
        DatasetFormatError: If any record lacks pose3d
    """
    if len(ds) == 0:
        raise ConfigError(f"dataset {ds.meta.name} is empty")
    missing = [r.id for r in ds if r.pose3d is None]
    if missing:
        raise DatasetFormatError(f"joint_std needs 3D poses; {len(missing)} record(s) lack pose3d, first {missing[0]!r}")
    poses = np.stack([r.pose3d.coords for r in ds])
    centred = poses - poses[:, JointId.PELVIS:JointId.PELVIS + 1, :]
    deviation = centred - centred.mean(axis=0, keepdims=True)
    per_joint = np.sqrt((deviation ** 2).sum(axis=2).mean(axis=0))
    return JointStd(per_joint=per_joint, mean=float(per_joint.mean()))


def split_dataset(ds: Dataset, split: SplitConfig) -> Tuple[Dataset, Dataset, Dataset]:
    """Deterministic contiguous train/val/test split."""
    total = split.train + split.val + split.test
    if total > 1.0 + 1e-12:
        raise ConfigError(f"split fractions sum to {total:g}; they must not exceed 1")
    n = len(ds)
    n_train = int(np.floor(n * split.train))
    n_val = int(np.floor(n * split.val))
    n_test = int(np.floor(n * split.test))
    name = ds.meta.name
    return (
        ds.subset(range(0, n_train), f"{name}-train"),
        ds.subset(range(n_train, n_train + n_val), f"{name}-val"),
        ds.subset(range(n_train + n_val, n_train + n_val + n_test), f"{name}-test"),
    )


class MixedBatch(NamedTuple):
    from_a: Tuple[SampleRecord, ...]
    from_b: Tuple[SampleRecord, ...]


def _check_batch_size(batch_size: int, even: bool) -> None:
    if batch_size < 1 or (even and batch_size % 2):
        kind = "a positive even" if even else "a positive"
        raise ConfigError(f"batch_size must be {kind} integer, got {batch_size}")


def mixed_epoch(dsA: Dataset, dsB: Dataset, batch_size: int, seed: int, epoch: int) -> List[MixedBatch]:
    """
    One epoch of half-and-half batches.

    Each dataset is reshuffled per epoch from (seed, epoch) and consumed without
    replacement; the epoch holds 2 * min(|A|, |B|) // batch_size batches.
    """
    _check_batch_size(batch_size, even=True)
    if len(dsA) == 0 or len(dsB) == 0:
        raise ConfigError("mixed batching needs two nonempty datasets")
    half = batch_size // 2
    n_batches = 2 * min(len(dsA), len(dsB)) // batch_size
    rng = np.random.default_rng([seed, epoch])
    order_a = rng.permutation(len(dsA))
    order_b = rng.permutation(len(dsB))
    return [
        MixedBatch(
            from_a=tuple(dsA.records[i] for i in order_a[k * half:(k + 1) * half]),
            from_b=tuple(dsB.records[i] for i in order_b[k * half:(k + 1) * half]),
        )
        for k in range(n_batches)
    ]


def mixed_batches(dsA: Dataset, dsB: Dataset, batch_size: int, seed: int, epochs: int = 1) -> Iterator[MixedBatch]:
    for epoch in range(epochs):
        yield from mixed_epoch(dsA, dsB, batch_size, seed, epoch)


def shuffled_batches(ds: Dataset, batch_size: int, seed: int, epoch: int) -> List[Tuple[SampleRecord, ...]]:
    """One epoch over a single dataset, reshuffled from (seed, epoch), last partial batch dropped."""
    _check_batch_size(batch_size, even=False)
    if len(ds) == 0:
        raise ConfigError(f"dataset {ds.meta.name} is empty")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(ds))
    n_batches = max(1, len(ds) // batch_size)
    return [tuple(ds.records[i] for i in order[k * batch_size:(k + 1) * batch_size]) for k in range(n_batches)]
