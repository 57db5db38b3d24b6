# poselift/models/schemas.py
from enum import Enum, IntEnum
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

from poselift.core.config import (
    AUC_STEP_MM,
    DATASET_FORMAT_VERSION,
    DEFAULT_FOCAL_PX,
    DEFAULT_IMAGE_SIZE,
    DEFAULT_TAU_MM,
    PCK_THRESHOLD_MM,
)

NUM_JOINTS = 16
NUM_ATTR_JOINTS = 9
NUM_ATTR_CLASSES = 3


class JointId(IntEnum):
    """16-joint MPII order. The index order is part of the on-disk contract."""
    R_ANKLE = 0
    R_KNEE = 1
    R_HIP = 2
    L_HIP = 3
    L_KNEE = 4
    L_ANKLE = 5
    PELVIS = 6
    THORAX = 7
    NECK = 8
    HEAD = 9
    R_WRIST = 10
    R_ELBOW = 11
    R_SHOULDER = 12
    L_SHOULDER = 13
    L_ELBOW = 14
    L_WRIST = 15


class JointGroup(str, Enum):
    TORSO = "torso"
    PROXIMAL = "proximal"
    DISTAL = "distal"


class Domain(str, Enum):
    LABELED_3D = "3d"
    LABELED_2D = "2d"


class Attribute(IntEnum):
    """Side of the torso plane. Values are the classifier's class indices."""
    BACK = 0
    ON_PLANE = 1
    FRONT = 2

    @property
    def token(self) -> str:
        return _ATTRIBUTE_TOKENS[self]

    @classmethod
    def from_token(cls, token: str) -> "Attribute":
        for attr, tok in _ATTRIBUTE_TOKENS.items():
            if tok == token:
                return attr
        raise ValueError(f"unknown attribute token {token!r}")


_ATTRIBUTE_TOKENS = {Attribute.BACK: "B", Attribute.ON_PLANE: "O", Attribute.FRONT: "F"}

TauMode = Literal["relative", "absolute"]
Range = Tuple[float, float]


def _check_range(value: Range) -> Range:
    if value[0] > value[1]:
        raise ValueError(f"range lower bound {value[0]} exceeds upper bound {value[1]}")
    return value


class AngleRanges(BaseModel):
    """Uniform sampling ranges for the articulation angles, in degrees."""
    spine_lean: Range = Field((-10.0, 40.0), description="Forward bend of the upper body")
    spine_twist: Range = Field((-25.0, 25.0), description="Upper body rotation about the spine")
    head_pitch: Range = Field((-45.0, 45.0), description="Head nod, forward positive")
    shoulder_flex: Range = Field((-45.0, 150.0), description="Arm swing, forward positive")
    shoulder_abduct: Range = Field((0.0, 90.0), description="Arm raise away from the body")
    elbow_flex: Range = Field((0.0, 140.0))
    hip_flex: Range = Field((-25.0, 110.0), description="Leg swing, forward positive")
    hip_abduct: Range = Field((0.0, 40.0))
    knee_flex: Range = Field((0.0, 130.0))

    model_config = {"frozen": True}

    @field_validator("*")
    @classmethod
    def ordered(cls, value: Range) -> Range:
        return _check_range(value)

    @classmethod
    def zero(cls) -> "AngleRanges":
        """Every articulation pinned at the rest pose."""
        return cls(**{name: (0.0, 0.0) for name in cls.model_fields})


class GeneratorConfig(BaseModel):
    """Synthetic skeleton generator settings."""
    n: int = Field(1000, ge=1, description="Number of records to generate")
    name: str = Field("synthetic", min_length=1)
    domain: Domain = Field(Domain.LABELED_3D, description="Domain of the emitted records")
    scale_range: Range = Field((0.85, 1.15), description="Subject scale, multiplies canonical bone lengths")
    angles: AngleRanges = Field(default_factory=AngleRanges)
    yaw_range_deg: Range = Field((-180.0, 180.0))
    tilt_range_deg: Range = Field((-10.0, 10.0))
    depth_range_mm: Range = Field((4500.0, 5500.0), description="Pelvis distance from the camera")
    center_mm: Tuple[float, float] = Field((0.0, 0.0), description="Mean lateral/vertical pelvis offset")
    offset_range_mm: float = Field(250.0, ge=0, description="Lateral/vertical pelvis offset bound")
    image_width: int = Field(DEFAULT_IMAGE_SIZE, ge=16)
    image_height: int = Field(DEFAULT_IMAGE_SIZE, ge=16)
    focal_px: float = Field(DEFAULT_FOCAL_PX, gt=0)
    noise_px: float = Field(1.0, ge=0, description="Gaussian 2D detection noise")
    tau_mm: float = Field(DEFAULT_TAU_MM, description="Attribute threshold (nominal mm)")
    tau_mode: TauMode = "relative"

    model_config = {"frozen": True}


class SplitConfig(BaseModel):
    train: float = Field(0.7, ge=0)
    val: float = Field(0.1, ge=0)
    test: float = Field(0.2, ge=0)


class DatasetMeta(BaseModel):
    name: str
    seed: int
    tau_mm: float
    tau_mode: TauMode = "relative"

    model_config = {"frozen": True}


class DatasetHeader(BaseModel):
    """First line of a dataset file."""
    format_version: int = DATASET_FORMAT_VERSION
    name: str
    seed: int
    tau_mm: float
    tau_mode: TauMode = "relative"


class DatasetRow(BaseModel):
    """One record line of a dataset file."""
    id: str = Field(..., min_length=1)
    domain: Domain
    image_w: int = Field(..., ge=1)
    image_h: int = Field(..., ge=1)
    pose2d: List[float]
    pose3d: Optional[List[float]] = None
    attributes: Optional[List[str]] = None
    subject_scale: float = Field(..., gt=0)

    @field_validator("pose2d")
    @classmethod
    def pose2d_size(cls, value: List[float]) -> List[float]:
        if len(value) != 2 * NUM_JOINTS:
            raise ValueError(f"expected {NUM_JOINTS} joints, got {len(value) / 2:g}")
        return value

    @field_validator("pose3d")
    @classmethod
    def pose3d_size(cls, value: Optional[List[float]]) -> Optional[List[float]]:
        if value is not None and len(value) != 3 * NUM_JOINTS:
            raise ValueError(f"expected {NUM_JOINTS} joints, got {len(value) / 3:g}")
        return value

    @field_validator("attributes")
    @classmethod
    def attribute_tokens(cls, value: Optional[List[str]]) -> Optional[List[str]]:
        if value is None:
            return value
        if len(value) != NUM_ATTR_JOINTS:
            raise ValueError(f"expected {NUM_ATTR_JOINTS} attribute labels, got {len(value)}")
        for token in value:
            Attribute.from_token(token)
        return value

    @model_validator(mode="after")
    def labeled_3d_has_pose(self) -> "DatasetRow":
        if self.domain == Domain.LABELED_3D and self.pose3d is None:
            raise ValueError("Labeled3D record is missing pose3d")
        return self


StageName = Literal[1, 2, 3]

# Per-stage learning rate and batch size; epochs sized for a desk run.
STAGE_DEFAULTS: Dict[int, Dict[str, float]] = {
    1: {"epochs": 20, "lr": 5e-4, "batch_size": 12},
    2: {"epochs": 30, "lr": 2.5e-4, "batch_size": 64},
    3: {"epochs": 10, "lr": 1e-4, "batch_size": 64},
}


class TrainConfig(BaseModel):
    """Training document. Unset epochs/lr/batch_size take the stage defaults."""
    stage: int = Field(2, ge=1, le=3)
    epochs: Optional[int] = Field(None, ge=1)
    lr: Optional[float] = Field(None, gt=0)
    batch_size: Optional[int] = Field(None, ge=2)
    lambda_grl: float = Field(1.0, gt=0, description="Gradient reversal strength")
    lambda_attr: float = Field(1.0, ge=0, description="Stage-3 weight of the attribute loss")
    lambda_domain: float = Field(0.1, ge=0, description="Stage-3 weight of the domain loss")
    width: int = Field(256, ge=1)
    depth: int = Field(2, ge=0)
    head_width: int = Field(128, ge=1)
    seed: int = Field(0, ge=0)
    tau_mode: TauMode = "relative"
    beta_softargmax: float = Field(1.0, gt=0)
    model: Literal["progressive", "baseline"] = "progressive"
    use_attributes: bool = True
    attr_strategy: Literal["3d_only", "mixed", "mixed_da"] = "mixed_da"
    scale_jitter: float = Field(0.2, ge=0, lt=1, description="Random 2D zoom, 1 +/- jitter")
    heatmap_size: int = Field(0, ge=0, description="Soft-argmax heatmap grid; 0 disables")
    heatmap_sigma: float = Field(1.5, gt=0)
    rms_alpha: float = Field(0.99, gt=0, lt=1)
    rms_eps: float = Field(1e-8, gt=0)
    lr_decay: float = Field(
        0.05, gt=0, le=1, description="Final learning rate as a fraction of lr, reached by per-epoch exponential decay"
    )

    def for_stage(self, stage: Optional[int] = None) -> "TrainConfig":
        stage = stage or self.stage
        defaults = STAGE_DEFAULTS[stage]
        return self.model_copy(update={
            "stage": stage,
            "epochs": self.epochs or int(defaults["epochs"]),
            "lr": self.lr or defaults["lr"],
            "batch_size": self.batch_size or int(defaults["batch_size"]),
        })

    def epoch_lr(self, epoch: int) -> float:
        """Learning rate of one epoch: lr on the first, lr * lr_decay on the last."""
        if not self.epochs or self.epochs == 1:
            return self.lr
        return self.lr * self.lr_decay ** (epoch / (self.epochs - 1))


class RunConfig(BaseModel):
    """Fully resolved command configuration, written beside every output."""
    command: str
    seed: int = 0
    out: str
    params: Dict[str, object] = Field(default_factory=dict)


class EpochRecord(BaseModel):
    """One row of a training history."""
    stage: int
    epoch: int
    lr: Optional[float] = None
    loss: float
    loss_3d: Optional[float] = None
    loss_attr: Optional[float] = None
    loss_domain: Optional[float] = None
    attr_acc: Optional[float] = None
    domain_acc: Optional[float] = None


class ManifestEntry(BaseModel):
    file: str
    domain: Domain
    records: int
    seed: int


class Manifest(BaseModel):
    name: str
    seed: int
    tau_mm: float
    tau_mode: TauMode
    files: List[ManifestEntry]


class EvalReport(BaseModel):
    """Evaluation results for one model on one dataset."""
    method: str = "progressive"
    sample_count: int = Field(..., ge=0)
    per_joint_mpjpe_mm: List[float] = Field(..., min_length=16, max_length=16)
    mpjpe_p1_mm: float = Field(..., ge=0)
    mpjpe_p2_mm: float = Field(..., ge=0)
    pck_threshold_mm: float = PCK_THRESHOLD_MM
    pck3d: float = Field(..., ge=0, le=1)
    auc_step_mm: float = AUC_STEP_MM
    auc: float = Field(..., ge=0, le=1)
    per_joint_attr_acc: Optional[List[float]] = None
    attr_acc_mean: Optional[float] = Field(None, ge=0, le=1)
    domain_acc: Optional[float] = Field(None, ge=0, le=1)
