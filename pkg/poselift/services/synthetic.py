# poselift/services/synthetic.py
"""
Synthetic skeleton dataset: forward kinematics on the canonical skeleton,
rigid placement in front of a pinhole camera, projection to pixels.
"""
import logging
from typing import Dict, Optional, Tuple

import numpy as np

from poselift.core.errors import ConfigError
from poselift.models.schemas import NUM_JOINTS, AngleRanges, DatasetMeta, Domain, GeneratorConfig, JointId
from poselift.services.geometry import compute_attributes, resolve_tau
from poselift.services.skeleton import CANONICAL_OFFSETS, Dataset, Pose2D, Pose3D, SampleRecord

logger = logging.getLogger(__name__)

MAX_PLACEMENT_ATTEMPTS = 50
MAX_POSE_ATTEMPTS = 20

# Wild domain: pelvis 30% of the half-width right of centre, 10% closer, a
# few degrees more articulation.
WILD_CENTER_FRACTION = 0.3
WILD_DEPTH_FACTOR = 0.9
WILD_ANGLE_EXTENSION_DEG = {"spine_lean": 5.0, "shoulder_flex": 10.0, "hip_flex": 10.0, "knee_flex": 5.0}

# Camera looks along +z with y down; a half turn about x maps the y-up body
# frame into it without a reflection.
WORLD_TO_CAMERA = np.diag([1.0, -1.0, -1.0])


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def validate_generator_config(cfg: GeneratorConfig) -> None:
    """
    Raises:
        ConfigError: If a range is empty or a value is out of bounds
    """
    lo, hi = cfg.scale_range
    if not 0 < lo <= hi:
        raise ConfigError(f"scale_range {cfg.scale_range} is empty or not strictly positive")
    d_lo, d_hi = cfg.depth_range_mm
    if not 0 < d_lo <= d_hi:
        raise ConfigError(f"depth_range_mm {cfg.depth_range_mm} is empty or not strictly positive")
    for name in ("yaw_range_deg", "tilt_range_deg"):
        r_lo, r_hi = getattr(cfg, name)
        if r_lo > r_hi:
            raise ConfigError(f"{name} {getattr(cfg, name)} is empty")
    if not cfg.tau_mm > 0:
        raise ConfigError(f"tau_mm must be positive, got {cfg.tau_mm}")


def _uniform(rng: np.random.Generator, bounds: Tuple[float, float]) -> float:
    return float(rng.uniform(bounds[0], bounds[1]))


def sample_angles(rng: np.random.Generator, ranges: AngleRanges) -> Dict[str, float]:
    """Articulation angles in radians; limbs are sampled independently per side."""
    draw = lambda name: np.deg2rad(_uniform(rng, getattr(ranges, name)))  # noqa: E731
    angles = {
        "spine_lean": draw("spine_lean"),
        "spine_twist": draw("spine_twist"),
        "head_pitch": draw("head_pitch"),
    }
    for side in ("l", "r"):
        for name in ("shoulder_flex", "shoulder_abduct", "elbow_flex", "hip_flex", "hip_abduct", "knee_flex"):
            angles[f"{side}_{name}"] = draw(name)
    return angles


def articulate(angles: Dict[str, float], scale: float) -> np.ndarray:
    """Body-frame joint positions (x left, y up, z forward) for one set of angles."""
    off = {j: scale * np.array(v) for j, v in CANONICAL_OFFSETS.items()}
    pos = np.zeros((NUM_JOINTS, 3))
    pos[JointId.R_HIP] = off[JointId.R_HIP]
    pos[JointId.L_HIP] = off[JointId.L_HIP]

    spine = rot_y(angles["spine_twist"]) @ rot_x(angles["spine_lean"])
    pos[JointId.THORAX] = spine @ off[JointId.THORAX]
    pos[JointId.NECK] = pos[JointId.THORAX] + spine @ off[JointId.NECK]
    pos[JointId.HEAD] = pos[JointId.NECK] + spine @ rot_x(angles["head_pitch"]) @ off[JointId.HEAD]

    limbs = (
        ("l", 1.0, JointId.L_SHOULDER, JointId.L_ELBOW, JointId.L_WRIST, JointId.L_HIP, JointId.L_KNEE, JointId.L_ANKLE),
        ("r", -1.0, JointId.R_SHOULDER, JointId.R_ELBOW, JointId.R_WRIST, JointId.R_HIP, JointId.R_KNEE, JointId.R_ANKLE),
    )
    for side, outward, shoulder, elbow, wrist, hip, knee, ankle in limbs:
        upper_arm = spine @ rot_z(outward * angles[f"{side}_shoulder_abduct"]) @ rot_x(-angles[f"{side}_shoulder_flex"])
        forearm = upper_arm @ rot_x(-angles[f"{side}_elbow_flex"])
        pos[shoulder] = pos[JointId.THORAX] + spine @ off[shoulder]
        pos[elbow] = pos[shoulder] + upper_arm @ off[elbow]
        pos[wrist] = pos[elbow] + forearm @ off[wrist]

        thigh = rot_z(outward * angles[f"{side}_hip_abduct"]) @ rot_x(-angles[f"{side}_hip_flex"])
        shin = thigh @ rot_x(angles[f"{side}_knee_flex"])
        pos[knee] = pos[hip] + thigh @ off[knee]
        pos[ankle] = pos[knee] + shin @ off[ankle]
    return pos


def canonical_pose(scale: float = 1.0) -> Pose3D:
    """Rest pose in the body frame, facing +z, arms at the sides."""
    return Pose3D(articulate(sample_angles(np.random.default_rng(0), AngleRanges.zero()), scale))


def project(coords_cam: np.ndarray, focal_px: float, width: int, height: int) -> np.ndarray:
    """Pinhole projection with the principal point at the image centre."""
    return focal_px * coords_cam[:, :2] / coords_cam[:, 2:3] + np.array([width / 2.0, height / 2.0])


def _in_frame(uv: np.ndarray, width: int, height: int) -> bool:
    return bool(np.all((uv[:, 0] >= 0) & (uv[:, 0] <= width) & (uv[:, 1] >= 0) & (uv[:, 1] <= height)))


def _place(rng: np.random.Generator, body: np.ndarray, cfg: GeneratorConfig):
    """Rigidly place a body-frame pose in the camera frame so it projects inside the image."""
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        rotation = WORLD_TO_CAMERA @ rot_x(np.deg2rad(_uniform(rng, cfg.tilt_range_deg))) @ rot_y(
            np.deg2rad(_uniform(rng, cfg.yaw_range_deg))
        )
        translation = np.array([
            cfg.center_mm[0] + rng.uniform(-cfg.offset_range_mm, cfg.offset_range_mm),
            cfg.center_mm[1] + rng.uniform(-cfg.offset_range_mm, cfg.offset_range_mm),
            _uniform(rng, cfg.depth_range_mm),
        ])
        cam = body @ rotation.T + translation
        if np.all(cam[:, 2] > 0):
            uv = project(cam, cfg.focal_px, cfg.image_width, cfg.image_height)
            if _in_frame(uv, cfg.image_width, cfg.image_height):
                return cam, uv
    return None


def synth_generate(cfg: GeneratorConfig, seed: int) -> Dataset:
    """
    Generate a synthetic dataset, a pure function of (cfg, seed).

    Labeled3D records carry pose3d and attributes; Labeled2D records keep the
    hidden pose3d for cross-domain evaluation but no attributes.

    Raises:
        ConfigError: If the configuration is invalid or subjects cannot be placed in frame
    """
    validate_generator_config(cfg)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(cfg.n):
        scale = _uniform(rng, cfg.scale_range)
        placed = None
        for _ in range(MAX_POSE_ATTEMPTS):
            body = articulate(sample_angles(rng, cfg.angles), scale)
            placed = _place(rng, body, cfg)
            if placed is not None:
                break
        if placed is None:
            raise ConfigError(
                f"could not place record {i} inside a {cfg.image_width}x{cfg.image_height} image; "
                "increase depth_range_mm or reduce offset_range_mm"
            )
        cam, uv = placed
        if cfg.noise_px > 0:
            uv = uv + rng.normal(0.0, cfg.noise_px, size=uv.shape)
            uv = np.clip(uv, 0.0, [cfg.image_width, cfg.image_height])

        pose3d = Pose3D(cam)
        attributes = None
        if cfg.domain == Domain.LABELED_3D:
            attributes = compute_attributes(pose3d, resolve_tau(pose3d, cfg.tau_mm, cfg.tau_mode))
        records.append(SampleRecord(
            id=f"{cfg.name}-{i:06d}",
            domain=cfg.domain,
            pose2d=Pose2D(uv, cfg.image_width, cfg.image_height),
            pose3d=pose3d,
            attributes=attributes,
            subject_scale=scale,
        ))

    logger.info(f"Generated {len(records)} {cfg.domain.value} records for {cfg.name} (seed={seed})")
    return Dataset(tuple(records), DatasetMeta(name=cfg.name, seed=seed, tau_mm=cfg.tau_mm, tau_mode=cfg.tau_mode))


def wild_generator_config(cfg: GeneratorConfig, n: Optional[int] = None) -> GeneratorConfig:
    """
    Domain-shifted Labeled2D counterpart of a lab generator config.

    Subjects stand off-centre and a little closer to the camera, reach
    slightly further and come with noisier detections.
    """
    depth_range = tuple(WILD_DEPTH_FACTOR * d for d in cfg.depth_range_mm)
    mid_depth = 0.5 * (depth_range[0] + depth_range[1])
    center_x = WILD_CENTER_FRACTION * (cfg.image_width / 2.0) * mid_depth / cfg.focal_px
    angles = cfg.angles.model_copy(update={
        name: (getattr(cfg.angles, name)[0], getattr(cfg.angles, name)[1] + extra)
        for name, extra in WILD_ANGLE_EXTENSION_DEG.items()
    })
    return cfg.model_copy(update={
        "n": n or cfg.n,
        "name": f"{cfg.name}-wild",
        "domain": Domain.LABELED_2D,
        "angles": angles,
        "depth_range_mm": depth_range,
        "center_mm": (center_x, cfg.center_mm[1]),
        "offset_range_mm": min(cfg.offset_range_mm, 100.0),
        "tilt_range_deg": (cfg.tilt_range_deg[0] - 5.0, cfg.tilt_range_deg[1] + 5.0),
        "noise_px": max(2.0 * cfg.noise_px, 2.0),
    })
