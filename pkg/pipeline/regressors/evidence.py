# pipeline/regressors/evidence.py
"""
Image evidence fed to the 3D regressors: normalized 2D joints followed by the
nine attribute probability triples.
"""
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from poselift.core.errors import PoseError, ShapeError
from poselift.models.schemas import NUM_ATTR_CLASSES, NUM_ATTR_JOINTS, NUM_JOINTS
from poselift.services.skeleton import Pose2D

COORD_DIM = 2 * NUM_JOINTS
ATTR_DIM = NUM_ATTR_JOINTS * NUM_ATTR_CLASSES
EVIDENCE_DIM = COORD_DIM + ATTR_DIM

DISTRIBUTION_TOL = 1e-9


def check_attr_probs(probs: np.ndarray) -> np.ndarray:
    """
    Validate attribute probabilities of shape (..., 9, 3).

    Raises:
        ShapeError: On a wrong shape
        PoseError: If a triple is not a probability distribution
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[-2:] != (NUM_ATTR_JOINTS, NUM_ATTR_CLASSES):
        raise ShapeError(f"attribute probabilities must end in (9, 3), got {probs.shape}")
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=-1) - 1.0) > DISTRIBUTION_TOL):
        raise PoseError("attribute probabilities: every triple must be nonnegative and sum to 1")
    return probs


@dataclass(frozen=True, eq=False)
class EvidenceVector:
    coords: np.ndarray
    attr_probs: Optional[np.ndarray] = None

    @property
    def values(self) -> np.ndarray:
        if self.attr_probs is None:
            return self.coords
        return np.concatenate([self.coords, self.attr_probs.reshape(-1)])

    def __len__(self) -> int:
        return self.values.size


def encode_evidence(p2d: Pose2D, attr_probs: Optional[np.ndarray] = None) -> EvidenceVector:
    """Concatenate normalized joint coordinates (x0, y0, x1, ...) and the 9x3 attribute table."""
    probs = None if attr_probs is None else check_attr_probs(attr_probs).copy()
    return EvidenceVector(p2d.normalized(), probs)


def normalized_coords(poses: Sequence[Pose2D]) -> np.ndarray:
    """N x 32 normalized coordinates."""
    return np.stack([p.normalized() for p in poses]) if poses else np.zeros((0, COORD_DIM))


def evidence_matrix(coords: np.ndarray, attr_probs: Optional[np.ndarray]) -> np.ndarray:
    """Batched evidence: N x 32 coordinates with optional N x 9 x 3 probabilities."""
    if attr_probs is None:
        return np.asarray(coords, dtype=np.float64)
    probs = check_attr_probs(attr_probs)
    return np.concatenate([coords, probs.reshape(len(probs), ATTR_DIM)], axis=1)


def jitter_coords(coords: np.ndarray, jitter: float, rng: np.random.Generator) -> np.ndarray:
    """Random zoom about the image centre by a per-sample factor in [1 - jitter, 1 + jitter]."""
    if jitter <= 0:
        return coords
    factors = rng.uniform(1.0 - jitter, 1.0 + jitter, size=(len(coords), 1))
    return coords * factors
