# pipeline/regressors/progressive.py
"""
Bi-directional progressive regression of the three joint groups, and the
independent-groups baseline.

Network outputs are root-relative coordinates in meters; poses cross the
module boundary in mm.
"""
import logging
from typing import Dict, Optional, Tuple

import numpy as np

from pipeline.regressors.evidence import COORD_DIM, EVIDENCE_DIM
from pipeline.regressors.residual import RegressorG
from poselift.autodiff.losses import l1_loss
from poselift.autodiff.ops import add, concat, gather_cols
from poselift.autodiff.optim import Params
from poselift.autodiff.tensor import Tensor
from poselift.core.errors import ConfigError, ShapeError
from poselift.models.schemas import NUM_JOINTS, JointGroup, JointId
from poselift.services.skeleton import GROUP_MEMBERS, GROUP_ORDER, Pose3D, group_indices

logger = logging.getLogger(__name__)

MM_PER_UNIT = 1000.0

GROUP_DIMS: Dict[JointGroup, int] = {g: 3 * len(GROUP_MEMBERS[g]) for g in GROUP_ORDER}
TORSO_DIM = GROUP_DIMS[JointGroup.TORSO]
PROXIMAL_DIM = GROUP_DIMS[JointGroup.PROXIMAL]
DISTAL_DIM = GROUP_DIMS[JointGroup.DISTAL]

Groups = Tuple[Tensor, Tensor, Tensor]


def _assembly_index() -> np.ndarray:
    """Column of concat(torso, proximal, distal, zero) feeding each of the 48 pose columns."""
    source = {}
    offset = 0
    for group in GROUP_ORDER:
        for joint in group_indices(group):
            source[joint] = offset
            offset += 3
    zero_col = offset
    index = []
    for joint in range(NUM_JOINTS):
        if joint == JointId.PELVIS:
            index.extend([zero_col] * 3)
        else:
            index.extend(source[joint] + k for k in range(3))
    return np.array(index, dtype=np.int64)


ASSEMBLY_INDEX = _assembly_index()


def assemble_groups(torso: Tensor, proximal: Tensor, distal: Tensor) -> Tensor:
    """Scatter B x (21, 15, 12) group outputs into B x 48 joint-major coordinates, pelvis at 0."""
    for t, dim, group in ((torso, TORSO_DIM, "torso"), (proximal, PROXIMAL_DIM, "proximal"), (distal, DISTAL_DIM, "distal")):
        if len(t.shape) != 2 or t.shape[1] != dim:
            raise ShapeError(f"{group} output must be B x {dim}, got {t.shape}")
    zero = Tensor(np.zeros((torso.shape[0], 1)))
    return gather_cols(concat([torso, proximal, distal, zero], axis=1), ASSEMBLY_INDEX)


def split_groups(coords: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """N x 16 x 3 coordinates -> per-group N x 3k arrays in GROUP_ORDER."""
    coords = np.asarray(coords, dtype=np.float64)
    return tuple(coords[:, group_indices(g), :].reshape(len(coords), -1) for g in GROUP_ORDER)


def assemble_pose(torso, proximal, distal) -> Pose3D:
    """Single-sample assembly of group coordinates (mm) into a root-relative Pose3D."""
    parts = [np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64).reshape(1, -1)
             for p in (torso, proximal, distal)]
    flat = assemble_groups(*(Tensor(p) for p in parts))
    return Pose3D.predicted(flat.data.reshape(NUM_JOINTS, 3))


def loss_3d(block1: Optional[Groups], block2: Groups, target: Tensor) -> Tensor:
    """L1 of each block's assembled pose against the B x 48 root-relative target."""
    loss = l1_loss(assemble_groups(*block2), target)
    if block1 is not None:
        loss = add(l1_loss(assemble_groups(*block1), target), loss)
    return loss


class ProgressiveNet:
    """
    Block I regresses torso, proximal, distal in that order, each module
    seeing the evidence plus the earlier groups; Block II runs the reverse
    direction from Block I's proximal and distal estimates.
    """
    kind = "progressive"

    def __init__(self, width: int = 256, depth: int = 2, use_attributes: bool = True, seed: int = 0):
        self.width = width
        self.depth = depth
        self.use_attributes = use_attributes
        self.seed = seed
        self.evidence_dim = EVIDENCE_DIM if use_attributes else COORD_DIM
        x = self.evidence_dim
        rng = np.random.default_rng(seed)
        self.params = Params()
        build = lambda name, in_dim, out_dim: RegressorG(self.params, name, in_dim, out_dim, width, depth, rng)  # noqa: E731
        self.g11 = build("g11", x, TORSO_DIM)
        self.g12 = build("g12", x + TORSO_DIM, PROXIMAL_DIM)
        self.g13 = build("g13", x + TORSO_DIM + PROXIMAL_DIM, DISTAL_DIM)
        self.g21 = build("g21", x + PROXIMAL_DIM + DISTAL_DIM, TORSO_DIM)
        self.g22 = build("g22", x + TORSO_DIM + DISTAL_DIM, PROXIMAL_DIM)
        self.g23 = build("g23", x + TORSO_DIM + PROXIMAL_DIM, DISTAL_DIM)

    @property
    def modules(self) -> Dict[str, RegressorG]:
        return {m.name: m for m in (self.g11, self.g12, self.g13, self.g21, self.g22, self.g23)}

    def input_dims(self) -> Dict[str, int]:
        return {name: m.in_dim for name, m in self.modules.items()}

    def layer_sizes(self) -> Dict[str, object]:
        return {
            "evidence_dim": self.evidence_dim,
            "width": self.width,
            "depth": self.depth,
            "use_attributes": self.use_attributes,
            "input_dims": self.input_dims(),
        }

    def _check(self, x: Tensor) -> None:
        if len(x.shape) != 2 or x.shape[1] != self.evidence_dim:
            raise ShapeError(f"{self.kind} net expects B x {self.evidence_dim} evidence, got {x.shape}")

    def forward_block1(self, x: Tensor) -> Groups:
        self._check(x)
        y11 = self.g11(x)
        y12 = self.g12(concat([x, y11]))
        y13 = self.g13(concat([x, y12, y11]))
        return y11, y12, y13

    def forward_block2(self, x: Tensor, y12: Tensor, y13: Tensor) -> Groups:
        self._check(x)
        y21 = self.g21(concat([x, y12, y13]))
        y22 = self.g22(concat([x, y21, y13]))
        y23 = self.g23(concat([x, y21, y22]))
        return y21, y22, y23

    def forward(self, x: Tensor) -> Tuple[Groups, Groups]:
        block1 = self.forward_block1(x)
        return block1, self.forward_block2(x, block1[1], block1[2])

    def final(self, x: Tensor) -> Tensor:
        """B x 48 root-relative prediction, Block II assembled."""
        return assemble_groups(*self.forward(x)[1])

    def zero_outputs(self) -> None:
        for module in self.modules.values():
            module.zero_output()


class BaselineNet:
    """Three independent group regressors reading only the evidence."""
    kind = "baseline"

    def __init__(self, width: int = 256, depth: int = 2, use_attributes: bool = False, seed: int = 0):
        self.width = width
        self.depth = depth
        self.use_attributes = use_attributes
        self.seed = seed
        self.evidence_dim = EVIDENCE_DIM if use_attributes else COORD_DIM
        rng = np.random.default_rng(seed)
        self.params = Params()
        self.g1 = RegressorG(self.params, "g1", self.evidence_dim, TORSO_DIM, width, depth, rng)
        self.g2 = RegressorG(self.params, "g2", self.evidence_dim, PROXIMAL_DIM, width, depth, rng)
        self.g3 = RegressorG(self.params, "g3", self.evidence_dim, DISTAL_DIM, width, depth, rng)

    @property
    def modules(self) -> Dict[str, RegressorG]:
        return {m.name: m for m in (self.g1, self.g2, self.g3)}

    def input_dims(self) -> Dict[str, int]:
        return {name: m.in_dim for name, m in self.modules.items()}

    def layer_sizes(self) -> Dict[str, object]:
        return {
            "evidence_dim": self.evidence_dim,
            "width": self.width,
            "depth": self.depth,
            "use_attributes": self.use_attributes,
            "input_dims": self.input_dims(),
        }

    def forward(self, x: Tensor) -> Tuple[None, Groups]:
        if len(x.shape) != 2 or x.shape[1] != self.evidence_dim:
            raise ShapeError(f"{self.kind} net expects B x {self.evidence_dim} evidence, got {x.shape}")
        return None, (self.g1(x), self.g2(x), self.g3(x))

    def final(self, x: Tensor) -> Tensor:
        return assemble_groups(*self.forward(x)[1])

    def zero_outputs(self) -> None:
        for module in self.modules.values():
            module.zero_output()


def build_net(kind: str, width: int, depth: int, use_attributes: bool, seed: int):
    if kind == ProgressiveNet.kind:
        return ProgressiveNet(width, depth, use_attributes, seed)
    if kind == BaselineNet.kind:
        return BaselineNet(width, depth, use_attributes, seed)
    raise ConfigError(f"unknown network kind {kind!r}; expected progressive or baseline")


def targets_from_poses(coords_mm: np.ndarray) -> np.ndarray:
    """N x 16 x 3 mm camera-frame poses -> N x 48 root-relative network targets."""
    coords_mm = np.asarray(coords_mm, dtype=np.float64)
    rel = coords_mm - coords_mm[:, JointId.PELVIS:JointId.PELVIS + 1, :]
    return rel.reshape(len(coords_mm), -1) / MM_PER_UNIT


def outputs_to_poses(flat: np.ndarray) -> np.ndarray:
    """N x 48 network output -> N x 16 x 3 mm."""
    return np.asarray(flat).reshape(-1, NUM_JOINTS, 3) * MM_PER_UNIT
