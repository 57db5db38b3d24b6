# pipeline/regressors/multitask.py
"""
Multi-task head: a shared feature MLP over the 2D pose feeding nine
three-way attribute classifiers and a two-way domain classifier.
"""
import logging
from typing import Dict, NamedTuple, Optional

import numpy as np

from pipeline.regressors.evidence import ATTR_DIM, COORD_DIM
from pipeline.regressors.residual import OUTPUT_INIT_STD, Linear, he_normal
from poselift.autodiff.losses import softmax_cross_entropy
from poselift.autodiff.ops import add, concat, detach, grad_reversal, relu, reshape, scale, soft_argmax_grid, softmax_rows
from poselift.autodiff.optim import Params
from poselift.autodiff.tensor import Tensor
from poselift.core.errors import ConfigError, ShapeError
from poselift.models.schemas import NUM_ATTR_CLASSES, NUM_ATTR_JOINTS, NUM_JOINTS

logger = logging.getLogger(__name__)

# Domain targets
LAB_DOMAIN = 0
WILD_DOMAIN = 1

DOMAIN_MODES = ("reverse", "detach")


def _grid_positions(coords: np.ndarray, size: int) -> np.ndarray:
    """N x 32 normalized coords -> N x 16 x 2 positions in heatmap cells."""
    return (np.asarray(coords).reshape(len(coords), NUM_JOINTS, 2) + 1.0) / 2.0 * (size - 1)


def heatmap_scores(coords: np.ndarray, size: int, sigma: float) -> np.ndarray:
    """Log-Gaussian scores -d^2 / (2 sigma^2), N x 16 x size x size."""
    if size < 2:
        raise ConfigError(f"heatmap size must be at least 2, got {size}")
    if not sigma > 0:
        raise ConfigError(f"heatmap sigma must be positive, got {sigma}")
    centres = _grid_positions(coords, size)
    axis = np.arange(size, dtype=np.float64)
    dx = axis[None, None, None, :] - centres[:, :, 0, None, None]
    dy = axis[None, None, :, None] - centres[:, :, 1, None, None]
    return -(dx ** 2 + dy ** 2) / (2.0 * sigma ** 2)


def loss_attr(logits: Tensor, labels: np.ndarray) -> Tensor:
    """
    Mean softmax cross-entropy over the attribute joints.

    logits: (B*9) x 3 or 9 x 3; labels: B x 9 or 9 class indices.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.shape != (labels.size, NUM_ATTR_CLASSES):
        raise ShapeError(f"loss_attr: logits {logits.shape} do not match {labels.size} labels")
    return softmax_cross_entropy(logits, labels)


class HeadOutput(NamedTuple):
    features: Tensor
    attr_logits: Tensor
    domain_logits: Optional[Tensor]


class MultiTaskHead:
    kind = "multitask"

    def __init__(
        self,
        width: int = 128,
        heatmap_size: int = 0,
        heatmap_sigma: float = 1.5,
        beta: float = 1.0,
        seed: int = 0,
    ):
        if heatmap_size == 1 or heatmap_size < 0:
            raise ConfigError(f"heatmap_size must be 0 (off) or at least 2, got {heatmap_size}")
        self.width = width
        self.heatmap_size = heatmap_size
        self.heatmap_sigma = heatmap_sigma
        self.beta = beta
        self.seed = seed
        self.input_dim = COORD_DIM * (2 if heatmap_size else 1)
        rng = np.random.default_rng(seed)
        hidden = max(1, width // 2)
        self.params = Params()
        self.shared_in = Linear(self.params, "shared.in", self.input_dim, width, he_normal(rng, self.input_dim, width))
        self.shared_fc1 = Linear(self.params, "shared.fc1", width, width, he_normal(rng, width, width))
        self.shared_fc2 = Linear(self.params, "shared.fc2", width, width, 0.5 * he_normal(rng, width, width))
        self.attr_out = Linear(
            self.params, "attr.out", width, ATTR_DIM, rng.normal(0.0, OUTPUT_INIT_STD, size=(width, ATTR_DIM))
        )
        self.domain_fc = Linear(self.params, "domain.fc", width, hidden, he_normal(rng, width, hidden))
        self.domain_out = Linear(
            self.params, "domain.out", hidden, 2, rng.normal(0.0, OUTPUT_INIT_STD, size=(hidden, 2))
        )

    def shared_names(self):
        return [name for name in self.params if name.startswith("shared.")]

    def layer_sizes(self) -> Dict[str, object]:
        return {
            "input_dim": self.input_dim,
            "width": self.width,
            "heatmap_size": self.heatmap_size,
            "heatmap_sigma": self.heatmap_sigma,
            "beta": self.beta,
        }

    def head_input(self, coords: np.ndarray) -> Tensor:
        coords = np.asarray(coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != COORD_DIM:
            raise ShapeError(f"head expects B x {COORD_DIM} normalized coordinates, got {coords.shape}")
        x = Tensor(coords)
        if not self.heatmap_size:
            return x
        size = self.heatmap_size
        scores = heatmap_scores(coords, size, self.heatmap_sigma).reshape(len(coords) * NUM_JOINTS, size * size)
        cells = soft_argmax_grid(Tensor(scores), size, size, self.beta)
        decoded = add(scale(reshape(cells, (len(coords), COORD_DIM)), 2.0 / (size - 1)), Tensor(-np.ones((len(coords), COORD_DIM))))
        return concat([x, decoded])

    def features(self, coords: np.ndarray) -> Tensor:
        h = relu(self.shared_in(self.head_input(coords)))
        return add(h, self.shared_fc2(relu(self.shared_fc1(h))))

    def forward(self, coords: np.ndarray, domain: Optional[str] = "reverse", lam: float = 1.0) -> HeadOutput:
        """
        domain: "reverse" puts the domain classifier behind gradient reversal,
        "detach" behind a stop-gradient, None skips the domain branch.
        """
        feats = self.features(coords)
        attr_logits = reshape(self.attr_out(feats), (feats.shape[0] * NUM_ATTR_JOINTS, NUM_ATTR_CLASSES))
        domain_logits = None
        if domain is not None:
            if domain not in DOMAIN_MODES:
                raise ConfigError(f"unknown domain mode {domain!r}; expected one of {DOMAIN_MODES}")
            gated = grad_reversal(feats, lam) if domain == "reverse" else detach(feats)
            domain_logits = self.domain_out(relu(self.domain_fc(gated)))
        return HeadOutput(feats, attr_logits, domain_logits)

    def attr_probs_tensor(self, coords: np.ndarray) -> Tensor:
        """B x 27 attribute probabilities, differentiable."""
        logits = self.forward(coords, domain=None).attr_logits
        return reshape(softmax_rows(logits), (len(coords), ATTR_DIM))

    def attr_probs(self, coords: np.ndarray) -> np.ndarray:
        """B x 9 x 3 attribute probabilities."""
        return self.attr_probs_tensor(coords).data.reshape(len(coords), NUM_ATTR_JOINTS, NUM_ATTR_CLASSES)

    def domain_probs(self, coords: np.ndarray) -> np.ndarray:
        logits = self.forward(coords, domain="detach").domain_logits
        return softmax_rows(logits).data
