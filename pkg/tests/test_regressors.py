# tests/test_regressors.py
import numpy as np
import pytest

from pipeline.regressors.evidence import (
    EVIDENCE_DIM,
    check_attr_probs,
    encode_evidence,
    evidence_matrix,
    jitter_coords,
)
from pipeline.regressors.multitask import MultiTaskHead, heatmap_scores, loss_attr
from pipeline.regressors.progressive import (
    ASSEMBLY_INDEX,
    BaselineNet,
    ProgressiveNet,
    assemble_groups,
    assemble_pose,
    build_net,
    loss_3d,
    split_groups,
    targets_from_poses,
)
from pipeline.regressors.store import load_head, load_net, save_model
from pipeline.tasks.training import predict, predict_batch
from poselift.autodiff.gradcheck import gradcheck
from poselift.autodiff.losses import cross_entropy, softmax_cross_entropy
from poselift.autodiff.ops import add, mul, softmax_rows, sum_all
from poselift.autodiff.optim import rmsprop_step
from poselift.autodiff.tensor import Tape, Tensor
from poselift.core.errors import CheckpointError, ConfigError, PoseError, ShapeError
from poselift.models.schemas import GeneratorConfig, JointGroup, JointId
from poselift.services.skeleton import GROUP_MEMBERS, Pose2D
from poselift.services.synthetic import synth_generate


def random_evidence(rng, batch, dim=EVIDENCE_DIM):
    return Tensor(rng.uniform(-1.0, 1.0, size=(batch, dim)))


def changed(a: Tensor, b: Tensor) -> bool:
    return not np.array_equal(a.data, b.data)


class TestEvidence:
    """Tests for evidence encoding."""

    def test_centre_joints_encode_to_zero(self):
        """Joints at the image centre give zero coordinates."""
        p2d = Pose2D(np.full((16, 2), [320.0, 240.0]), 640, 480)
        ev = encode_evidence(p2d, np.full((9, 3), 1.0 / 3.0))
        assert len(ev) == EVIDENCE_DIM
        assert np.allclose(ev.values[:32], 0.0)

    def test_one_hot_passes_through(self):
        """One-hot triples appear unchanged after the coordinates."""
        probs = np.eye(3)[np.arange(9) % 3]
        ev = encode_evidence(Pose2D(np.zeros((16, 2)), 10, 10), probs)
        assert np.array_equal(ev.values[32:], probs.reshape(-1))

    def test_non_distribution_rejected(self):
        """Triples that do not sum to 1 are rejected."""
        probs = np.full((9, 3), 0.4)
        with pytest.raises(PoseError):
            encode_evidence(Pose2D(np.zeros((16, 2)), 10, 10), probs)

    def test_wrong_attr_shape(self):
        """Attribute tables must be 9 x 3."""
        with pytest.raises(ShapeError):
            check_attr_probs(np.full((8, 3), 1.0 / 3.0))

    def test_evidence_matrix_without_attributes(self):
        """Coordinates alone pass through unchanged."""
        coords = np.ones((2, 32))
        assert evidence_matrix(coords, None).shape == (2, 32)
        assert evidence_matrix(coords, np.full((2, 9, 3), 1.0 / 3.0)).shape == (2, EVIDENCE_DIM)

    def test_jitter_zooms_about_centre(self):
        """Each sample is scaled by one factor within the jitter band."""
        coords = np.random.default_rng(0).uniform(-1, 1, size=(50, 32))
        out = jitter_coords(coords, 0.2, np.random.default_rng(1))
        ratios = out / coords
        assert np.allclose(ratios, ratios[:, :1])
        assert np.all((ratios >= 0.8) & (ratios <= 1.2))
        assert jitter_coords(coords, 0.0, np.random.default_rng(1)) is coords


class TestProgressiveStructure:
    """Structural tests of the progressive network."""

    def setup_method(self):
        self.net = ProgressiveNet(width=16, depth=1, use_attributes=True, seed=0)
        self.rng = np.random.default_rng(0)

    def test_input_dimension_audit(self):
        """Every module reads the evidence plus exactly the groups it depends on."""
        t, p, d = (3 * len(GROUP_MEMBERS[g]) for g in (JointGroup.TORSO, JointGroup.PROXIMAL, JointGroup.DISTAL))
        assert (t, p, d) == (21, 15, 12)
        x = EVIDENCE_DIM
        assert self.net.input_dims() == {
            "g11": x,
            "g12": x + t,
            "g13": x + t + p,
            "g21": x + p + d,
            "g22": x + t + d,
            "g23": x + t + p,
        }

    def test_output_dimensions(self):
        """Each module emits three values per joint of its group."""
        y11, y12, y13 = self.net.forward_block1(random_evidence(self.rng, 4))
        assert (y11.shape, y12.shape, y13.shape) == ((4, 21), (4, 15), (4, 12))

    def test_without_attributes(self):
        """The ablation variant reads 32 coordinates."""
        net = ProgressiveNet(width=8, depth=1, use_attributes=False)
        assert net.input_dims()["g11"] == 32
        with pytest.raises(ShapeError):
            net.forward_block1(random_evidence(self.rng, 2))

    def test_zero_outputs(self):
        """Zeroed output layers give zero predictions for any input."""
        self.net.zero_outputs()
        block1, block2 = self.net.forward(random_evidence(self.rng, 3))
        assert all(np.all(y.data == 0.0) for y in block1 + block2)

    def test_block1_dependency_flow(self):
        """A shift injected after G11 reaches G12 and G13."""
        x = random_evidence(self.rng, 2)
        y11, y12, y13 = self.net.forward_block1(x)
        original = self.net.g11
        shift = Tensor(np.full((2, 21), 0.5))
        self.net.g11 = lambda inp: add(original(inp), shift)
        s11, s12, s13 = self.net.forward_block1(x)
        self.net.g11 = original
        assert changed(y11, s11) and changed(y12, s12) and changed(y13, s13)

    def test_block1_proximal_shift_leaves_torso(self):
        """A shift after G12 reaches G13 but not the torso estimate."""
        x = random_evidence(self.rng, 2)
        y11, y12, y13 = self.net.forward_block1(x)
        original = self.net.g12
        self.net.g12 = lambda inp: add(original(inp), Tensor(np.full((2, 15), 0.5)))
        s11, _, s13 = self.net.forward_block1(x)
        self.net.g12 = original
        assert not changed(y11, s11)
        assert changed(y13, s13)

    def test_block2_dependency_flow(self):
        """Shifting Block I's distal estimate changes all of Block II."""
        x = random_evidence(self.rng, 2)
        _, y12, y13 = self.net.forward_block1(x)
        base = self.net.forward_block2(x, y12, y13)
        shifted = self.net.forward_block2(x, y12, add(y13, Tensor(np.full((2, 12), 0.5))))
        assert all(changed(a, b) for a, b in zip(base, shifted))

    def test_gradient_reaches_g11(self):
        """A loss on the distal Block I output reaches G11's parameters."""
        x = random_evidence(self.rng, 3)
        w = Tensor(self.rng.normal(size=(3, 12)))
        with Tape() as tape:
            _, _, y13 = self.net.forward_block1(x)
            loss = sum_all(mul(y13, w))
        grads = tape.backward(loss).by_name(self.net.params)
        assert np.linalg.norm(grads["g11.in.w"]) > 0
        assert "g21.in.w" not in grads

    def test_end_to_end_gradcheck(self):
        """Every parameter of a tiny net matches finite differences on the 3D loss."""
        net = ProgressiveNet(width=8, depth=1, use_attributes=False, seed=3)
        x = random_evidence(self.rng, 3, dim=32)
        target = Tensor(self.rng.normal(scale=0.3, size=(3, 48)))
        tensors = [t for _, t in net.params.items()]
        assert gradcheck(lambda: loss_3d(*net.forward(x), target), tensors) < 1e-4

    def test_final_is_block2(self):
        """The final prediction is Block II's assembly."""
        x = random_evidence(self.rng, 2)
        block1, block2 = self.net.forward(x)
        assert np.array_equal(self.net.final(x).data, assemble_groups(*block2).data)
        assert not np.array_equal(self.net.final(x).data, assemble_groups(*block1).data)


class TestBaseline:
    """Tests for the independent-groups baseline."""

    def test_no_cross_group_inputs(self):
        """All three modules read only the evidence."""
        net = BaselineNet(width=8, depth=1)
        assert set(net.input_dims().values()) == {32}
        block1, block2 = net.forward(random_evidence(np.random.default_rng(0), 2, dim=32))
        assert block1 is None
        assert [y.shape[1] for y in block2] == [21, 15, 12]

    def test_build_net_unknown_kind(self):
        """Unknown network kinds are config errors."""
        with pytest.raises(ConfigError):
            build_net("transformer", 8, 1, False, 0)


class TestAssembly:
    """Tests for group scatter and split."""

    def setup_method(self):
        ds = synth_generate(GeneratorConfig(n=3), 0)
        self.coords = np.stack([r.pose3d.coords - r.pose3d.coords[JointId.PELVIS] for r in ds])

    def test_split_then_assemble_round_trip(self):
        """Splitting a root-relative pose by group and assembling restores it."""
        torso, proximal, distal = split_groups(self.coords[:1])
        pose = assemble_pose(torso, proximal, distal)
        assert np.array_equal(pose.coords, self.coords[0])
        assert np.array_equal(pose[JointId.PELVIS], np.zeros(3))

    def test_index_audit(self):
        """Every assembled column comes from its own joint's group entry."""
        torso, proximal, distal = split_groups(self.coords)
        flat = assemble_groups(Tensor(torso), Tensor(proximal), Tensor(distal)).data.reshape(-1, 16, 3)
        for joint in JointId:
            assert np.array_equal(flat[:, joint], self.coords[:, joint])
        assert len(ASSEMBLY_INDEX) == 48

    def test_targets_are_root_relative_meters(self):
        """Targets subtract the pelvis and divide by 1000."""
        targets = targets_from_poses(self.coords + 250.0)
        assert np.allclose(targets, self.coords.reshape(3, -1) / 1000.0)

    def test_wrong_group_width(self):
        """Group tensors of the wrong width are rejected."""
        with pytest.raises(ShapeError, match="torso"):
            assemble_groups(Tensor(np.zeros((1, 20))), Tensor(np.zeros((1, 15))), Tensor(np.zeros((1, 12))))

    def test_collapsed_output_assembles(self):
        """All-zero group outputs give a pose with every joint at the root."""
        pose = assemble_pose(np.zeros(21), np.zeros(15), np.zeros(12))
        assert np.array_equal(pose.coords, np.zeros((16, 3)))


class TestMultiTaskHead:
    """Tests for the attribute and domain head."""

    def setup_method(self):
        self.head = MultiTaskHead(width=16, seed=0)
        self.coords = np.random.default_rng(0).uniform(-0.8, 0.8, size=(5, 32))

    def test_attr_probs_are_distributions(self):
        """Each joint's three probabilities sum to 1."""
        probs = self.head.attr_probs(self.coords)
        assert probs.shape == (5, 9, 3)
        assert np.allclose(probs.sum(axis=2), 1.0)

    def test_branches_share_features(self):
        """Attribute and domain branches read the same features."""
        out = self.head.forward(self.coords)
        assert out.attr_logits.shape == (45, 3)
        assert out.domain_logits.shape == (5, 2)
        assert out.features.shape == (5, 16)
        assert self.head.forward(self.coords, domain=None).domain_logits is None

    def test_unknown_domain_mode(self):
        """Only reverse and detach are domain modes."""
        with pytest.raises(ConfigError):
            self.head.forward(self.coords, domain="sideways")

    def test_loss_attr_values(self):
        """Zero logits give ln 3; large margins give nearly 0; it averages per-joint losses."""
        labels = np.arange(18).reshape(2, 9) % 3
        assert loss_attr(Tensor(np.zeros((18, 3))), labels).item() == pytest.approx(np.log(3.0))
        aligned = 20.0 * np.eye(3)[labels.reshape(-1)]
        assert loss_attr(Tensor(aligned), labels).item() < 1e-6
        logits = np.random.default_rng(1).normal(size=(9, 3))
        single = labels[0]
        per_joint = [cross_entropy(softmax_rows(Tensor(logits[k:k + 1])), [single[k]]).item() for k in range(9)]
        assert loss_attr(Tensor(logits), single).item() == pytest.approx(np.mean(per_joint), abs=1e-12)

    def test_reversal_pushes_shared_layers_uphill(self):
        """One step of the shared layers through reversal increases the domain loss."""
        domains = np.array([0, 0, 1, 1, 1])
        with Tape() as tape:
            before = softmax_cross_entropy(self.head.forward(self.coords, "reverse", 1.0).domain_logits, domains)
        grads = tape.backward(before).by_name(self.head.params)
        shared = {name: grads[name] for name in self.head.shared_names() if name in grads}
        assert shared
        rmsprop_step(self.head.params, shared, lr=1e-5)
        after = softmax_cross_entropy(self.head.forward(self.coords, "reverse", 1.0).domain_logits, domains)
        assert after.item() > before.item()

    def test_detach_blocks_shared_gradient(self):
        """With the stop-gradient only the domain branch receives gradients."""
        with Tape() as tape:
            loss = softmax_cross_entropy(self.head.forward(self.coords, "detach").domain_logits, [0, 1, 0, 1, 0])
        grads = tape.backward(loss).by_name(self.head.params)
        assert all(name.startswith("domain.") for name in grads)

    def test_heatmap_option_decodes_coordinates(self):
        """Soft-argmax over rendered heatmaps recovers the normalized coordinates."""
        head = MultiTaskHead(width=8, heatmap_size=32, heatmap_sigma=1.5, beta=1.0)
        x = head.head_input(self.coords)
        assert x.shape == (5, 64)
        assert np.allclose(x.data[:, 32:], self.coords, atol=0.02)

    def test_heatmap_scores_peak_at_joint(self):
        """A joint on a grid cell scores 0 there and less everywhere else."""
        coords = np.zeros((1, 32))
        scores = heatmap_scores(coords, size=9, sigma=1.0)
        assert scores.shape == (1, 16, 9, 9)
        assert scores[0, 0, 4, 4] == 0.0
        assert np.sum(scores[0, 0] == 0.0) == 1
        assert scores[0, 0, 4, 5] == pytest.approx(-0.5)
        with pytest.raises(ConfigError):
            heatmap_scores(coords, size=1, sigma=1.0)


class TestStore:
    """Tests for saving and restoring networks."""

    def setup_method(self):
        self.coords = np.random.default_rng(2).uniform(-0.8, 0.8, size=(4, 32))

    def test_round_trip_predictions_bitwise(self, tmp_path):
        """A reloaded net and head predict exactly as before saving."""
        net = ProgressiveNet(width=16, depth=1, seed=5)
        head = MultiTaskHead(width=16, seed=6)
        before, probs = predict_batch(net, head, self.coords)
        save_model(tmp_path / "net.ckpt", net)
        save_model(tmp_path / "head.ckpt", head)
        after, probs_after = predict_batch(load_net(tmp_path / "net.ckpt"), load_head(tmp_path / "head.ckpt"), self.coords)
        assert np.array_equal(before, after)
        assert np.array_equal(probs, probs_after)

    def test_baseline_round_trip(self, tmp_path):
        """Baseline checkpoints rebuild a baseline."""
        net = BaselineNet(width=8, depth=2, seed=1)
        save_model(tmp_path / "b.ckpt", net)
        loaded = load_net(tmp_path / "b.ckpt")
        assert isinstance(loaded, BaselineNet)
        assert loaded.depth == 2

    def test_head_is_not_a_net(self, tmp_path):
        """Loading a head checkpoint as a pose network fails."""
        save_model(tmp_path / "head.ckpt", MultiTaskHead(width=8))
        with pytest.raises(CheckpointError, match="expected a 3D pose network"):
            load_net(tmp_path / "head.ckpt")

    def test_predict_needs_attributes(self):
        """An attribute-reading net without head or oracle is a config error."""
        with pytest.raises(ConfigError):
            predict_batch(ProgressiveNet(width=8, depth=1), None, self.coords)

    def test_predict_single_pose_deterministic(self):
        """predict returns the same pose twice and uses oracle attributes when given."""
        net = ProgressiveNet(width=8, depth=1, seed=2)
        p2d = Pose2D(np.random.default_rng(3).uniform(100, 900, size=(16, 2)), 1000, 1000)
        oracle = np.eye(3)[np.zeros(9, dtype=int)]
        pose_a, probs_a = predict(net, None, p2d, oracle)
        pose_b, _ = predict(net, None, p2d, oracle)
        assert pose_a == pose_b
        assert np.array_equal(probs_a, oracle)
        assert np.array_equal(pose_a[JointId.PELVIS], np.zeros(3))

    def test_predict_with_collapsed_net(self):
        """A zero-output network predicts the all-root pose instead of failing."""
        net = ProgressiveNet(width=8, depth=1, use_attributes=False, seed=0)
        net.zero_outputs()
        p2d = Pose2D(np.random.default_rng(4).uniform(100, 900, size=(16, 2)), 1000, 1000)
        pose, probs = predict(net, None, p2d)
        assert probs is None
        assert np.array_equal(pose.coords, np.zeros((16, 3)))

    def test_predict_matches_batch_path(self):
        """Single-pose predict agrees with the batched evidence path."""
        net = ProgressiveNet(width=8, depth=1, use_attributes=False, seed=5)
        p2d = Pose2D(np.random.default_rng(6).uniform(100, 900, size=(16, 2)), 1000, 1000)
        pose, _ = predict(net, None, p2d)
        batch, _ = predict_batch(net, None, p2d.normalized()[None])
        assert np.allclose(pose.coords, batch[0], rtol=0, atol=1e-9)
