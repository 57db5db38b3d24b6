# tests/test_autodiff.py
import numpy as np
import pytest
from unittest.mock import patch

from pipeline.regressors.residual import RegressorG
from poselift.autodiff.checkpoint import MAGIC, load_checkpoint, read_checkpoint, save_checkpoint
from poselift.autodiff.gradcheck import gradcheck
from poselift.autodiff.losses import cross_entropy, l1_loss, mse_loss, softmax_cross_entropy
from poselift.autodiff.ops import (
    add,
    add_bias,
    concat,
    detach,
    gather_cols,
    grad_reversal,
    matmul,
    mean_all,
    mul,
    relu,
    reshape,
    scale,
    soft_argmax2d,
    soft_argmax_grid,
    softmax_rows,
    sub,
    sum_all,
    take_rows,
)
from poselift.autodiff.optim import Params, rmsprop_step
from poselift.autodiff.tensor import Tape, Tensor, backward
from poselift.core.errors import CheckpointError, ConfigError, ShapeError, TapeError

GRAD_TOL = 1e-4
TRIALS = 20


def leaf(rng, *shape, low=None):
    data = rng.normal(size=shape)
    if low is not None:
        # keep entries away from kinks
        data = np.where(np.abs(data) < low, np.sign(data + 1e-12) * low, data)
    return Tensor(data, requires_grad=True)


def weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar sum(out * weights), so every output entry gets a distinct upstream gradient."""
    return sum_all(mul(out, Tensor(weights)))


class TestForward:
    """Tests for forward values and shape errors."""

    def test_matmul_identity(self):
        """A @ I = A."""
        a = np.arange(6.0).reshape(2, 3)
        assert np.array_equal(matmul(Tensor(a), Tensor(np.eye(3))).data, a)

    def test_matmul_shape_error_names_shapes(self):
        """Misaligned shapes raise with both shapes in the message."""
        with pytest.raises(ShapeError, match=r"\(2, 3\) and \(2, 3\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_relu(self):
        """relu zeroes negatives and keeps positives."""
        out = relu(Tensor([[-2.0, 3.0]]))
        assert out.data.tolist() == [[0.0, 3.0]]

    def test_add_shape_error(self):
        """Elementwise ops need equal shapes."""
        with pytest.raises(ShapeError):
            add(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))

    def test_concat_shape_error(self):
        """Concat needs matching off-axis shapes."""
        with pytest.raises(ShapeError):
            concat([Tensor(np.zeros((2, 2))), Tensor(np.zeros((3, 2)))], axis=1)

    def test_softmax_uniform_and_shift_invariant(self):
        """Equal logits give 1/c; adding a constant changes nothing."""
        x = np.array([[1.0, 1.0, 1.0, 1.0], [0.5, -2.0, 3.0, 1e3]])
        s = softmax_rows(Tensor(x)).data
        assert np.allclose(s[0], 0.25)
        assert np.allclose(softmax_rows(Tensor(x + 7.0)).data, s, atol=1e-12)
        assert np.allclose(s.sum(axis=1), 1.0, atol=1e-12)

    def test_softmax_stable_at_large_magnitude(self):
        """Rows of magnitude 1e3 still sum to one."""
        rng = np.random.default_rng(0)
        s = softmax_rows(Tensor(rng.uniform(-1e3, 1e3, size=(10, 5)))).data
        assert np.all(np.isfinite(s))
        assert np.allclose(s.sum(axis=1), 1.0, atol=1e-12)

    def test_cross_entropy_values(self):
        """One-hot gives 0, uniform gives ln c."""
        assert cross_entropy(Tensor([[0.0, 1.0, 0.0]]), [1]).item() == pytest.approx(0.0, abs=1e-9)
        assert cross_entropy(Tensor(np.full((2, 4), 0.25)), [0, 3]).item() == pytest.approx(np.log(4.0))

    def test_cross_entropy_bad_label(self):
        """Class index out of range is an error."""
        with pytest.raises(ShapeError, match="out of range"):
            cross_entropy(Tensor(np.full((1, 3), 1 / 3)), [3])

    def test_l1_and_mse(self):
        """Scalars 3 and 1 give l1 2 and mse 4; identical inputs give 0."""
        assert l1_loss(Tensor([3.0]), Tensor([1.0])).item() == 2.0
        assert mse_loss(Tensor([3.0]), Tensor([1.0])).item() == 4.0
        x = Tensor(np.ones((2, 2)))
        assert l1_loss(x, x).item() == 0.0

    def test_loss_shape_error(self):
        """Losses need matching shapes."""
        with pytest.raises(ShapeError):
            l1_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_reshape_error(self):
        """Incompatible reshape is a shape error."""
        with pytest.raises(ShapeError):
            reshape(Tensor(np.zeros(6)), (4, 2))


class TestGradients:
    """Finite-difference checks of every differentiable op."""

    def setup_method(self):
        self.rng = np.random.default_rng(1234)

    def check(self, build, inputs):
        assert gradcheck(build, inputs) < GRAD_TOL

    def test_matmul(self):
        """matmul gradients."""
        for _ in range(TRIALS):
            m, k, n = self.rng.integers(1, 5, size=3)
            a, b = leaf(self.rng, m, k), leaf(self.rng, k, n)
            w = self.rng.normal(size=(m, n))
            self.check(lambda: weighted(matmul(a, b), w), [a, b])

    def test_elementwise(self):
        """add, sub, mul and scale gradients."""
        for _ in range(TRIALS):
            shape = tuple(self.rng.integers(1, 5, size=2))
            a, b = leaf(self.rng, *shape), leaf(self.rng, *shape)
            w = self.rng.normal(size=shape)
            self.check(lambda: weighted(add(mul(a, b), scale(sub(a, b), -1.7)), w), [a, b])

    def test_add_bias_and_relu(self):
        """Bias broadcast and relu away from the kink."""
        for _ in range(TRIALS):
            m, n = self.rng.integers(1, 5, size=2)
            x, bias = leaf(self.rng, m, n, low=0.05), Tensor(np.zeros(n), requires_grad=True)
            w = self.rng.normal(size=(m, n))
            self.check(lambda: weighted(relu(add_bias(x, bias)), w), [x, bias])

    def test_concat_gather_take(self):
        """Shape and indexing ops route gradients, repeated indices accumulate."""
        for _ in range(TRIALS):
            a, b = leaf(self.rng, 3, 2), leaf(self.rng, 3, 4)
            cols = self.rng.integers(0, 6, size=8)
            rows = self.rng.integers(0, 3, size=5)
            w = self.rng.normal(size=(5, 8))
            self.check(lambda: weighted(take_rows(gather_cols(concat([a, b], axis=1), cols), rows), w), [a, b])

    def test_concat_axis0_and_reshape(self):
        """Row concatenation and reshape."""
        for _ in range(TRIALS):
            a, b = leaf(self.rng, 2, 3), leaf(self.rng, 1, 3)
            w = self.rng.normal(size=(9,))
            self.check(lambda: weighted(reshape(concat([a, b], axis=0), (9,)), w), [a, b])

    def test_reductions(self):
        """sum_all and mean_all."""
        for _ in range(TRIALS):
            a = leaf(self.rng, 3, 4)
            self.check(lambda: add(mean_all(mul(a, a)), scale(sum_all(a), 0.3)), [a])

    def test_softmax_cross_entropy(self):
        """Softmax plus cross entropy composite."""
        for _ in range(TRIALS):
            m, c = self.rng.integers(1, 6), self.rng.integers(2, 5)
            logits = leaf(self.rng, m, c)
            labels = self.rng.integers(0, c, size=m)
            self.check(lambda: softmax_cross_entropy(logits, labels), [logits])

    def test_softmax_rows(self):
        """Softmax alone."""
        for _ in range(TRIALS):
            x = leaf(self.rng, 3, 4)
            w = self.rng.normal(size=(3, 4))
            self.check(lambda: weighted(softmax_rows(x), w), [x])

    def test_l1_away_from_ties(self):
        """l1 gradient with every difference away from zero."""
        for _ in range(TRIALS):
            pred = leaf(self.rng, 4, 3)
            target = Tensor(pred.data + np.where(self.rng.random((4, 3)) < 0.5, -1.0, 1.0) * self.rng.uniform(0.1, 1.0, (4, 3)),
                            requires_grad=True)
            self.check(lambda: l1_loss(pred, target), [pred, target])

    def test_mse(self):
        """mse gradient."""
        for _ in range(TRIALS):
            pred, target = leaf(self.rng, 4, 3), leaf(self.rng, 4, 3)
            self.check(lambda: mse_loss(pred, target), [pred, target])

    def test_soft_argmax(self):
        """Soft-argmax over grids."""
        for _ in range(TRIALS):
            h = leaf(self.rng, 2, 12)
            w = self.rng.normal(size=(2, 2))
            self.check(lambda: weighted(soft_argmax_grid(h, 3, 4, beta=1.5), w), [h])

    def test_residual_mlp(self):
        """A three-block residual MLP matches finite differences on every parameter."""
        params = Params()
        g = RegressorG(params, "g", 5, 3, width=6, depth=3, rng=np.random.default_rng(0))
        x = Tensor(self.rng.normal(size=(4, 5)))
        target = Tensor(self.rng.normal(size=(4, 3)))
        tensors = [t for _, t in params.items()]
        assert gradcheck(lambda: mse_loss(g(x), target), tensors) < GRAD_TOL

    def test_x_times_x(self):
        """d(x*x)/dx at 3 is 6."""
        x = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            y = sum_all(mul(x, x))
        assert tape.backward(y)[x].tolist() == [6.0]


class TestTape:
    """Tests for tape recording and backward."""

    def test_constant_gets_no_gradient(self):
        """Inputs that do not require gradients are absent from the result."""
        w = Tensor(np.ones((2, 2)), requires_grad=True)
        c = Tensor(np.ones((2, 2)))
        with Tape() as tape:
            loss = sum_all(mul(w, c))
        grads = tape.backward(loss)
        assert w in grads
        assert c not in grads

    def test_no_recording_without_tape(self):
        """Ops outside a tape are not recorded."""
        x = Tensor(np.ones(2), requires_grad=True)
        y = scale(x, 2.0)
        assert y.is_leaf

    def test_backward_is_repeatable(self):
        """Calling backward twice gives identical gradients."""
        x = Tensor(np.array([[1.0, -2.0]]), requires_grad=True)
        with Tape() as tape:
            loss = mean_all(mul(x, x))
        first = tape.backward(loss)[x].copy()
        assert np.array_equal(tape.backward(loss)[x], first)

    def test_loss_not_on_tape(self):
        """A tensor the tape never saw is rejected."""
        with Tape() as tape:
            pass
        with pytest.raises(TapeError, match="not produced"):
            tape.backward(Tensor(1.0))

    def test_non_scalar_loss(self):
        """Backward needs a scalar."""
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = scale(x, 2.0)
        with pytest.raises(TapeError, match="scalar"):
            tape.backward(y)

    def test_backward_without_tape(self):
        """Module-level backward needs a tape."""
        with pytest.raises(TapeError):
            backward(Tensor(1.0))

    def test_debug_flags_non_finite_output(self):
        """With the debug flag on, an op producing inf is named."""
        x = Tensor(np.ones(2), requires_grad=True)
        with patch("poselift.core.config.POSELIFT_DEBUG", True), Tape():
            with pytest.raises(TapeError, match="scale produced non-finite values"):
                scale(x, np.inf)

    def test_non_finite_output_passes_without_debug(self):
        """The check is off by default."""
        with patch("poselift.core.config.POSELIFT_DEBUG", False):
            y = scale(Tensor(np.ones(2)), np.inf)
        assert np.all(np.isinf(y.data))

    def test_detach_stops_gradient(self):
        """Detached values carry no gradient back."""
        x = Tensor(np.ones(2), requires_grad=True)
        y = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(add(detach(scale(x, 3.0)), y))
        grads = tape.backward(loss)
        assert x not in grads
        assert np.array_equal(grads[y], np.ones(2))


class TestGradReversal:
    """Tests for the gradient reversal op."""

    @pytest.mark.parametrize("lam", [0.1, 1.0, 10.0])
    def test_identity_forward_reversed_backward(self, lam):
        """Forward is bitwise identity; backward is -lam times upstream."""
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        upstream = rng.normal(size=(3, 4))
        with Tape() as tape:
            y = grad_reversal(x, lam)
            loss = weighted(y, upstream)
        assert np.array_equal(y.data, x.data)
        assert np.array_equal(tape.backward(loss)[x], -lam * upstream)

    def test_double_reversal_cancels(self):
        """Two reversals with lam 1 restore the plain gradient."""
        x = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
        w = np.array([[0.5, -3.0]])
        with Tape() as tape:
            loss = weighted(grad_reversal(grad_reversal(x, 1.0), 1.0), w)
        assert np.array_equal(tape.backward(loss)[x], w)

    def test_nonpositive_lambda(self):
        """lam <= 0 is a config error."""
        with pytest.raises(ConfigError):
            grad_reversal(Tensor(np.ones(2)), 0.0)


class TestSoftArgmax:
    """Tests for soft_argmax2d."""

    def test_one_hot_large_beta(self):
        """A single hot cell with beta 50 decodes to that cell."""
        h = np.zeros((8, 10))
        h[3, 7] = 1.0
        out = soft_argmax2d(Tensor(h), beta=50.0).data
        assert np.allclose(out, [7.0, 3.0], atol=1e-6)

    def test_gaussian_centre(self):
        """A log-domain isotropic Gaussian decodes to its centre."""
        ys, xs = np.mgrid[0:64, 0:64]
        x0, y0, sigma = 20.3, 35.7, 2.0
        h = -((xs - x0) ** 2 + (ys - y0) ** 2) / (2 * sigma ** 2)
        out = soft_argmax2d(Tensor(h), beta=1.0).data
        assert np.allclose(out, [x0, y0], atol=0.1)

    def test_output_inside_grid(self):
        """Outputs are convex combinations of grid points."""
        rng = np.random.default_rng(6)
        for _ in range(20):
            out = soft_argmax2d(Tensor(rng.normal(scale=5.0, size=(5, 7))), beta=2.0).data
            assert 0.0 <= out[0] <= 6.0
            assert 0.0 <= out[1] <= 4.0

    def test_beta_must_be_positive(self):
        """beta <= 0 is a config error."""
        with pytest.raises(ConfigError):
            soft_argmax2d(Tensor(np.zeros((2, 2))), beta=0.0)


class TestRmsprop:
    """Tests for the RMSprop update."""

    def setup_method(self):
        self.params = Params()
        self.theta = self.params.add("theta", np.array([0.5, -1.0]))

    def test_single_step(self):
        """From zero state, g=1, lr=0.1 moves theta by -1."""
        params = Params()
        t = params.add("t", np.array([0.0]))
        rmsprop_step(params, {"t": np.array([1.0])}, lr=0.1, alpha=0.99, eps=1e-8)
        assert t.data[0] == pytest.approx(-1.0, abs=1e-6)

    def test_zero_gradient(self):
        """Zero gradient leaves parameters and decays accumulators."""
        rmsprop_step(self.params, {"theta": np.array([1.0, 2.0])}, lr=0.1)
        acc = self.params.accumulator("theta").copy()
        before = self.theta.data.copy()
        rmsprop_step(self.params, {"theta": np.zeros(2)}, lr=0.1)
        assert np.array_equal(self.theta.data, before)
        assert np.allclose(self.params.accumulator("theta"), 0.99 * acc)

    def test_constant_gradient_matches_recurrence(self):
        """Repeated steps match an independent scalar recurrence."""
        g, lr, alpha, eps = 0.3, 0.01, 0.9, 1e-8
        params = Params()
        t = params.add("t", np.array([0.0]))
        acc = theta = 0.0
        for _ in range(200):
            rmsprop_step(params, {"t": np.array([g])}, lr=lr, alpha=alpha, eps=eps)
            acc = alpha * acc + (1 - alpha) * g * g
            theta -= lr * g / (np.sqrt(acc) + eps)
        assert t.data[0] == pytest.approx(theta, rel=1e-12)
        # accumulator converges to g^2, so the step tends to lr
        assert lr * g / (np.sqrt(acc) + eps) == pytest.approx(lr, rel=1e-6)

    def test_shape_mismatch(self):
        """A gradient of the wrong shape is rejected."""
        with pytest.raises(ShapeError, match="theta"):
            rmsprop_step(self.params, {"theta": np.zeros(3)}, lr=0.1)

    def test_unknown_gradient(self):
        """Gradients for unknown names are rejected."""
        with pytest.raises(ShapeError, match="unknown"):
            rmsprop_step(self.params, {"other": np.zeros(2)}, lr=0.1)

    @pytest.mark.parametrize("kwargs", [{"lr": 0.0}, {"lr": 0.1, "alpha": 1.0}, {"lr": 0.1, "eps": 0.0}])
    def test_bad_hyperparameters(self, kwargs):
        """Out-of-range hyperparameters are config errors."""
        with pytest.raises(ConfigError):
            rmsprop_step(self.params, {}, **kwargs)

    def test_accumulators_nonnegative(self):
        """Accumulators stay nonnegative."""
        rng = np.random.default_rng(7)
        for _ in range(10):
            rmsprop_step(self.params, {"theta": rng.normal(size=2)}, lr=0.1)
        assert np.all(self.params.accumulator("theta") >= 0)


class TestCheckpoint:
    """Tests for parameter checkpoints."""

    def setup_method(self):
        self.params = Params()
        rng = np.random.default_rng(8)
        self.params.add("a.w", rng.normal(size=(3, 2)))
        self.params.add("a.b", rng.normal(size=(2,)))

    def test_round_trip_exact(self, tmp_path):
        """Values come back bit for bit."""
        path = tmp_path / "p.ckpt"
        save_checkpoint(path, self.params, "toy", {"width": 2}, seed=4)
        assert path.read_bytes()[:4] == MAGIC
        other = Params()
        other.add("a.w", np.zeros((3, 2)))
        other.add("a.b", np.zeros(2))
        header = load_checkpoint(path, other, model_kind="toy", layer_sizes={"width": 2})
        assert header.seed == 4
        for name, tensor in self.params.items():
            assert np.array_equal(other[name].data, tensor.data)

    def test_kind_mismatch(self, tmp_path):
        """Loading into another model kind fails."""
        path = tmp_path / "p.ckpt"
        save_checkpoint(path, self.params, "toy", {"width": 2}, seed=0)
        with pytest.raises(CheckpointError, match="expected other"):
            load_checkpoint(path, self.params, model_kind="other")

    def test_layer_size_mismatch_names_dimension(self, tmp_path):
        """Layer-size differences name the key."""
        path = tmp_path / "p.ckpt"
        save_checkpoint(path, self.params, "toy", {"width": 2}, seed=0)
        with pytest.raises(CheckpointError, match="width: checkpoint 2 vs model 3"):
            load_checkpoint(path, self.params, layer_sizes={"width": 3})

    def test_shape_mismatch(self, tmp_path):
        """Tensor shapes must match the target collection."""
        path = tmp_path / "p.ckpt"
        save_checkpoint(path, self.params, "toy", {}, seed=0)
        other = Params()
        other.add("a.w", np.zeros((2, 2)))
        other.add("a.b", np.zeros(2))
        with pytest.raises(CheckpointError, match="a.w"):
            load_checkpoint(path, other)

    def test_not_a_checkpoint(self, tmp_path):
        """Arbitrary bytes are rejected."""
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"hello world")
        with pytest.raises(CheckpointError, match="not a poselift checkpoint"):
            read_checkpoint(path)

    def test_truncated(self, tmp_path):
        """A cut-off file is rejected."""
        path = tmp_path / "p.ckpt"
        save_checkpoint(path, self.params, "toy", {}, seed=0)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CheckpointError, match="truncated"):
            read_checkpoint(path)
