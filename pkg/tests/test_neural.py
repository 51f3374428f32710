"""Tests for neural module."""

import numpy as np
import pytest

from audio_bow.classifier import HeadSpec
from audio_bow.encoder_bank import AutoencoderSpec
from audio_bow.neural import (
    Activation,
    AdamState,
    DenseLayer,
    DenseNet,
    LossKind,
    LossSpec,
    Mode,
    NeuralError,
    TrainingDivergedError,
    adam_step,
    elementwise_loss,
    forward,
    init_network,
    loss_and_grad,
    net_from_bytes,
    net_to_bytes,
    predict,
    train_step,
)
from audio_bow.patching import PatchFamily


def _gradient_check(
    net: DenseNet,
    x: np.ndarray,
    t: np.ndarray,
    loss: LossSpec,
    mode: Mode,
    seed: int,
    samples: int = 40,
) -> None:
    """Compare analytic gradients with central differences at sampled coordinates."""
    analytic = loss_and_grad(net, x, t, loss, mode, seed).grads
    rng = np.random.default_rng(seed)
    h = 1e-5
    for p, g in zip(net.parameters(), analytic):
        flat = p.reshape(-1)
        for idx in rng.choice(flat.size, size=min(samples, flat.size), replace=False):
            original = flat[idx]
            flat[idx] = original + h
            up = loss_and_grad(net, x, t, loss, mode, seed).loss
            flat[idx] = original - h
            down = loss_and_grad(net, x, t, loss, mode, seed).loss
            flat[idx] = original
            numeric = (up - down) / (2.0 * h)
            exact = g.reshape(-1)[idx]
            scale = max(abs(numeric) + abs(exact), 1e-8)
            assert abs(numeric - exact) / scale < 1e-4 or abs(numeric - exact) < 1e-9


class TestForward:
    """Test cases for the forward pass."""

    def test_identity_layer(self) -> None:
        """Test a hand-set affine layer."""
        weights = np.array([[1.0, 2.0], [3.0, 4.0]])
        net = DenseNet([DenseLayer(weights, np.array([1.0, -1.0]), Activation.IDENTITY)])
        np.testing.assert_allclose(predict(net, np.array([[1.0, 1.0]])), [[4.0, 6.0]])

    def test_relu_and_sigmoid(self) -> None:
        """Test relu clips negatives and sigmoid maps zero to one half."""
        relu = DenseNet([DenseLayer(np.array([[1.0, -1.0]]), np.zeros(1), Activation.RELU)])
        assert predict(relu, np.array([[1.0, 2.0]]))[0, 0] == 0.0
        assert predict(relu, np.array([[3.0, 1.0]]))[0, 0] == 2.0
        sig = DenseNet([DenseLayer(np.zeros((1, 2)), np.zeros(1), Activation.SIGMOID)])
        assert predict(sig, np.array([[5.0, -5.0]]))[0, 0] == pytest.approx(0.5)

    def test_eval_ignores_dropout(self) -> None:
        """Test eval mode is deterministic and mask-free."""
        net = init_network([6, 16, 3], [Activation.RELU, Activation.IDENTITY], [0.5, 0.0], seed=1)
        x = np.random.default_rng(0).standard_normal((5, 6))
        plain = net.copy()
        plain.layers[0].dropout = 0.0
        np.testing.assert_array_equal(predict(net, x), predict(plain, x))
        trace = forward(net, x, Mode.EVAL, rng_seed=123)
        assert all(m is None for m in trace.masks)

    def test_inverted_dropout_masks(self) -> None:
        """Test train masks are 0 or 1/(1-p) and keep the expected fraction."""
        net = DenseNet([DenseLayer(np.eye(4), np.zeros(4), Activation.IDENTITY, dropout=0.25)])
        x = np.ones((5000, 4))
        trace = forward(net, x, Mode.TRAIN, rng_seed=0)
        mask = trace.masks[0]
        assert set(np.unique(mask)) <= {0.0, 1.0 / 0.75}
        assert np.mean(mask > 0) == pytest.approx(0.75, abs=0.02)
        assert np.mean(trace.output) == pytest.approx(1.0, abs=0.03)

    def test_train_masks_depend_on_seed(self) -> None:
        """Test equal seeds give equal masks."""
        net = init_network([4, 8, 2], [Activation.RELU, Activation.SIGMOID], [0.3, 0.0], seed=0)
        x = np.random.default_rng(1).standard_normal((10, 4))
        a = forward(net, x, Mode.TRAIN, rng_seed=[4, 2]).output
        b = forward(net, x, Mode.TRAIN, rng_seed=[4, 2]).output
        np.testing.assert_array_equal(a, b)

    def test_bad_input_rejected(self) -> None:
        """Test wrong width and non-finite input raise NeuralError."""
        net = init_network([3, 2], [Activation.IDENTITY])
        with pytest.raises(NeuralError):
            predict(net, np.zeros((2, 4)))
        with pytest.raises(NeuralError):
            predict(net, np.array([[0.0, np.nan, 1.0]]))

    def test_layer_chain_validated(self) -> None:
        """Test mismatched consecutive layers are rejected."""
        with pytest.raises(NeuralError):
            DenseNet(
                [
                    DenseLayer(np.zeros((4, 3)), np.zeros(4), Activation.RELU),
                    DenseLayer(np.zeros((2, 5)), np.zeros(2), Activation.IDENTITY),
                ]
            )


class TestLosses:
    """Test cases for elementwise losses."""

    def test_huber_example(self) -> None:
        """Test Huber with delta 1 at error 2 is 1.5."""
        values, grads = elementwise_loss(np.array([2.0, -0.5]), LossSpec(LossKind.HUBER, 1.0))
        np.testing.assert_allclose(values, [1.5, 0.125])
        np.testing.assert_allclose(grads, [1.0, -0.5])

    def test_huber_continuous_at_delta(self) -> None:
        """Test both branches meet at |e| = delta."""
        spec = LossSpec(LossKind.HUBER, 0.7)
        below, _ = elementwise_loss(np.array([0.7 - 1e-9]), spec)
        above, _ = elementwise_loss(np.array([0.7 + 1e-9]), spec)
        assert below[0] == pytest.approx(above[0], abs=1e-8)
        assert below[0] == pytest.approx(0.5 * 0.7**2, abs=1e-8)

    def test_mse(self) -> None:
        """Test MSE is the squared error with derivative 2e."""
        values, grads = elementwise_loss(np.array([3.0]), LossSpec())
        assert values[0] == 9.0
        assert grads[0] == 6.0

    def test_invalid_delta(self) -> None:
        """Test a non-positive Huber delta is rejected."""
        with pytest.raises(NeuralError):
            LossSpec(LossKind.HUBER, 0.0)

    def test_target_shape_checked(self) -> None:
        """Test targets must match the output shape."""
        net = init_network([3, 2], [Activation.IDENTITY])
        with pytest.raises(NeuralError):
            loss_and_grad(net, np.zeros((4, 3)), np.zeros((4, 3)), LossSpec())


class TestGradients:
    """Test cases comparing backprop with finite differences."""

    @pytest.mark.parametrize("kind", [LossKind.MSE, LossKind.HUBER])
    def test_autoencoder_shaped_net(self, kind: LossKind) -> None:
        """Test relu-relu-identity autoencoder gradients."""
        half = [Activation.RELU, Activation.RELU, Activation.IDENTITY]
        net = init_network([10, 12, 12, 3, 12, 12, 10], half + half, seed=2)
        x = np.random.default_rng(3).standard_normal((7, 10))
        _gradient_check(net, x, x, LossSpec(kind, 0.5), Mode.EVAL, seed=5)

    @pytest.mark.parametrize("kind", [LossKind.MSE, LossKind.HUBER])
    def test_head_shaped_net_with_dropout(self, kind: LossKind) -> None:
        """Test relu-relu-sigmoid head gradients under fixed dropout masks."""
        net = init_network(
            [16, 20, 20, 4],
            [Activation.RELU, Activation.RELU, Activation.SIGMOID],
            [0.3, 0.3, 0.0],
            seed=4,
        )
        rng = np.random.default_rng(6)
        x = rng.random((9, 16))
        t = (rng.random((9, 4)) < 0.4).astype(np.float64)
        _gradient_check(net, x, t, LossSpec(kind, 0.2), Mode.TRAIN, seed=8)

    def test_gradient_order_matches_parameters(self) -> None:
        """Test gradients come back in W0, b0, W1, b1 order."""
        net = init_network([3, 5, 2], [Activation.RELU, Activation.IDENTITY], seed=0)
        grads = loss_and_grad(net, np.ones((2, 3)), np.zeros((2, 2)), LossSpec()).grads
        assert [g.shape for g in grads] == [p.shape for p in net.parameters()]


@pytest.mark.slow
class TestGradientsFullSize:
    """Finite-difference checks on the architectures the pipeline builds."""

    @pytest.mark.parametrize("compression", [10, 20])
    @pytest.mark.parametrize("family", list(PatchFamily))
    @pytest.mark.parametrize("mode", [Mode.EVAL, Mode.TRAIN])
    def test_autoencoders(self, family: PatchFamily, compression: int, mode: Mode) -> None:
        """Test every family's autoencoder at both compression factors."""
        net = AutoencoderSpec(family, compression).build(seed=1)
        x = np.random.default_rng(2).standard_normal((3, family.input_dim))
        for kind in (LossKind.MSE, LossKind.HUBER):
            _gradient_check(net, x, x, LossSpec(kind, 1.0), mode, seed=3, samples=4)

    @pytest.mark.parametrize("width", [256, 4096])
    @pytest.mark.parametrize("mode", [Mode.EVAL, Mode.TRAIN])
    def test_heads(self, width: int, mode: Mode) -> None:
        """Test heads at the narrowest and widest grid widths."""
        net = HeadSpec(input_dim=4 * 256, num_classes=200, hidden_width=width).build(seed=4)
        rng = np.random.default_rng(5)
        x = rng.integers(0, 4, size=(3, 4 * 256)) / 143.0
        t = (rng.random((3, 200)) < 0.05).astype(np.float64)
        for kind in (LossKind.MSE, LossKind.HUBER):
            _gradient_check(net, x, t, LossSpec(kind, 1.0), mode, seed=6, samples=4)


class TestAdam:
    """Test cases for the optimizer."""

    def test_zero_gradient_leaves_parameters(self) -> None:
        """Test a zero gradient does not move anything."""
        params = [np.array([1.0, -2.0]), np.array([[0.5]])]
        state = AdamState.for_parameters(params, learning_rate=0.1)
        adam_step(params, [np.zeros(2), np.zeros((1, 1))], state)
        np.testing.assert_array_equal(params[0], [1.0, -2.0])
        np.testing.assert_array_equal(params[1], [[0.5]])
        assert state.step == 1

    def test_constant_gradient_moves_by_learning_rate(self) -> None:
        """Test bias correction makes each step close to lr * sign(g)."""
        params = [np.array([0.0, 0.0])]
        state = AdamState.for_parameters(params, learning_rate=0.1)
        for step in range(1, 4):
            adam_step(params, [np.array([3.0, -0.2])], state)
            np.testing.assert_allclose(params[0], [-0.1 * step, 0.1 * step], atol=1e-6)

    def test_non_finite_gradient_rejected(self) -> None:
        """Test a NaN gradient raises and leaves the parameters alone."""
        params = [np.array([1.0])]
        state = AdamState.for_parameters(params, learning_rate=0.1)
        with pytest.raises(TrainingDivergedError):
            adam_step(params, [np.array([np.nan])], state)
        assert params[0][0] == 1.0
        assert state.step == 0

    def test_training_is_deterministic(self) -> None:
        """Test equal seeds give bit-identical parameters after training."""
        rng = np.random.default_rng(0)
        x = rng.standard_normal((32, 5))
        t = x @ rng.standard_normal((5, 2))

        def run() -> DenseNet:
            net = init_network([5, 8, 2], [Activation.RELU, Activation.IDENTITY], [0.2, 0.0], 3)
            state = AdamState.for_parameters(net.parameters(), 0.01)
            for step in range(20):
                train_step(net, state, x, t, LossSpec(), seed=[3, step])
            return net

        for a, b in zip(run().parameters(), run().parameters()):
            np.testing.assert_array_equal(a, b)

    def test_training_reduces_loss(self) -> None:
        """Test a linear target is learned."""
        rng = np.random.default_rng(1)
        x = rng.standard_normal((64, 4))
        t = x @ rng.standard_normal((4, 1))
        net = init_network([4, 1], [Activation.IDENTITY], seed=0)
        state = AdamState.for_parameters(net.parameters(), 0.05)
        first = train_step(net, state, x, t, LossSpec(), seed=0)
        for step in range(300):
            last = train_step(net, state, x, t, LossSpec(), seed=step)
        assert last < 0.01 * first


class TestInit:
    """Test cases for weight initialization."""

    def test_he_uniform_for_relu(self) -> None:
        """Test relu layers draw within sqrt(6/fan_in) with variance near 2/fan_in."""
        net = init_network([200, 300], [Activation.RELU], seed=0)
        w = net.layers[0].weights
        assert w.shape == (300, 200)
        assert np.max(np.abs(w)) <= np.sqrt(6.0 / 200)
        assert np.var(w) == pytest.approx(2.0 / 200, rel=0.05)
        np.testing.assert_array_equal(net.layers[0].bias, 0.0)

    def test_glorot_uniform_otherwise(self) -> None:
        """Test non-relu layers use the Glorot limit."""
        net = init_network([100, 50], [Activation.SIGMOID], seed=0)
        assert np.max(np.abs(net.layers[0].weights)) <= np.sqrt(6.0 / 150)

    def test_seeded(self) -> None:
        """Test the same seed gives the same weights."""
        a = init_network([4, 4], [Activation.RELU], seed=[9, 1])
        b = init_network([4, 4], [Activation.RELU], seed=[9, 1])
        np.testing.assert_array_equal(a.layers[0].weights, b.layers[0].weights)

    def test_bad_dims(self) -> None:
        """Test invalid layer descriptions raise NeuralError."""
        with pytest.raises(NeuralError):
            init_network([4], [])
        with pytest.raises(NeuralError):
            init_network([4, 2], [Activation.RELU, Activation.RELU])
        with pytest.raises(NeuralError):
            init_network([4, 2], [Activation.RELU], [1.0])


class TestPersistence:
    """Test cases for network serialization."""

    def test_bytes_round_trip(self) -> None:
        """Test a saved network predicts like the float32-rounded original."""
        net = init_network([6, 7, 2], [Activation.RELU, Activation.SIGMOID], [0.4, 0.0], seed=2)
        restored, header = net_from_bytes(net_to_bytes(net, {"kind": "test", "extra": 3}))
        assert header == {"kind": "test", "extra": 3}
        assert restored.layers[0].dropout == pytest.approx(0.4)
        assert [layer.activation for layer in restored.layers] == [
            Activation.RELU,
            Activation.SIGMOID,
        ]
        x = np.random.default_rng(0).standard_normal((3, 6))
        np.testing.assert_allclose(predict(restored, x), predict(net, x), atol=1e-5)
        assert restored.layers[0].weights.dtype == np.float64
