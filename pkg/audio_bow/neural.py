"""Minimal feed-forward network engine.

Dense layers with relu/sigmoid/identity activations, inverted dropout, MSE and
Huber losses, reverse-mode gradients and bias-corrected Adam. All arithmetic is
float64; parameters are stored as little-endian float32 on disk.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from .exceptions import DivergenceError, ValidationFailure
from .serialization import pack, unpack


logger = logging.getLogger(__name__)

Seed = Union[int, Sequence[int], None]


class NeuralError(ValidationFailure):
    """Exception raised for malformed networks, inputs or targets."""

    pass


class TrainingDivergedError(DivergenceError):
    """Exception raised when a loss or gradient becomes non-finite."""

    pass


class Activation(str, Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"
    IDENTITY = "identity"


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


class LossKind(str, Enum):
    MSE = "mse"
    HUBER = "huber"


@dataclass
class DenseLayer:
    """Affine map ``x @ W.T + b`` followed by an activation and optional dropout."""

    weights: np.ndarray
    bias: np.ndarray
    activation: Activation
    dropout: float = 0.0

    @property
    def in_dim(self) -> int:
        return int(self.weights.shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.weights.shape[0])


@dataclass
class DenseNet:
    """Ordered stack of dense layers."""

    layers: list[DenseLayer]

    def __post_init__(self) -> None:
        if not self.layers:
            raise NeuralError("a network needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.bias.shape != (layer.out_dim,):
                raise NeuralError(f"layer {i}: bias shape {layer.bias.shape} != ({layer.out_dim},)")
            if not 0.0 <= layer.dropout < 1.0:
                raise NeuralError(f"layer {i}: dropout {layer.dropout} outside [0, 1)")
            if i and self.layers[i - 1].out_dim != layer.in_dim:
                raise NeuralError(
                    f"layer {i} expects {layer.in_dim} inputs, previous layer emits "
                    f"{self.layers[i - 1].out_dim}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> list[np.ndarray]:
        """Weights and biases in declared order (W0, b0, W1, b1, ...)."""
        params: list[np.ndarray] = []
        for layer in self.layers:
            params.extend((layer.weights, layer.bias))
        return params

    def sub_network(self, start: int, stop: Optional[int] = None) -> "DenseNet":
        """Copy of a contiguous slice of layers."""
        return DenseNet([_copy_layer(layer) for layer in self.layers[start:stop]])

    def copy(self) -> "DenseNet":
        return self.sub_network(0)


def _copy_layer(layer: DenseLayer) -> DenseLayer:
    return DenseLayer(layer.weights.copy(), layer.bias.copy(), layer.activation, layer.dropout)


@dataclass
class ForwardTrace:
    """Everything backprop needs from a forward pass."""

    inputs: np.ndarray
    pre_activations: list[np.ndarray]
    activations: list[np.ndarray]
    masks: list[Optional[np.ndarray]]

    @property
    def output(self) -> np.ndarray:
        return self.activations[-1]


@dataclass(frozen=True)
class LossSpec:
    kind: LossKind = LossKind.MSE
    huber_delta: float = 1.0

    def __post_init__(self) -> None:
        if self.huber_delta <= 0:
            raise NeuralError(f"huber_delta must be positive, got {self.huber_delta}")


@dataclass
class LossAndGrad:
    loss: float
    grads: list[np.ndarray]
    output: np.ndarray


@dataclass
class AdamState:
    """First/second moments per parameter plus the step counter."""

    learning_rate: float
    first_moments: list[np.ndarray]
    second_moments: list[np.ndarray]
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0

    @classmethod
    def for_parameters(cls, params: Sequence[np.ndarray], learning_rate: float) -> "AdamState":
        return cls(
            learning_rate=learning_rate,
            first_moments=[np.zeros_like(p, dtype=np.float64) for p in params],
            second_moments=[np.zeros_like(p, dtype=np.float64) for p in params],
        )


def _activate(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.RELU:
        return np.maximum(z, 0.0)
    if activation is Activation.SIGMOID:
        return expit(z)
    return z


def _activation_grad(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.RELU:
        return (z > 0.0).astype(np.float64)
    if activation is Activation.SIGMOID:
        s = expit(z)
        return s * (1.0 - s)
    return np.ones_like(z)


def forward(
    net: DenseNet,
    batch: np.ndarray,
    mode: Mode = Mode.EVAL,
    rng_seed: Seed = None,
) -> ForwardTrace:
    """
    Run a batch through the network.

    Train mode draws inverted-dropout masks (kept units scaled by 1/(1-p))
    from ``rng_seed``, one layer at a time in order; eval mode applies none.

    Args:
        net: Network to evaluate
        batch: Matrix (B, input_dim)
        mode: Mode.TRAIN or Mode.EVAL
        rng_seed: Seed for the dropout masks (train mode only)

    Returns:
        ForwardTrace: Inputs, pre-activations, activations and masks per layer

    Raises:
        NeuralError: On a dimension mismatch or non-finite input
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise NeuralError(f"batch shape {x.shape} does not match input dim {net.input_dim}")
    if not np.all(np.isfinite(x)):
        raise NeuralError("batch contains non-finite values")

    mode = Mode(mode)
    rng = np.random.default_rng(rng_seed) if mode is Mode.TRAIN else None
    pre_activations: list[np.ndarray] = []
    activations: list[np.ndarray] = []
    masks: list[Optional[np.ndarray]] = []
    h = x
    for layer in net.layers:
        z = h @ layer.weights.T + layer.bias
        h = _activate(z, layer.activation)
        mask = None
        if rng is not None and layer.dropout > 0.0:
            keep = rng.random(h.shape) >= layer.dropout
            mask = keep / (1.0 - layer.dropout)
            h = h * mask
        pre_activations.append(z)
        activations.append(h)
        masks.append(mask)
    return ForwardTrace(
        inputs=x, pre_activations=pre_activations, activations=activations, masks=masks
    )


def predict(net: DenseNet, batch: np.ndarray) -> np.ndarray:
    """Eval-mode output."""
    return forward(net, batch, Mode.EVAL).output


def elementwise_loss(errors: np.ndarray, loss: LossSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-element loss values and their derivative with respect to the error."""
    if loss.kind is LossKind.MSE:
        return errors * errors, 2.0 * errors
    delta = loss.huber_delta
    magnitude = np.abs(errors)
    values = np.where(magnitude <= delta, 0.5 * errors * errors, delta * (magnitude - 0.5 * delta))
    return values, np.clip(errors, -delta, delta)


def loss_and_grad(
    net: DenseNet,
    batch: np.ndarray,
    targets: np.ndarray,
    loss: LossSpec,
    mode: Mode = Mode.TRAIN,
    seed: Seed = None,
) -> LossAndGrad:
    """
    Mean loss over batch and output dims with gradients for every parameter.

    Gradients follow ``net.parameters()`` order and reuse the dropout masks of
    the forward pass, so a fixed seed gives a fixed function for checking.

    Raises:
        NeuralError: If targets do not match the output shape
    """
    trace = forward(net, batch, mode, seed)
    y = trace.output
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != y.shape:
        raise NeuralError(f"targets shape {t.shape} does not match output shape {y.shape}")

    values, d_error = elementwise_loss(y - t, loss)
    scale = 1.0 / y.size
    total = float(np.sum(values) * scale)

    grads: list[np.ndarray] = [np.empty(0)] * (2 * len(net.layers))
    upstream = d_error * scale
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if trace.masks[i] is not None:
            upstream = upstream * trace.masks[i]
        delta = upstream * _activation_grad(trace.pre_activations[i], layer.activation)
        prev = trace.activations[i - 1] if i else trace.inputs
        grads[2 * i] = delta.T @ prev
        grads[2 * i + 1] = delta.sum(axis=0)
        if i:
            upstream = delta @ layer.weights
    return LossAndGrad(loss=total, grads=grads, output=y)


def adam_step(
    params: list[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
) -> tuple[list[np.ndarray], AdamState]:
    """
    One bias-corrected Adam update, applied in place.

    Raises:
        TrainingDivergedError: If any gradient is non-finite; nothing is updated
        NeuralError: If shapes disagree
    """
    if len(params) != len(grads) or len(params) != len(state.first_moments):
        raise NeuralError("parameter, gradient and optimizer state counts differ")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise NeuralError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(
                f"non-finite gradient at optimizer step {state.step + 1}; update rejected"
            )

    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1**t
    correction2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.first_moments, state.second_moments):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
    return params, state


def init_network(
    dims: Sequence[int],
    activations: Sequence[Activation],
    dropouts: Optional[Sequence[float]] = None,
    seed: Seed = 0,
) -> DenseNet:
    """
    Build a network with He-uniform (relu) or Glorot-uniform (other) weights.

    Args:
        dims: Layer widths including input, e.g. [80, 2048, 2048, 8]
        activations: One activation per weight layer
        dropouts: Dropout rate per weight layer (default none)
        seed: Seed for the weight draws

    Returns:
        DenseNet: Zero biases, deterministic under ``seed``
    """
    if len(dims) < 2 or any(int(d) <= 0 for d in dims):
        raise NeuralError(f"layer dims must be positive and at least two, got {list(dims)}")
    n_layers = len(dims) - 1
    if len(activations) != n_layers:
        raise NeuralError(f"need {n_layers} activations, got {len(activations)}")
    dropouts = list(dropouts) if dropouts is not None else [0.0] * n_layers
    if len(dropouts) != n_layers:
        raise NeuralError(f"need {n_layers} dropout rates, got {len(dropouts)}")

    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out, activation, rate in zip(dims[:-1], dims[1:], activations, dropouts):
        activation = Activation(activation)
        if activation is Activation.RELU:
            limit = np.sqrt(6.0 / fan_in)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights = rng.uniform(-limit, limit, size=(int(fan_out), int(fan_in)))
        layers.append(DenseLayer(weights, np.zeros(int(fan_out)), activation, float(rate)))
    return DenseNet(layers)


def train_step(
    net: DenseNet,
    state: AdamState,
    batch: np.ndarray,
    targets: np.ndarray,
    loss: LossSpec,
    seed: Seed,
) -> float:
    """
    Forward, backward and Adam update on one minibatch.

    Returns:
        The minibatch loss before the update

    Raises:
        TrainingDivergedError: If the loss or a gradient is non-finite
    """
    result = loss_and_grad(net, batch, targets, loss, Mode.TRAIN, seed)
    if not np.isfinite(result.loss):
        raise TrainingDivergedError(f"non-finite loss at optimizer step {state.step + 1}")
    adam_step(net.parameters(), result.grads, state)
    return result.loss


def net_blocks(net: DenseNet) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """Layer description and float32 parameter blocks (W0, b0, W1, b1, ...)."""
    meta = {
        "dims": [net.input_dim] + [layer.out_dim for layer in net.layers],
        "activations": [layer.activation.value for layer in net.layers],
        "dropouts": [layer.dropout for layer in net.layers],
    }
    blocks = {}
    for i, layer in enumerate(net.layers):
        blocks[f"W{i}"] = layer.weights.astype("<f4")
        blocks[f"b{i}"] = layer.bias.astype("<f4")
    return meta, blocks


def net_from_blocks(meta: dict[str, Any], blocks: dict[str, np.ndarray]) -> DenseNet:
    """Inverse of ``net_blocks``; parameters come back as float64."""
    try:
        layers = [
            DenseLayer(
                blocks[f"W{i}"].astype(np.float64),
                blocks[f"b{i}"].astype(np.float64),
                Activation(activation),
                float(rate),
            )
            for i, (activation, rate) in enumerate(zip(meta["activations"], meta["dropouts"]))
        ]
    except KeyError as e:
        raise NeuralError(f"network container is missing {e}") from e
    return DenseNet(layers)


def net_to_bytes(net: DenseNet, header: Optional[dict[str, Any]] = None) -> bytes:
    """Serialize: JSON header (dims, activations, dropout, extras) + float32 blocks."""
    meta, blocks = net_blocks(net)
    return pack({**(header or {}), "network": meta}, blocks)


def net_from_bytes(data: bytes) -> tuple[DenseNet, dict[str, Any]]:
    """Inverse of ``net_to_bytes``."""
    header, blocks = unpack(data)
    meta = header.pop("network", None)
    if meta is None:
        raise NeuralError("container holds no network")
    return net_from_blocks(meta, blocks), header
