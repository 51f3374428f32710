"""Per-family autoencoders and their bottleneck encoders."""

import logging
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional, Union

import numpy as np

from .audio_frontend import FRONTEND_CONVENTIONS
from .config_manager import AutoencoderTrainConfig
from .exceptions import ValidationFailure
from .neural import (
    Activation,
    AdamState,
    DenseNet,
    LossKind,
    LossSpec,
    TrainingDivergedError,
    init_network,
    net_blocks,
    net_from_blocks,
    predict,
    train_step,
)
from .patching import FAMILIES, PATCHING_CONVENTIONS, PatchFamily, PatchSet
from .serialization import pack, unpack


logger = logging.getLogger(__name__)

STD_FLOOR = 1e-6
MONITOR_ROWS = 2048


class EncoderBankError(ValidationFailure):
    """Exception raised for bad training data or an inconsistent bank."""

    pass


@dataclass(frozen=True)
class AutoencoderSpec:
    """
    Architecture of one autoencoder.

    Encoder ``input -> hidden -> hidden -> bottleneck`` and a mirrored decoder;
    relu hidden layers with dropout, identity bottleneck and output.
    """

    family: PatchFamily
    compression: int
    hidden_width: int = 2048
    dropout: float = 0.5

    def __post_init__(self) -> None:
        if self.compression <= 0:
            raise EncoderBankError(f"compression factor must be positive, got {self.compression}")
        if self.hidden_width <= 0:
            raise EncoderBankError(f"hidden width must be positive, got {self.hidden_width}")
        if not 0.0 <= self.dropout < 1.0:
            raise EncoderBankError(f"dropout {self.dropout} outside [0, 1)")

    @property
    def input_dim(self) -> int:
        return self.family.input_dim

    @property
    def bottleneck_dim(self) -> int:
        return max(1, int(round(self.input_dim / self.compression)))

    @property
    def encoder_dims(self) -> list[int]:
        return [self.input_dim, self.hidden_width, self.hidden_width, self.bottleneck_dim]

    @property
    def decoder_dims(self) -> list[int]:
        return [self.bottleneck_dim, self.hidden_width, self.hidden_width, self.input_dim]

    def build(self, seed: Any) -> DenseNet:
        """Untrained encoder+decoder as one six-layer network."""
        relu, ident = Activation.RELU, Activation.IDENTITY
        p = self.dropout
        return init_network(
            self.encoder_dims + self.decoder_dims[1:],
            [relu, relu, ident, relu, relu, ident],
            [p, p, 0.0, p, p, 0.0],
            seed=seed,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "family": self.family.tag,
            "compression": self.compression,
            "hidden_width": self.hidden_width,
            "dropout": self.dropout,
            "bottleneck_dim": self.bottleneck_dim,
        }


@dataclass
class EncoderModel:
    """Trained encoder half plus the standardization it was trained with."""

    spec: AutoencoderSpec
    encoder: DenseNet
    mean: np.ndarray
    std: np.ndarray
    train_mse: float = float("nan")
    heldout_mse: Optional[float] = None
    mse_history: list[float] = field(default_factory=list)

    def encode(self, patches: np.ndarray) -> np.ndarray:
        """
        Bottleneck vectors for a batch of patches.

        Args:
            patches: Array (n, input_dim) or a single vector

        Returns:
            Array (n, bottleneck_dim), or a vector for a vector input
        """
        x = np.asarray(patches, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise EncoderBankError(
                f"{self.spec.family.tag} encoder expects dim {self.spec.input_dim}, got {x.shape}"
            )
        if not np.all(np.isfinite(x)):
            raise EncoderBankError("patches contain non-finite values")
        codes = predict(self.encoder, (x - self.mean) / self.std)
        return codes[0] if single else codes

    def to_bytes(self) -> bytes:
        """Encoder parameters plus float32 mean/std blocks in one container."""
        meta, blocks = net_blocks(self.encoder)
        header = {
            "kind": "encoder",
            "autoencoder": self.spec.to_dict(),
            "network": meta,
            "conventions": {**FRONTEND_CONVENTIONS, **PATCHING_CONVENTIONS},
            "train_mse": self.train_mse,
            "heldout_mse": self.heldout_mse,
            "mse_history": self.mse_history,
        }
        blocks["mean"] = self.mean.astype("<f4")
        blocks["std"] = self.std.astype("<f4")
        return pack(header, blocks)

    @classmethod
    def from_bytes(cls, data: bytes) -> "EncoderModel":
        header, blocks = unpack(data)
        if header.get("kind") != "encoder":
            raise EncoderBankError(f"container kind {header.get('kind')!r} is not an encoder")
        spec_data = header["autoencoder"]
        spec = AutoencoderSpec(
            family=PatchFamily.from_tag(spec_data["family"]),
            compression=int(spec_data["compression"]),
            hidden_width=int(spec_data["hidden_width"]),
            dropout=float(spec_data["dropout"]),
        )
        return cls(
            spec=spec,
            encoder=net_from_blocks(header["network"], blocks),
            mean=blocks["mean"].astype(np.float64),
            std=blocks["std"].astype(np.float64),
            train_mse=float(header["train_mse"]),
            heldout_mse=header["heldout_mse"],
            mse_history=list(header["mse_history"]),
        )


def model_filename(family: PatchFamily, compression: int) -> str:
    """File name of a stored encoder, e.g. ``ae_pat_F10.model``."""
    return f"ae_{family.tag}_F{compression}.model"


def _reconstruction_mse(net: DenseNet, data: np.ndarray) -> float:
    if data.shape[0] == 0:
        return float("nan")
    return float(np.mean((predict(net, data) - data) ** 2))


def train_autoencoder(
    patches: Union[np.ndarray, Iterable[np.ndarray]],
    spec: AutoencoderSpec,
    train_cfg: AutoencoderTrainConfig,
    seed: int,
) -> EncoderModel:
    """
    Fit an autoencoder on standardized patches and keep its encoder half.

    Rows are put in a canonical (lexicographic) order first and every
    minibatch is drawn with a generator seeded by ``(seed, step)``, so the
    result does not depend on the order patches arrive in.

    Args:
        patches: Vectors of dim ``spec.input_dim``
        spec: Architecture
        train_cfg: Step budget, batch size, learning rate, held-out fraction
        seed: Seed for initialization, splits, batches and dropout

    Returns:
        EncoderModel: Encoder, standardization stats and MSE history

    Raises:
        EncoderBankError: If there is too little or malformed data
        TrainingDivergedError: If the loss becomes non-finite
    """
    x = np.asarray(patches if isinstance(patches, np.ndarray) else list(patches), dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise EncoderBankError(
            f"{spec.family.tag} autoencoder expects vectors of dim {spec.input_dim}, got {x.shape}"
        )
    if x.shape[0] < max(2, spec.bottleneck_dim):
        raise EncoderBankError(
            f"{spec.family.tag} autoencoder needs at least {max(2, spec.bottleneck_dim)} patches, "
            f"got {x.shape[0]}"
        )
    if not np.all(np.isfinite(x)):
        raise EncoderBankError("training patches contain non-finite values")

    x = x[np.lexsort(x.T[::-1])]
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), STD_FLOOR)
    z = (x - mean) / std

    n_holdout = int(z.shape[0] * train_cfg.holdout_fraction)
    if z.shape[0] - n_holdout < 1:
        n_holdout = 0
    order = np.random.default_rng([seed, 1]).permutation(z.shape[0])
    holdout, train = z[order[:n_holdout]], z[order[n_holdout:]]
    monitor = train[:MONITOR_ROWS]

    net = spec.build(seed=[seed, 2])
    state = AdamState.for_parameters(net.parameters(), train_cfg.learning_rate)
    loss = LossSpec(LossKind.MSE)
    batch_size = min(train_cfg.batch_size, train.shape[0])

    history = [_reconstruction_mse(net, monitor)]
    logger.info(
        "Training %s autoencoder F=%d (%s) on %d patches, %d steps",
        spec.family.tag,
        spec.compression,
        "-".join(str(d) for d in spec.encoder_dims),
        train.shape[0],
        train_cfg.steps,
    )
    for step in range(train_cfg.steps):
        idx = np.random.default_rng([seed, 3, step]).integers(0, train.shape[0], size=batch_size)
        batch = train[idx]
        try:
            batch_loss = train_step(net, state, batch, batch, loss, seed=[seed, 4, step])
        except TrainingDivergedError as e:
            logger.error(
                "Autoencoder %s F=%d diverged at step %d (last checkpoint MSE %.6g)",
                spec.family.tag,
                spec.compression,
                step,
                history[-1],
            )
            raise TrainingDivergedError(
                f"{spec.family.tag} autoencoder F={spec.compression} diverged at step {step}: {e}"
            ) from e
        if (step + 1) % train_cfg.eval_every == 0 or step + 1 == train_cfg.steps:
            history.append(_reconstruction_mse(net, monitor))
            logger.debug(
                "%s F=%d step %d: batch loss %.6g, train MSE %.6g",
                spec.family.tag,
                spec.compression,
                step + 1,
                batch_loss,
                history[-1],
            )

    heldout = _reconstruction_mse(net, holdout) if n_holdout else None
    logger.info(
        "Trained %s autoencoder F=%d: train MSE %.6g, held-out MSE %s",
        spec.family.tag,
        spec.compression,
        history[-1],
        "n/a" if heldout is None else f"{heldout:.6g}",
    )
    return EncoderModel(
        spec=spec,
        encoder=net.sub_network(0, 3),
        mean=mean,
        std=std,
        train_mse=history[-1],
        heldout_mse=heldout,
        mse_history=history,
    )


def encode(model: EncoderModel, patch: np.ndarray) -> np.ndarray:
    """Bottleneck vector for one patch (or a batch)."""
    return model.encode(patch)


class EncoderBank:
    """The four family encoders trained at one compression factor."""

    def __init__(self, models: Mapping[PatchFamily, EncoderModel]) -> None:
        missing = [f.tag for f in FAMILIES if f not in models]
        if missing:
            raise EncoderBankError(f"encoder bank is missing families: {missing}")
        factors = {m.spec.compression for m in models.values()}
        if len(factors) != 1:
            raise EncoderBankError(f"encoder bank mixes compression factors {sorted(factors)}")
        for family, model in models.items():
            if model.spec.family is not family:
                raise EncoderBankError(
                    f"model for {model.spec.family.tag} registered under {family.tag}"
                )
        self.models = dict(models)
        self.compression = factors.pop()

    def __getitem__(self, family: PatchFamily) -> EncoderModel:
        return self.models[family]

    def bottleneck_dims(self) -> dict[PatchFamily, int]:
        return {f: self.models[f].spec.bottleneck_dim for f in FAMILIES}

    def encode_chunk(self, patch_set: PatchSet) -> dict[PatchFamily, np.ndarray]:
        """Encode every patch of one chunk, order preserved within each family."""
        return {family: self.models[family].encode(patch_set[family]) for family in FAMILIES}

    def encode_family(self, family: PatchFamily, vectors: np.ndarray) -> np.ndarray:
        """Encode a flat batch of one family's patches."""
        return self.models[family].encode(vectors)


def encode_chunk(bank: EncoderBank, patch_set: PatchSet) -> dict[PatchFamily, np.ndarray]:
    """Encode the 143 patches of one chunk, grouped by family."""
    return bank.encode_chunk(patch_set)
