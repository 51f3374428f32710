"""MLP classification head over bag-of-codewords counts."""

import logging
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence, Union

import numpy as np

from .codebook import FeatureVector, mask_counts
from .config_manager import HeadTrainConfig
from .exceptions import ValidationFailure
from .metrics import EvalTable, MetricsError, macro_map
from .neural import (
    Activation,
    AdamState,
    DenseNet,
    LossKind,
    LossSpec,
    TrainingDivergedError,
    init_network,
    net_from_bytes,
    net_to_bytes,
    predict,
    train_step,
)
from .patching import PATCHES_PER_CHUNK


logger = logging.getLogger(__name__)

COUNT_SCALE = float(PATCHES_PER_CHUNK)

FeatureInput = Union[FeatureVector, np.ndarray]


class ClassifierError(ValidationFailure):
    """Exception raised for inconsistent head inputs or labels."""

    pass


@dataclass(frozen=True)
class HeadSpec:
    """Two equal relu hidden layers with dropout, sigmoid outputs."""

    input_dim: int
    num_classes: int
    hidden_width: int = 512
    dropout: float = 0.4

    def __post_init__(self) -> None:
        if min(self.input_dim, self.num_classes, self.hidden_width) <= 0:
            raise ClassifierError(f"head dimensions must be positive: {self}")
        if not 0.0 <= self.dropout < 1.0:
            raise ClassifierError(f"head dropout {self.dropout} outside [0, 1)")

    def build(self, seed: Any) -> DenseNet:
        w = self.hidden_width
        return init_network(
            [self.input_dim, w, w, self.num_classes],
            [Activation.RELU, Activation.RELU, Activation.SIGMOID],
            [self.dropout, self.dropout, 0.0],
            seed=seed,
        )


@dataclass
class ClassificationHead:
    """Trained head plus the featurization settings it expects."""

    spec: HeadSpec
    net: DenseNet
    codebook_size: Optional[int] = None
    compression: Optional[int] = None
    mask_p: float = 0.0
    count_scale: float = COUNT_SCALE
    best_epoch: int = 0
    best_val_map: Optional[float] = None
    val_history: list[float] = field(default_factory=list)

    def to_bytes(self) -> bytes:
        header = {
            "kind": "head",
            "head": {
                "input_dim": self.spec.input_dim,
                "num_classes": self.spec.num_classes,
                "hidden_width": self.spec.hidden_width,
                "dropout": self.spec.dropout,
            },
            "codebook_size": self.codebook_size,
            "compression": self.compression,
            "mask_p": self.mask_p,
            "count_scale": self.count_scale,
            "best_epoch": self.best_epoch,
            "best_val_map": self.best_val_map,
            "val_history": self.val_history,
        }
        return net_to_bytes(self.net, header)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ClassificationHead":
        net, header = net_from_bytes(data)
        if header.get("kind") != "head":
            raise ClassifierError(f"container kind {header.get('kind')!r} is not a head")
        return cls(
            spec=HeadSpec(**header["head"]),
            net=net,
            codebook_size=header["codebook_size"],
            compression=header["compression"],
            mask_p=float(header["mask_p"]),
            count_scale=float(header["count_scale"]),
            best_epoch=int(header["best_epoch"]),
            best_val_map=header["best_val_map"],
            val_history=list(header["val_history"]),
        )


def _as_matrix(features: Union[FeatureInput, Sequence[FeatureInput]]) -> np.ndarray:
    if isinstance(features, FeatureVector):
        return features.counts[None, :].astype(np.float64)
    if isinstance(features, np.ndarray):
        return np.atleast_2d(features).astype(np.float64)
    rows = [f.counts if isinstance(f, FeatureVector) else np.asarray(f) for f in features]
    if not rows:
        raise ClassifierError("no feature vectors given")
    return np.stack(rows).astype(np.float64)


def labels_to_matrix(label_lists: Sequence[Sequence[int]], num_classes: int) -> np.ndarray:
    """Multi-hot matrix from per-row class index lists."""
    out = np.zeros((len(label_lists), num_classes))
    for row, labels in enumerate(label_lists):
        for label in labels:
            if not 0 <= label < num_classes:
                raise ClassifierError(f"label index {label} outside [0, {num_classes})")
            out[row, label] = 1.0
    return out


def train_head(
    features: np.ndarray,
    labels: np.ndarray,
    spec: HeadSpec,
    mask_p: float,
    train_cfg: HeadTrainConfig,
    seed: int,
    validation: Optional[tuple[np.ndarray, np.ndarray]] = None,
    codebook_size: Optional[int] = None,
    compression: Optional[int] = None,
) -> ClassificationHead:
    """
    Fit the head with Adam on Huber(sigmoid output - target).

    Counts are masked with probability ``mask_p`` afresh every epoch, then
    divided by 143. With a validation split, training stops after
    ``patience`` epochs without a better chunk-level validation mAP and the
    best epoch's weights are returned.

    Args:
        features: Counts (n, 4*D)
        labels: Binary targets (n, num_classes)
        spec: Head architecture
        mask_p: Input masking probability
        train_cfg: Optimizer and stopping settings
        seed: Seed for initialization, shuffling, masking and dropout
        validation: Optional (features, labels) for early stopping

    Returns:
        ClassificationHead: Trained head

    Raises:
        ClassifierError: On empty or inconsistent data
        TrainingDivergedError: If the loss becomes non-finite
    """
    x = _as_matrix(features)
    y = np.asarray(labels, dtype=np.float64)
    if x.shape[0] == 0:
        raise ClassifierError("training split is empty")
    if x.shape[1] != spec.input_dim or y.shape != (x.shape[0], spec.num_classes):
        raise ClassifierError(
            f"features {x.shape} / labels {y.shape} do not fit head "
            f"({spec.input_dim} -> {spec.num_classes})"
        )
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ClassifierError("labels must be binary")
    if not 0.0 <= mask_p <= 1.0:
        raise ClassifierError(f"mask_p must be in [0, 1], got {mask_p}")

    val_x = val_y = None
    if validation is not None:
        val_x = _as_matrix(validation[0]) / COUNT_SCALE
        val_y = np.asarray(validation[1], dtype=np.float64)
        if val_x.shape[0] == 0:
            raise ClassifierError("validation split is empty")

    net = spec.build(seed=[seed, 10])
    state = AdamState.for_parameters(net.parameters(), train_cfg.learning_rate)
    loss = LossSpec(LossKind.HUBER, train_cfg.huber_delta)
    n = x.shape[0]

    best_net = net.copy()
    best_map: Optional[float] = None
    best_epoch = 0
    history: list[float] = []
    stale = 0
    logger.info(
        "Training head %d-%d-%d-%d (dropout %.2f, mask_p %.2f) on %d chunks",
        spec.input_dim,
        spec.hidden_width,
        spec.hidden_width,
        spec.num_classes,
        spec.dropout,
        mask_p,
        n,
    )
    for epoch in range(train_cfg.max_epochs):
        order = np.random.default_rng([seed, 11, epoch]).permutation(n)
        inputs = x if mask_p == 0.0 else mask_counts(x, mask_p, seed=[seed, 12, epoch])
        inputs = inputs / COUNT_SCALE
        epoch_loss = 0.0
        for b, start in enumerate(range(0, n, train_cfg.batch_size)):
            idx = order[start : start + train_cfg.batch_size]
            try:
                epoch_loss += train_step(
                    net, state, inputs[idx], y[idx], loss, seed=[seed, 13, epoch, b]
                ) * len(idx)
            except TrainingDivergedError as e:
                logger.error("Head diverged in epoch %d batch %d", epoch, b)
                raise TrainingDivergedError(f"head diverged in epoch {epoch}: {e}") from e

        if val_x is None:
            best_net, best_epoch = net, epoch
            continue

        val_map = _safe_map(predict(net, val_x), val_y)
        history.append(val_map)
        logger.debug("Epoch %d: train loss %.6g, val mAP %.4f", epoch, epoch_loss / n, val_map)
        if best_map is None or val_map > best_map:
            best_map, best_epoch, best_net, stale = val_map, epoch, net.copy(), 0
        else:
            stale += 1
            if stale >= train_cfg.patience:
                logger.info("Early stop after epoch %d (best %d)", epoch, best_epoch)
                break

    logger.info(
        "Trained head: best epoch %d, validation mAP %s",
        best_epoch,
        "n/a" if best_map is None else f"{best_map:.4f}",
    )
    return ClassificationHead(
        spec=spec,
        net=best_net,
        codebook_size=codebook_size,
        compression=compression,
        mask_p=mask_p,
        best_epoch=best_epoch,
        best_val_map=best_map,
        val_history=history,
    )


def _safe_map(scores: np.ndarray, labels: np.ndarray) -> float:
    try:
        return macro_map(EvalTable(scores=scores, labels=labels))
    except MetricsError:
        return 0.0


def predict_chunks(
    head: ClassificationHead, features: Union[np.ndarray, Sequence[FeatureInput]]
) -> np.ndarray:
    """Eval-mode probabilities for many chunks, array (n, num_classes)."""
    x = _as_matrix(features)
    if x.shape[1] != head.spec.input_dim:
        raise ClassifierError(f"head expects {head.spec.input_dim} features, got {x.shape[1]}")
    return predict(head.net, x / head.count_scale)


def predict_chunk(head: ClassificationHead, fv: FeatureInput) -> np.ndarray:
    """Class probabilities for one chunk; no masking, no dropout."""
    return predict_chunks(head, _as_matrix(fv))[0]


def order_free_mean(rows: np.ndarray) -> np.ndarray:
    """Row mean that does not depend on row order (rows summed in sorted order)."""
    rows = np.asarray(rows, dtype=np.float64)
    return rows[np.lexsort(rows.T[::-1])].mean(axis=0)


def predict_clip(head: ClassificationHead, chunk_features: Sequence[FeatureInput]) -> np.ndarray:
    """
    Mean of the per-chunk probability vectors of one clip.

    Each chunk is evaluated on its own so the result is independent of chunk
    order bit for bit.
    """
    if len(chunk_features) == 0:
        raise ClassifierError("a clip needs at least one chunk")
    matrix = _as_matrix(chunk_features)
    probs = np.stack([predict_chunks(head, row[None, :])[0] for row in matrix])
    return order_free_mean(probs)


def clip_probabilities(chunk_probs: np.ndarray, clip_index: np.ndarray) -> np.ndarray:
    """
    Average chunk probabilities per clip.

    Args:
        chunk_probs: Array (n_chunks, num_classes)
        clip_index: Clip ordinal of each chunk, values 0..n_clips-1

    Returns:
        Array (n_clips, num_classes)
    """
    clip_index = np.asarray(clip_index)
    n_clips = int(clip_index.max()) + 1 if clip_index.size else 0
    out = np.empty((n_clips, chunk_probs.shape[1]))
    for clip in range(n_clips):
        rows = chunk_probs[clip_index == clip]
        if rows.shape[0] == 0:
            raise ClassifierError(f"clip {clip} has no chunks")
        out[clip] = order_free_mean(rows)
    return out
