"""Stage orchestration: chunks -> autoencoders -> codebooks -> features -> head -> eval.

Every stage output is an artifact keyed by the hash of its own settings and
the keys of its upstream artifacts, so downstream work never changes an
upstream key and reruns with the same config are cache hits.
"""

import json
import logging
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from .artifact_store import ArtifactRef, ArtifactStore, config_hash
from .audio_frontend import FRONTEND_CONVENTIONS, load_chunks
from .classifier import (
    ClassificationHead,
    HeadSpec,
    clip_probabilities,
    labels_to_matrix,
    predict_chunks,
    train_head,
)
from .codebook import Codebook, CodebookSet, fit_kmeans
from .config_manager import ConfigError, RunConfig
from .encoder_bank import (
    AutoencoderSpec,
    EncoderBank,
    EncoderModel,
    model_filename,
    train_autoencoder,
)
from .exceptions import ValidationFailure
from .manifest import DatasetManifest, ingest
from .metrics import EvalTable, NoPositivesError, write_ap_reports
from .patching import FAMILIES, PATCHES_PER_CHUNK, PATCHING_CONVENTIONS, PatchFamily, family_vectors
from .serialization import pack, unpack


logger = logging.getLogger(__name__)

STAGES = ("train-ae", "fit-codebook", "featurize", "train-head", "eval")
EVAL_SPLITS = ("val", "test")
ENCODE_BATCH = 256

# (files, metrics) of a freshly built artifact
StageBuilder = Callable[[], tuple[dict[str, bytes], dict[str, Any]]]

REFERENCE_TARGETS = {
    "val_chunk_map": 0.35,
    "val_chunk_map_mask_0.35": 0.38,
    "clip_map": 0.44,
}


class ConfigMismatchError(ValidationFailure):
    """Artifacts from incompatible configurations were combined."""

    pass


class PipelineError(ValidationFailure):
    """Exception raised for a malformed dataset or stage request."""

    pass


@dataclass
class ChunkTable:
    """All spectrogram chunks of a manifest, in manifest order."""

    values: np.ndarray
    clip_index: np.ndarray
    clip_ids: list[str]

    def rows_for(self, clip_ids: list[str]) -> tuple[np.ndarray, np.ndarray]:
        """Row indices of the given clips and each row's ordinal in ``clip_ids``."""
        position = {clip_id: i for i, clip_id in enumerate(clip_ids)}
        owner = np.array(
            [position.get(self.clip_ids[c], -1) for c in self.clip_index], dtype=np.int64
        )
        rows = np.flatnonzero(owner >= 0)
        return rows, owner[rows]


@dataclass
class StageReport:
    """Outcome of one stage run."""

    stage: str
    ref: ArtifactRef
    cached: bool
    seconds: float
    metrics: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "stage": self.stage,
            "artifact": str(self.ref),
            "cached": self.cached,
            "seconds": round(self.seconds, 3),
            "metrics": self.metrics,
        }


@dataclass
class SplitFeatures:
    counts: np.ndarray
    clip_index: np.ndarray
    clip_ids: list[str]


class Pipeline:
    """
    Runs the stages of one RunConfig against one ArtifactStore.

    Args:
        config: Run configuration (manifest path, grid cell, budgets, seed)
        store: Artifact store
        manifest: Pre-ingested manifest; read from ``config.manifest_path``
            when omitted
    """

    def __init__(
        self,
        config: RunConfig,
        store: ArtifactStore,
        manifest: Optional[DatasetManifest] = None,
    ) -> None:
        if manifest is None:
            if not config.manifest_path:
                raise ConfigError("manifest_path is required to run pipeline stages")
            manifest = ingest(config.manifest_path, config.vocabulary_path)
        self.config = config
        self.store = store
        self.manifest = manifest
        self._chunks: Optional[ChunkTable] = None

    # Artifact keys

    def chunks_ref(self) -> ArtifactRef:
        return ArtifactRef(
            "chunks",
            config_hash({"manifest": self.manifest.content_hash, "frontend": FRONTEND_CONVENTIONS}),
        )

    def autoencoder_ref(self) -> ArtifactRef:
        cfg = self.config
        return ArtifactRef(
            "autoencoders",
            config_hash(
                {
                    "manifest": self.manifest.content_hash,
                    "compression": cfg.compression_factor,
                    "autoencoder": cfg.autoencoder.model_dump(),
                    "conventions": {**FRONTEND_CONVENTIONS, **PATCHING_CONVENTIONS},
                    "seed": cfg.seed,
                }
            ),
        )

    def codebook_ref(self) -> ArtifactRef:
        cfg = self.config
        return ArtifactRef(
            "codebooks",
            config_hash(
                {
                    "autoencoders": self.autoencoder_ref().key,
                    "codebook_size": cfg.codebook_size,
                    "kmeans": cfg.kmeans.model_dump(),
                    "seed": cfg.seed,
                }
            ),
        )

    def features_ref(self) -> ArtifactRef:
        return ArtifactRef("features", config_hash({"codebooks": self.codebook_ref().key}))

    def head_ref(self) -> ArtifactRef:
        if self.config.head_artifact:
            return ArtifactRef("heads", self.config.head_artifact)
        cfg = self.config
        return ArtifactRef(
            "heads",
            config_hash(
                {
                    "features": self.features_ref().key,
                    "head_width": cfg.head_width,
                    "head_dropout": cfg.head_dropout,
                    "mask_p": cfg.mask_p,
                    "head": cfg.head.model_dump(),
                    "seed": cfg.seed,
                }
            ),
        )

    def eval_ref(self) -> ArtifactRef:
        return ArtifactRef(
            "eval",
            config_hash({"head": self.head_ref().key, "features": self.features_ref().key}),
        )

    def _stage_config(self) -> dict[str, Any]:
        return {**self.config.model_dump(mode="json"), "manifest_hash": self.manifest.content_hash}

    # Chunk cache

    def chunks(self) -> ChunkTable:
        """Spectrogram chunks of every clip, computed once per manifest."""
        if self._chunks is not None:
            return self._chunks
        ref = self.chunks_ref()
        if not self.store.exists(ref):
            started = time.perf_counter()
            entries = self.manifest.entries
            logger.info("Computing spectrogram chunks for %d clips", len(entries))
            with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
                per_clip = list(pool.map(lambda e: load_chunks(e.path, e.clip_id), entries))
            values = np.concatenate(per_clip).astype("<f4")
            clip_index = np.concatenate(
                [np.full(len(c), i, dtype="<i4") for i, c in enumerate(per_clip)]
            )
            header = {"kind": "chunks", "clip_ids": [e.clip_id for e in entries]}
            data = pack(header, {"values": values, "clip_index": clip_index})
            self.store.put(ref, {"chunks.bin": data}, {"manifest_hash": self.manifest.content_hash})
            self.store.record_timing("chunks", ref, time.perf_counter() - started, cached=False)
        header, blocks = unpack(self.store.get(ref, "chunks.bin"))
        self._chunks = ChunkTable(
            values=blocks["values"],
            clip_index=blocks["clip_index"].astype(np.int64),
            clip_ids=list(header["clip_ids"]),
        )
        return self._chunks

    def _split_chunks(self, split: str) -> tuple[np.ndarray, np.ndarray, list[str]]:
        table = self.chunks()
        clip_ids = [e.clip_id for e in self.manifest.split(split)]
        rows, owner = table.rows_for(clip_ids)
        return table.values[rows], owner, clip_ids

    # Stage plumbing

    def _run(self, stage: str, ref: ArtifactRef, build: StageBuilder) -> StageReport:
        started = time.perf_counter()
        if self.store.exists(ref):
            logger.info("Stage %s: artifact %s already present", stage, ref)
            seconds = time.perf_counter() - started
            self.store.record_timing(stage, ref, seconds, cached=True)
            metrics = self.store.meta(ref)["config"].get("metrics", {})
            return StageReport(stage, ref, True, seconds, metrics)

        logger.info("Stage %s: building %s", stage, ref)
        files, metrics = build()
        self.store.put(ref, files, {**self._stage_config(), "metrics": metrics})
        seconds = time.perf_counter() - started
        self.store.record_timing(stage, ref, seconds, cached=False)
        logger.info("Stage %s finished in %.1fs", stage, seconds)
        return StageReport(stage, ref, False, seconds, metrics)

    def run_stage(self, stage: str) -> StageReport:
        handlers = {
            "train-ae": self.train_autoencoders,
            "fit-codebook": self.fit_codebooks,
            "featurize": self.featurize,
            "train-head": self.train_head,
            "eval": self.evaluate,
        }
        if stage not in handlers:
            raise PipelineError(f"unknown stage {stage!r}; expected one of {list(STAGES)}")
        self.manifest.require_full()
        return handlers[stage]()

    def run(self, stages: tuple[str, ...] = STAGES) -> list[StageReport]:
        return [self.run_stage(stage) for stage in stages]

    # Autoencoders

    def train_autoencoders(self) -> StageReport:
        cfg = self.config

        def build() -> tuple[dict[str, bytes], dict[str, Any]]:
            train_chunks, _, _ = self._split_chunks("train")
            if train_chunks.shape[0] == 0:
                raise PipelineError("training split has no chunks")
            files: dict[str, bytes] = {}
            metrics: dict[str, Any] = {}
            for i, family in enumerate(FAMILIES):
                vectors = family_vectors(train_chunks, family)
                vectors = _subsample(vectors, cfg.autoencoder.max_patches, [cfg.seed, 20, i])
                spec = AutoencoderSpec(
                    family=family,
                    compression=cfg.compression_factor,
                    hidden_width=cfg.autoencoder.hidden_width,
                    dropout=cfg.autoencoder.dropout,
                )
                model = train_autoencoder(
                    vectors.astype(np.float64), spec, cfg.autoencoder, seed=cfg.seed
                )
                files[model_filename(family, cfg.compression_factor)] = model.to_bytes()
                metrics[family.tag] = {
                    "bottleneck_dim": spec.bottleneck_dim,
                    "train_mse": model.train_mse,
                    "heldout_mse": model.heldout_mse,
                    "patches": int(vectors.shape[0]),
                }
            return files, metrics

        return self._run("train-ae", self.autoencoder_ref(), build)

    def load_encoder_bank(self) -> EncoderBank:
        ref = self.autoencoder_ref()
        self.store.require(ref, "encoder bank")
        models: dict[PatchFamily, EncoderModel] = {}
        for family in FAMILIES:
            model = EncoderModel.from_bytes(
                self.store.get(ref, model_filename(family, self.config.compression_factor))
            )
            models[family] = model
        return EncoderBank(models)

    def _encode_all(self, bank: EncoderBank, chunks: np.ndarray) -> dict[PatchFamily, np.ndarray]:
        """Per family, bottleneck vectors (n_chunks, count_per_chunk, dim)."""
        out: dict[PatchFamily, list[np.ndarray]] = {f: [] for f in FAMILIES}
        for start in range(0, chunks.shape[0], ENCODE_BATCH):
            batch = chunks[start : start + ENCODE_BATCH].astype(np.float64)
            for family in FAMILIES:
                codes = bank.encode_family(family, family_vectors(batch, family))
                out[family].append(codes.reshape(batch.shape[0], family.count_per_chunk, -1))
        dims = bank.bottleneck_dims()
        return {
            f: (
                np.concatenate(out[f])
                if out[f]
                else np.zeros((0, f.count_per_chunk, dims[f]))
            )
            for f in FAMILIES
        }

    # Codebooks

    def fit_codebooks(self) -> StageReport:
        cfg = self.config

        def build() -> tuple[dict[str, bytes], dict[str, Any]]:
            bank = self.load_encoder_bank()
            train_chunks, _, _ = self._split_chunks("train")
            encoded = self._encode_all(bank, train_chunks)
            files: dict[str, bytes] = {}
            metrics: dict[str, Any] = {}
            for i, family in enumerate(FAMILIES):
                vectors = encoded[family].reshape(-1, encoded[family].shape[-1])
                vectors = _subsample(vectors, cfg.kmeans.max_vectors, [cfg.seed, 21, i])
                book = fit_kmeans(
                    vectors,
                    cfg.codebook_size,
                    seed=cfg.seed,
                    family=family,
                    compression=cfg.compression_factor,
                    max_iter=cfg.kmeans.max_iter,
                    tol=cfg.kmeans.tol,
                )
                files[_codebook_filename(family)] = book.to_bytes()
                metrics[family.tag] = {
                    "inertia": book.inertia,
                    "iterations": book.n_iter,
                    "vectors": int(vectors.shape[0]),
                }
            return files, metrics

        self.store.require(self.autoencoder_ref(), "fit-codebook")
        return self._run("fit-codebook", self.codebook_ref(), build)

    def load_codebooks(self) -> CodebookSet:
        ref = self.codebook_ref()
        self.store.require(ref, "codebook set")
        book_set = CodebookSet(
            {f: Codebook.from_bytes(self.store.get(ref, _codebook_filename(f))) for f in FAMILIES}
        )
        cfg = self.config
        if (book_set.compression, book_set.size) != (cfg.compression_factor, cfg.codebook_size):
            raise ConfigMismatchError(
                f"codebooks {ref} are F={book_set.compression}, D={book_set.size}; "
                f"config asks for F={self.config.compression_factor}, D={self.config.codebook_size}"
            )
        return book_set

    # Features

    def featurize(self) -> StageReport:
        def build() -> tuple[dict[str, bytes], dict[str, Any]]:
            bank = self.load_encoder_bank()
            book_set = self.load_codebooks()
            if bank.compression != book_set.compression:
                raise ConfigMismatchError(
                    f"encoder bank F={bank.compression} does not match "
                    f"codebooks F={book_set.compression}"
                )
            files: dict[str, bytes] = {}
            metrics: dict[str, Any] = {}
            for split in ("train", "val", "test"):
                chunks, owner, clip_ids = self._split_chunks(split)
                counts = book_set.featurize_batch(self._encode_all(bank, chunks))
                totals = counts.sum(axis=1)
                if np.any(totals != PATCHES_PER_CHUNK):
                    raise PipelineError(
                        f"{split} feature vectors do not all sum to {PATCHES_PER_CHUNK}"
                    )
                header = {
                    "kind": "features",
                    "split": split,
                    "clip_ids": clip_ids,
                    **book_set.to_header(),
                }
                blocks = {
                    "counts": counts.astype("<i4"),
                    "clip_index": owner.astype("<i4"),
                }
                files[_features_filename(split)] = pack(header, blocks)
                metrics[split] = {"chunks": int(counts.shape[0]), "clips": len(clip_ids)}
            return files, metrics

        self.store.require(self.codebook_ref(), "featurize")
        return self._run("featurize", self.features_ref(), build)

    def load_features(self, split: str) -> SplitFeatures:
        ref = self.features_ref()
        self.store.require(ref, f"{split} features")
        header, blocks = unpack(self.store.get(ref, _features_filename(split)))
        cfg = self.config
        if (header["compression"], header["size"]) != (cfg.compression_factor, cfg.codebook_size):
            raise ConfigMismatchError(
                f"features {ref} are F={header['compression']}, D={header['size']}; "
                f"config asks for F={cfg.compression_factor}, D={cfg.codebook_size}"
            )
        return SplitFeatures(
            counts=blocks["counts"].astype(np.int64),
            clip_index=blocks["clip_index"].astype(np.int64),
            clip_ids=list(header["clip_ids"]),
        )

    def _clip_labels(self, clip_ids: list[str]) -> np.ndarray:
        by_id = {e.clip_id: e for e in self.manifest.entries}
        return labels_to_matrix(
            [self.manifest.label_indices(by_id[c]) for c in clip_ids], self.manifest.num_classes
        )

    def _chunk_labels(self, features: SplitFeatures) -> np.ndarray:
        return self._clip_labels(features.clip_ids)[features.clip_index]

    # Head

    def train_head(self) -> StageReport:
        cfg = self.config
        if cfg.head_artifact:
            raise PipelineError("train-head cannot run with head_artifact set")

        def build() -> tuple[dict[str, bytes], dict[str, Any]]:
            train = self.load_features("train")
            if train.counts.shape[0] == 0:
                raise PipelineError("training split has no chunks")
            val = self.load_features("val")
            validation = None
            if val.counts.shape[0]:
                validation = (val.counts, self._chunk_labels(val))
            spec = HeadSpec(
                input_dim=train.counts.shape[1],
                num_classes=self.manifest.num_classes,
                hidden_width=cfg.head_width,
                dropout=cfg.head_dropout,
            )
            head = train_head(
                train.counts,
                self._chunk_labels(train),
                spec,
                cfg.mask_p,
                cfg.head,
                seed=cfg.seed,
                validation=validation,
                codebook_size=cfg.codebook_size,
                compression=cfg.compression_factor,
            )
            metrics = {"best_epoch": head.best_epoch, "best_val_chunk_map": head.best_val_map}
            return {"head.model": head.to_bytes()}, metrics

        self.store.require(self.features_ref(), "train-head")
        return self._run("train-head", self.head_ref(), build)

    def load_head(self) -> ClassificationHead:
        ref = self.head_ref()
        self.store.require(ref, "eval")
        head = ClassificationHead.from_bytes(self.store.get(ref, "head.model"))
        expected = (self.config.codebook_size, self.config.compression_factor)
        expected_dim = len(FAMILIES) * self.config.codebook_size
        mismatched = (head.codebook_size, head.compression) != expected
        if mismatched or head.spec.input_dim != expected_dim:
            logger.error("Head %s does not match the configured codebooks", ref)
            raise ConfigMismatchError(
                f"head {ref} was trained on D={head.codebook_size}, F={head.compression}; "
                f"codebooks are D={expected[0]}, F={expected[1]}"
            )
        if head.spec.num_classes != self.manifest.num_classes:
            raise ConfigMismatchError(
                f"head {ref} predicts {head.spec.num_classes} classes; "
                f"manifest has {self.manifest.num_classes}"
            )
        return head

    # Evaluation

    def evaluate(self) -> StageReport:
        def build() -> tuple[dict[str, bytes], dict[str, Any]]:
            head = self.load_head()
            files: dict[str, bytes] = {}
            splits: dict[str, Any] = {}
            with tempfile.TemporaryDirectory() as tmp:
                for split in EVAL_SPLITS:
                    features = self.load_features(split)
                    chunk_probs = predict_chunks(head, features.counts)
                    clip_probs = clip_probabilities(chunk_probs, features.clip_index)
                    names = self.manifest.vocabulary
                    tables = {
                        "chunk": EvalTable(chunk_probs, self._chunk_labels(features), names),
                        "clip": EvalTable(
                            clip_probs,
                            self._clip_labels(features.clip_ids),
                            names,
                            features.clip_ids,
                        ),
                    }
                    result: dict[str, Any] = {
                        "chunks": int(chunk_probs.shape[0]),
                        "clips": len(features.clip_ids),
                    }
                    for level, table in tables.items():
                        stem = f"ap_{split}_{level}"
                        try:
                            result[f"{level}_map"] = write_ap_reports(
                                table, Path(tmp) / f"{stem}.csv", Path(tmp) / f"{stem}.json"
                            )
                        except NoPositivesError:
                            logger.warning("No positives in %s at %s level", split, level)
                            result[f"{level}_map"] = None
                            continue
                        files[f"{stem}.csv"] = (Path(tmp) / f"{stem}.csv").read_bytes()
                        files[f"{stem}.json"] = (Path(tmp) / f"{stem}.json").read_bytes()
                    splits[split] = result
            report = {
                "head": self.head_ref().key,
                "features": self.features_ref().key,
                "compression_factor": head.compression,
                "codebook_size": head.codebook_size,
                "head_width": head.spec.hidden_width,
                "head_dropout": head.spec.dropout,
                "mask_p": head.mask_p,
                "best_epoch": head.best_epoch,
                "splits": splits,
                "reference_targets": REFERENCE_TARGETS,
            }
            text = json.dumps(report, indent=2, sort_keys=True) + "\n"
            files["report.json"] = text.encode("utf-8")
            return files, {"splits": splits}

        self.store.require(self.features_ref(), "eval")
        self.store.require(self.head_ref(), "eval")
        return self._run("eval", self.eval_ref(), build)

    def report(self) -> dict[str, Any]:
        """The stored eval report of this config."""
        return json.loads(self.store.get(self.eval_ref(), "report.json"))


def _subsample(vectors: np.ndarray, limit: int, seed: Any) -> np.ndarray:
    if vectors.shape[0] <= limit:
        return vectors
    keep = np.sort(np.random.default_rng(seed).choice(vectors.shape[0], size=limit, replace=False))
    return vectors[keep]


def _codebook_filename(family: PatchFamily) -> str:
    return f"codebook_{family.tag}.bin"


def _features_filename(split: str) -> str:
    return f"features_{split}.bin"


def run_stage(
    stage: str,
    config: RunConfig,
    store: ArtifactStore,
    manifest: Optional[DatasetManifest] = None,
) -> StageReport:
    """Run one named stage of ``config`` against ``store``."""
    return Pipeline(config, store, manifest).run_stage(stage)
