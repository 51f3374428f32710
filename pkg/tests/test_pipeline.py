"""Tests for pipeline module."""

from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from audio_bow.artifact_store import ArtifactStore
from audio_bow.config_manager import ConfigError, build_run_config
from audio_bow.exceptions import MissingArtifactError
from audio_bow.fixture import make_synthetic_fixture
from audio_bow.manifest import DatasetManifest, ManifestError, ingest
from audio_bow.patching import PATCHES_PER_CHUNK
from audio_bow.pipeline import STAGES, ConfigMismatchError, Pipeline, PipelineError, run_stage

from .conftest import SMALL_CLASSES, fast_config


@pytest.fixture(scope="module")
def manifest(small_dataset: Path) -> DatasetManifest:
    return ingest(small_dataset, small_dataset.parent / "vocabulary.csv")


@pytest.fixture(scope="module")
def finished(
    small_dataset: Path, manifest: DatasetManifest, tmp_path_factory: pytest.TempPathFactory
) -> Pipeline:
    """A pipeline whose five stages have all run once."""
    store = ArtifactStore(tmp_path_factory.mktemp("store"))
    pipeline = Pipeline(fast_config(small_dataset), store, manifest)
    reports = pipeline.run()
    assert [r.stage for r in reports] == list(STAGES)
    assert not any(r.cached for r in reports)
    return pipeline


def _rewrite_manifest(source: Path, target: Path, frame: pd.DataFrame) -> Path:
    """Write ``frame`` as a manifest at ``target`` with audio paths made absolute."""
    frame = frame.assign(path=[str(source.parent / p) for p in frame["path"]])
    frame.to_csv(target, index=False)
    return target


class TestPipelineRun:
    """Test cases for a complete run."""

    def test_chunks_cover_every_clip(self, finished: Pipeline, manifest: DatasetManifest) -> None:
        """Test each clip contributes at least one 96 x 100 chunk."""
        table = finished.chunks()
        assert table.values.shape[1:] == (96, 100)
        assert table.clip_ids == [e.clip_id for e in manifest.entries]
        assert set(np.unique(table.clip_index)) == set(range(len(manifest.entries)))

    def test_features_sum_to_143(self, finished: Pipeline) -> None:
        """Test every stored feature row has 143 counts of width 4*D."""
        for split in ("train", "val", "test"):
            features = finished.load_features(split)
            assert features.counts.shape[1] == 4 * 16
            np.testing.assert_array_equal(features.counts.sum(axis=1), PATCHES_PER_CHUNK)
            assert features.clip_index.max() == len(features.clip_ids) - 1

    def test_report(self, finished: Pipeline) -> None:
        """Test the eval report lists both splits at both levels."""
        report = finished.report()
        assert report["codebook_size"] == 16
        assert report["head"] == finished.head_ref().key
        for split in ("val", "test"):
            result = report["splits"][split]
            for level in ("chunk", "clip"):
                value = result[f"{level}_map"]
                assert value is None or 0.0 < value <= 1.0
        assert "reference_targets" in report

    def test_eval_files(self, finished: Pipeline) -> None:
        """Test per-class AP reports are stored alongside the report."""
        files = finished.store.files(finished.eval_ref())
        assert "report.json" in files
        assert "ap_test_clip.csv" in files
        assert "ap_val_chunk.json" in files

    def test_rerun_is_cached(self, finished: Pipeline, small_dataset: Path) -> None:
        """Test running the same config again hits every artifact."""
        again = Pipeline(fast_config(small_dataset), finished.store, finished.manifest)
        before = {
            ref: finished.store.meta(ref)["files"]
            for ref in (again.autoencoder_ref(), again.head_ref(), again.eval_ref())
        }
        reports = again.run()
        assert all(r.cached for r in reports)
        for ref, files in before.items():
            assert finished.store.meta(ref)["files"] == files
        cached = [t for t in finished.store.timings() if t["cached"]]
        assert len(cached) >= len(STAGES)

    def test_reruns_are_byte_identical(
        self, finished: Pipeline, small_dataset: Path, tmp_path: Path
    ) -> None:
        """Test a fresh store reproduces every artifact file bit for bit."""
        fresh = Pipeline(fast_config(small_dataset), ArtifactStore(tmp_path), finished.manifest)
        fresh.run()
        for ref_name in (
            "chunks_ref",
            "autoencoder_ref",
            "codebook_ref",
            "features_ref",
            "head_ref",
            "eval_ref",
        ):
            ref = getattr(fresh, ref_name)()
            assert ref == getattr(finished, ref_name)()
            assert fresh.store.meta(ref)["files"] == finished.store.meta(ref)["files"]


class TestArtifactKeys:
    """Test cases for stage isolation through artifact keys."""

    def test_head_settings_do_not_touch_upstream(
        self, small_dataset: Path, manifest: DatasetManifest, tmp_path: Path
    ) -> None:
        """Test head hyperparameters only change head and eval keys."""
        store = ArtifactStore(tmp_path)
        a = Pipeline(fast_config(small_dataset), store, manifest)
        b = Pipeline(fast_config(small_dataset, head_width=64, mask_p=0.35), store, manifest)
        assert a.autoencoder_ref() == b.autoencoder_ref()
        assert a.codebook_ref() == b.codebook_ref()
        assert a.features_ref() == b.features_ref()
        assert a.head_ref() != b.head_ref()
        assert a.eval_ref() != b.eval_ref()

    def test_codebook_size_does_not_touch_autoencoders(
        self, small_dataset: Path, manifest: DatasetManifest, tmp_path: Path
    ) -> None:
        """Test D only changes codebook and later keys."""
        store = ArtifactStore(tmp_path)
        a = Pipeline(fast_config(small_dataset), store, manifest)
        b = Pipeline(fast_config(small_dataset, codebook_size=24), store, manifest)
        assert a.autoencoder_ref() == b.autoencoder_ref()
        assert a.codebook_ref() != b.codebook_ref()
        assert a.features_ref() != b.features_ref()

    def test_compression_changes_autoencoders(
        self, small_dataset: Path, manifest: DatasetManifest, tmp_path: Path
    ) -> None:
        """Test F changes the autoencoder key."""
        store = ArtifactStore(tmp_path)
        a = Pipeline(fast_config(small_dataset), store, manifest)
        b = Pipeline(fast_config(small_dataset, compression_factor=20), store, manifest)
        assert a.chunks_ref() == b.chunks_ref()
        assert a.autoencoder_ref() != b.autoencoder_ref()


class TestPipelineErrors:
    """Test cases for failures between stages."""

    def test_missing_upstream(
        self, small_dataset: Path, manifest: DatasetManifest, tmp_path: Path
    ) -> None:
        """Test a stage without its upstream artifact names the missing hash."""
        pipeline = Pipeline(fast_config(small_dataset), ArtifactStore(tmp_path), manifest)
        with pytest.raises(MissingArtifactError, match=pipeline.autoencoder_ref().key):
            pipeline.run_stage("fit-codebook")
        with pytest.raises(MissingArtifactError, match=pipeline.codebook_ref().key):
            pipeline.run_stage("featurize")
        with pytest.raises(MissingArtifactError):
            pipeline.run_stage("eval")

    def test_head_from_other_codebook_size(self, finished: Pipeline, small_dataset: Path) -> None:
        """Test evaluating a head trained at another D is a config mismatch."""
        config = fast_config(
            small_dataset, codebook_size=24, head_artifact=finished.head_ref().key
        )
        other = Pipeline(config, finished.store, finished.manifest)
        other.run(("train-ae", "fit-codebook", "featurize"))
        with pytest.raises(ConfigMismatchError, match="D=16"):
            other.run_stage("eval")
        with pytest.raises(PipelineError):
            other.run_stage("train-head")

    def test_unknown_stage(self, finished: Pipeline) -> None:
        """Test an unknown stage name is rejected."""
        with pytest.raises(PipelineError, match="unknown stage"):
            finished.run_stage("train-everything")

    def test_manifest_required(self, tmp_path: Path) -> None:
        """Test a pipeline without a manifest path cannot start."""
        with pytest.raises(ConfigError):
            Pipeline(build_run_config({}), ArtifactStore(tmp_path))

    def test_empty_split_rejected_before_training(
        self, small_dataset: Path, tmp_path: Path
    ) -> None:
        """Test a manifest with no test clips cannot start a stage."""
        frame = pd.read_csv(small_dataset, dtype=str, keep_default_na=False)
        partial = _rewrite_manifest(
            small_dataset, tmp_path / "manifest.csv", frame[frame["split"] != "test"]
        )
        vocabulary = small_dataset.parent / "vocabulary.csv"
        store = ArtifactStore(tmp_path / "store")
        pipeline = Pipeline(
            fast_config(partial, vocabulary_path=str(vocabulary)),
            store,
            ingest(partial, vocabulary),
        )
        with pytest.raises(ManifestError, match="test"):
            pipeline.run_stage("train-ae")
        assert not store.exists(pipeline.autoencoder_ref())

    def test_module_level_run_stage(self, finished: Pipeline, small_dataset: Path) -> None:
        """Test the functional entry point ingests the manifest itself."""
        report = run_stage("eval", fast_config(small_dataset), finished.store)
        assert report.cached
        assert report.ref == finished.eval_ref()
        assert finished.manifest.num_classes == SMALL_CLASSES


class TestShuffledLabels:
    """Test cases for evaluation when labels carry no signal."""

    def test_clip_map_near_prevalence(
        self, tmp_path_factory: pytest.TempPathFactory
    ) -> None:
        """Test shuffling labels across clips drops clip mAP to the prevalence baseline."""
        root = tmp_path_factory.mktemp("shuffled_fixture")
        source = make_synthetic_fixture(root / "data", seed=1, n_clips=160, n_classes=4)
        frame = pd.read_csv(source, dtype=str, keep_default_na=False)
        order = np.random.default_rng(0).permutation(len(frame))
        frame["labels"] = frame["labels"].to_numpy()[order]
        shuffled = _rewrite_manifest(source, root / "shuffled.csv", frame)
        vocabulary = source.parent / "vocabulary.csv"
        manifest = ingest(shuffled, vocabulary)

        config = fast_config(shuffled, vocabulary_path=str(vocabulary))
        pipeline = Pipeline(config, ArtifactStore(root / "store"), manifest)
        pipeline.run()
        clip_map = pipeline.report()["splits"]["test"]["clip_map"]

        test_clips = manifest.split("test")
        positives = np.zeros(manifest.num_classes)
        for entry in test_clips:
            positives[manifest.label_indices(entry)] += 1
        prevalence = float(np.mean(positives[positives > 0] / len(test_clips)))
        assert prevalence / 2 <= clip_map <= 2 * prevalence
