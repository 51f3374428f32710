"""Tests for sweep module."""

from pathlib import Path

import pandas as pd
import pytest

from audio_bow.artifact_store import ArtifactStore
from audio_bow.sweep import RESULT_COLUMNS, grid_cells, plot_sweep, sweep

from .conftest import fast_config


GRID = {
    "compression_factors": [10],
    "codebook_sizes": [16, 24],
    "head_widths": [32],
    "head_dropouts": [0.1],
    "mask_ps": [0.0, 0.35],
}


class TestGridCells:
    """Test cases for grid expansion."""

    def test_cells_in_grid_order(self, small_dataset: Path) -> None:
        """Test one config per cell, mask varying fastest."""
        cells = grid_cells(fast_config(small_dataset, sweep=GRID))
        assert [(c.codebook_size, c.mask_p) for c in cells] == [
            (16, 0.0),
            (16, 0.35),
            (24, 0.0),
            (24, 0.35),
        ]
        assert all(c.head_artifact is None for c in cells)
        assert all(c.autoencoder.steps == 20 for c in cells)


class TestSweep:
    """Test cases for running a sweep."""

    def test_table_plots_and_resume(self, small_dataset: Path, tmp_path: Path) -> None:
        """Test a small grid writes its table and plots, then resumes from the store."""
        store = ArtifactStore(tmp_path / "store")
        config = fast_config(small_dataset, sweep=GRID)
        out = tmp_path / "out"

        frame = sweep(config, store, out_dir=out)
        assert list(frame.columns) == RESULT_COLUMNS
        assert len(frame) == 4
        assert not frame["resumed"].any()
        assert (frame["seconds"] > 0).all()
        assert (out / "map_vs_codebook_size.png").is_file()
        assert (out / "map_vs_mask_p.png").is_file()
        assert len(pd.read_csv(out / "sweep_results.csv")) == 4

        # one autoencoder artifact serves every cell
        assert len(list(store.refs("autoencoders"))) == 1
        assert len(list(store.refs("codebooks"))) == 2

        again = sweep(config, store)
        assert again["resumed"].all()
        assert again["test_clip_map"].tolist() == frame["test_clip_map"].tolist()
        assert any((store.root / "sweeps").iterdir())


class TestPlotSweep:
    """Test cases for sweep plots."""

    def test_single_mask_value_skips_mask_plot(self, tmp_path: Path) -> None:
        """Test the masking plot needs more than one mask value."""
        frame = pd.DataFrame(
            {
                "compression_factor": [10, 10],
                "codebook_size": [16, 64],
                "head_width": [256, 256],
                "head_dropout": [0.1, 0.1],
                "mask_p": [0.0, 0.0],
                "val_chunk_map": [0.5, 0.6],
            }
        )
        written = plot_sweep(frame, tmp_path)
        assert [p.name for p in written] == ["map_vs_codebook_size.png"]

    @pytest.mark.parametrize("metric", ["val_chunk_map", "test_clip_map"])
    def test_metric_choice(self, tmp_path: Path, metric: str) -> None:
        """Test any result column can be plotted."""
        frame = pd.DataFrame(
            {
                "compression_factor": [10, 10],
                "codebook_size": [16, 64],
                "head_width": [256, 256],
                "head_dropout": [0.1, 0.1],
                "mask_p": [0.0, 0.35],
                metric: [0.5, 0.6],
            }
        )
        written = plot_sweep(frame, tmp_path, metric=metric)
        assert len(written) == 2
