"""Hyperparameter sweeps over the (F, D, head width, dropout, mask_p) grid."""

import itertools
import logging
from pathlib import Path
from typing import Any, Optional, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from .artifact_store import ArtifactStore, config_hash  # noqa: E402
from .config_manager import RunConfig, build_run_config  # noqa: E402
from .manifest import DatasetManifest, ingest  # noqa: E402
from .pipeline import Pipeline  # noqa: E402


logger = logging.getLogger(__name__)

RESULT_COLUMNS = [
    "compression_factor",
    "codebook_size",
    "head_width",
    "head_dropout",
    "mask_p",
    "val_chunk_map",
    "val_clip_map",
    "test_chunk_map",
    "test_clip_map",
    "seconds",
    "resumed",
    "eval_key",
]


def grid_cells(config: RunConfig) -> list[RunConfig]:
    """One RunConfig per grid cell, in row-major grid order."""
    grid = config.sweep
    base = config.model_dump()
    cells = []
    for factor, size, width, dropout, mask_p in itertools.product(
        grid.compression_factors,
        grid.codebook_sizes,
        grid.head_widths,
        grid.head_dropouts,
        grid.mask_ps,
    ):
        cells.append(
            build_run_config(
                {
                    **base,
                    "compression_factor": factor,
                    "codebook_size": size,
                    "head_width": width,
                    "head_dropout": dropout,
                    "mask_p": mask_p,
                    "head_artifact": None,
                }
            )
        )
    return cells


def _split_map(report: dict[str, Any], split: str, level: str) -> Optional[float]:
    return report.get("splits", {}).get(split, {}).get(f"{level}_map")


def _cell_seconds(pipeline: Pipeline, timings: list[dict[str, Any]]) -> float:
    keys = {
        pipeline.autoencoder_ref().key,
        pipeline.codebook_ref().key,
        pipeline.features_ref().key,
        pipeline.head_ref().key,
        pipeline.eval_ref().key,
    }
    return float(sum(t["seconds"] for t in timings if t["key"] in keys and not t["cached"]))


def sweep(
    config: RunConfig,
    store: ArtifactStore,
    manifest: Optional[DatasetManifest] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> pd.DataFrame:
    """
    Run every cell of ``config.sweep`` and tabulate its mAP.

    Cells whose eval artifact already exists are read back, not rerun, so an
    interrupted sweep resumes where it stopped. Upstream stages shared
    between cells (autoencoders per F, codebooks per D) are trained once.

    Args:
        config: Base configuration; its ``sweep`` grid is expanded
        store: Artifact store shared by all cells
        manifest: Pre-ingested manifest
        out_dir: Where the results CSV and plots go; defaults to
            ``<store>/sweeps/<grid hash>``

    Returns:
        DataFrame with one row per cell
    """
    if manifest is None:
        manifest = ingest(config.manifest_path, config.vocabulary_path)
    cells = grid_cells(config)
    logger.info("Sweeping %d cells", len(cells))

    rows = []
    for i, cell in enumerate(cells):
        pipeline = Pipeline(cell, store, manifest)
        resumed = store.exists(pipeline.eval_ref())
        if resumed:
            logger.info("Cell %d/%d already evaluated (%s)", i + 1, len(cells), pipeline.eval_ref())
        else:
            logger.info(
                "Cell %d/%d: F=%d D=%d width=%d dropout=%.2f mask_p=%.2f",
                i + 1,
                len(cells),
                cell.compression_factor,
                cell.codebook_size,
                cell.head_width,
                cell.head_dropout,
                cell.mask_p,
            )
            pipeline.run()
        report = pipeline.report()
        rows.append(
            {
                "compression_factor": cell.compression_factor,
                "codebook_size": cell.codebook_size,
                "head_width": cell.head_width,
                "head_dropout": cell.head_dropout,
                "mask_p": cell.mask_p,
                "val_chunk_map": _split_map(report, "val", "chunk"),
                "val_clip_map": _split_map(report, "val", "clip"),
                "test_chunk_map": _split_map(report, "test", "chunk"),
                "test_clip_map": _split_map(report, "test", "clip"),
                "seconds": _cell_seconds(pipeline, store.timings()),
                "resumed": resumed,
                "eval_key": pipeline.eval_ref().key,
            }
        )
    frame = pd.DataFrame(rows, columns=RESULT_COLUMNS)

    if out_dir is None:
        out_dir = store.root / "sweeps" / config_hash(config.sweep.model_dump())
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out_dir / "sweep_results.csv", index=False, float_format="%.6f")
    plot_sweep(frame, out_dir)
    logger.info("Sweep results written to %s", out_dir)
    return frame


def _head_label(row: Any) -> str:
    return (
        f"F={row.compression_factor} w={row.head_width} "
        f"p_drop={row.head_dropout} mask={row.mask_p}"
    )


def plot_sweep(
    frame: pd.DataFrame,
    out_dir: Union[str, Path],
    metric: str = "val_chunk_map",
) -> list[Path]:
    """
    Plot mAP against codebook size per head configuration, and against
    mask probability when the grid has more than one mask value.

    Returns:
        Paths of the written PNG files
    """
    out_dir = Path(out_dir)
    written = []

    fig, ax = plt.subplots(figsize=(7, 4.5))
    head_keys = ["compression_factor", "head_width", "head_dropout", "mask_p"]
    for _, group in frame.groupby(head_keys, sort=True):
        group = group.sort_values("codebook_size")
        ax.plot(group["codebook_size"], group[metric], marker="o", label=_head_label(group.iloc[0]))
    ax.set_xscale("log", base=2)
    ax.set_xlabel("codebook size D")
    ax.set_ylabel(metric.replace("_", " "))
    ax.set_title("mAP vs codebook size per head configuration")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize="small")
    fig.tight_layout()
    path = out_dir / "map_vs_codebook_size.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    if frame["mask_p"].nunique() > 1:
        fig, ax = plt.subplots(figsize=(7, 4.5))
        cell_keys = ["compression_factor", "codebook_size", "head_width", "head_dropout"]
        for keys, group in frame.groupby(cell_keys, sort=True):
            group = group.sort_values("mask_p")
            factor, size, width, dropout = keys
            ax.plot(
                group["mask_p"] * 100.0,
                group[metric],
                marker="o",
                label=f"F={factor} D={size} w={width} p_drop={dropout}",
            )
        ax.set_xlabel("masked counts (%)")
        ax.set_ylabel(metric.replace("_", " "))
        ax.set_title("mAP vs input code masking")
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize="small")
        fig.tight_layout()
        path = out_dir / "map_vs_mask_p.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
