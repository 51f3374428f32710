"""Multi-label ranking metrics: per-class average precision and macro mAP."""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd

from .exceptions import ValidationFailure


logger = logging.getLogger(__name__)


class MetricsError(ValidationFailure):
    """Exception raised for malformed score or label tables."""

    pass


class NoPositivesError(MetricsError):
    """A class has no positive rows; it is excluded, not scored."""

    pass


@dataclass
class EvalTable:
    """
    Scores and binary labels, one row per clip or chunk.

    Attributes:
        scores: Array (rows, classes) of finite scores
        labels: Array (rows, classes) of 0/1 indicators
        class_names: Optional names, one per class
        row_ids: Optional row identifiers (clip ids or chunk keys)
    """

    scores: np.ndarray
    labels: np.ndarray
    class_names: Optional[Sequence[str]] = None
    row_ids: Optional[Sequence[str]] = None

    def __post_init__(self) -> None:
        self.scores = np.atleast_2d(np.asarray(self.scores, dtype=np.float64))
        self.labels = np.atleast_2d(np.asarray(self.labels, dtype=np.float64))
        if self.scores.shape != self.labels.shape:
            raise MetricsError(
                f"scores {self.scores.shape} and labels {self.labels.shape} differ in shape"
            )
        if self.scores.shape[0] == 0:
            raise MetricsError("evaluation table has no rows")
        if not np.all(np.isfinite(self.scores)):
            raise MetricsError("scores contain non-finite values")
        if not np.all((self.labels == 0.0) | (self.labels == 1.0)):
            raise MetricsError("labels must be binary")
        if self.class_names is not None and len(self.class_names) != self.num_classes:
            raise MetricsError(
                f"{len(self.class_names)} class names for {self.num_classes} classes"
            )

    @property
    def num_classes(self) -> int:
        return self.scores.shape[1]

    @property
    def num_rows(self) -> int:
        return self.scores.shape[0]

    def names(self) -> list[str]:
        if self.class_names is None:
            return [str(i) for i in range(self.num_classes)]
        return [str(name) for name in self.class_names]


def average_precision(scores: Sequence[float], labels: Sequence[float]) -> float:
    """
    Non-interpolated average precision for one class.

    Rows are ranked by descending score; equal scores keep their original
    order. AP is the mean of precision@k over the ranks k of the positives.

    Args:
        scores: Score per row
        labels: 0/1 indicator per row

    Returns:
        AP in (0, 1]; the minimum, with all P positives ranked last among
        N rows, is the mean of j / (N - P + j) over j = 1..P

    Raises:
        NoPositivesError: If ``labels`` has no positive entry
        MetricsError: On shape mismatch or non-binary labels
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if s.shape != y.shape:
        raise MetricsError(f"{s.size} scores for {y.size} labels")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise MetricsError("labels must be binary")
    positives = int(y.sum())
    if positives == 0:
        raise NoPositivesError("class has no positive rows")

    hits = y[np.argsort(-s, kind="stable")]
    precision_at_k = np.cumsum(hits) / np.arange(1, hits.size + 1)
    return float(precision_at_k[hits == 1.0].sum() / positives)


def per_class_average_precision(table: EvalTable) -> np.ndarray:
    """AP per class; NaN marks classes without positives."""
    out = np.full(table.num_classes, np.nan)
    for k in range(table.num_classes):
        try:
            out[k] = average_precision(table.scores[:, k], table.labels[:, k])
        except NoPositivesError:
            continue
    return out


def macro_map(table: EvalTable) -> float:
    """
    Unweighted mean AP over the classes that have positives.

    Raises:
        NoPositivesError: If no class has a positive row
    """
    aps = per_class_average_precision(table)
    included = ~np.isnan(aps)
    if not included.any():
        raise NoPositivesError("no class has positive rows")
    excluded = int((~included).sum())
    if excluded:
        logger.debug("%d of %d classes have no positives and are excluded", excluded, aps.size)
    return float(aps[included].mean())


def ap_frame(table: EvalTable) -> pd.DataFrame:
    """Per-class AP as a DataFrame (index, name, positives, ap)."""
    return pd.DataFrame(
        {
            "class_index": np.arange(table.num_classes),
            "class_name": table.names(),
            "positives": table.labels.sum(axis=0).astype(int),
            "ap": per_class_average_precision(table),
        }
    )


def write_ap_reports(
    table: EvalTable,
    csv_path: Union[str, Path],
    json_path: Union[str, Path],
    extra: Optional[dict] = None,
) -> float:
    """
    Write per-class AP as CSV and a JSON summary with the macro mAP.

    Returns:
        The macro mAP
    """
    frame = ap_frame(table)
    mean_ap = macro_map(table)
    frame.to_csv(csv_path, index=False, float_format="%.10g")

    excluded = frame.loc[frame["ap"].isna(), "class_name"].tolist()
    if excluded:
        logger.warning("Classes without positives excluded from mAP: %s", excluded)
    summary = {
        "map": mean_ap,
        "rows": table.num_rows,
        "classes": table.num_classes,
        "excluded_classes": excluded,
        "per_class": {
            row.class_name: (None if np.isnan(row.ap) else float(row.ap))
            for row in frame.itertuples()
        },
    }
    if extra:
        summary.update(extra)
    Path(json_path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return mean_ap
