"""CSV dataset manifests: clip ids, audio paths, splits and labels."""

import hashlib
import logging
from collections import Counter
from pathlib import Path
from typing import Literal, Optional, Union

import pandas as pd
from pydantic import BaseModel, Field

from .exceptions import ValidationFailure


logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
LABEL_SEPARATOR = ";"
REQUIRED_COLUMNS = ("clip_id", "path", "split", "labels")
HASH_BLOCK_BYTES = 1 << 20

Split = Literal["train", "val", "test"]


class ManifestError(ValidationFailure):
    """Exception raised when a manifest or vocabulary fails validation."""

    pass


class ManifestEntry(BaseModel):
    """One clip of the dataset."""

    clip_id: str
    path: Path
    split: Split
    labels: list[str] = Field(default_factory=list)


class DatasetManifest(BaseModel):
    """
    Validated dataset description.

    ``entries`` keep CSV row order; ``vocabulary`` maps class index to name.
    """

    source: Path
    entries: list[ManifestEntry]
    vocabulary: list[str]
    content_hash: str

    def class_index(self, name: str) -> int:
        try:
            return self.vocabulary.index(name)
        except ValueError as e:
            raise ManifestError(f"label {name!r} is not in the vocabulary") from e

    def label_indices(self, entry: ManifestEntry) -> list[int]:
        lookup = {name: i for i, name in enumerate(self.vocabulary)}
        return sorted(lookup[label] for label in entry.labels)

    def split(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    @property
    def num_classes(self) -> int:
        return len(self.vocabulary)

    def split_counts(self) -> dict[str, int]:
        counts = Counter(e.split for e in self.entries)
        return {s: counts.get(s, 0) for s in SPLITS}

    def class_counts(self, split: Optional[str] = None) -> dict[str, int]:
        """Number of clips carrying each label, optionally within one split."""
        counts: Counter[str] = Counter()
        for entry in self.entries:
            if split is None or entry.split == split:
                counts.update(set(entry.labels))
        return {name: counts.get(name, 0) for name in self.vocabulary}

    def summary(self) -> dict[str, object]:
        return {
            "clips": len(self.entries),
            "classes": self.num_classes,
            "splits": self.split_counts(),
            "labels": {s: self.class_counts(s) for s in SPLITS},
            "content_hash": self.content_hash,
        }

    def require_full(self) -> None:
        """Raise unless all three splits are non-empty."""
        empty = [s for s, n in self.split_counts().items() if n == 0]
        if empty:
            raise ManifestError(f"manifest {self.source} has empty splits: {empty}")


def _read_csv(path: Path, what: str) -> pd.DataFrame:
    try:
        return pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError as e:
        raise ManifestError(f"{what} {path} does not exist") from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ManifestError(f"could not parse {what} {path}: {e}") from e


def _read_vocabulary(path: Path) -> list[str]:
    frame = _read_csv(path, "vocabulary")
    if list(frame.columns[:2]) != ["index", "name"]:
        raise ManifestError(
            f"vocabulary {path} needs columns index,name; got {list(frame.columns)}"
        )
    try:
        indices = [int(i) for i in frame["index"]]
    except ValueError as e:
        raise ManifestError(f"vocabulary {path} has a non-integer index: {e}") from e
    if sorted(indices) != list(range(len(indices))):
        raise ManifestError(f"vocabulary {path} indices must be 0..{len(indices) - 1}")
    names = [name.strip() for _, name in sorted(zip(indices, frame["name"]))]
    duplicates = sorted(n for n, c in Counter(names).items() if c > 1)
    if duplicates:
        raise ManifestError(f"vocabulary {path} repeats class names: {duplicates}")
    return names


def _split_labels(raw: str) -> list[str]:
    return [label.strip() for label in raw.split(LABEL_SEPARATOR) if label.strip()]


def _file_digest(path: Path) -> str:
    if not path.is_file():
        return "missing"
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(HASH_BLOCK_BYTES), b""):
            digest.update(block)
    return digest.hexdigest()


def _content_hash(csv_bytes: bytes, vocabulary: list[str], entries: list[ManifestEntry]) -> str:
    """Digest of the manifest, the vocabulary and every audio file's bytes."""
    digest = hashlib.sha256()
    digest.update(csv_bytes)
    digest.update("\n".join(vocabulary).encode("utf-8"))
    for entry in entries:
        audio = _file_digest(entry.path)
        digest.update(f"{entry.clip_id}\0{entry.path.name}\0{audio}\n".encode("utf-8"))
    return digest.hexdigest()


def ingest(
    path: Union[str, Path],
    vocabulary_path: Optional[Union[str, Path]] = None,
    check_files: bool = True,
) -> DatasetManifest:
    """
    Read and validate a manifest CSV.

    Columns: ``clip_id``, ``path`` (relative paths resolve against the
    manifest's directory), ``split`` (train/val/test) and ``labels``
    (semicolon-joined class names, possibly empty). Without a vocabulary
    file the vocabulary is the sorted set of labels seen.

    Args:
        path: Manifest CSV
        vocabulary_path: Optional ``index,name`` CSV
        check_files: Require every audio file to exist

    Returns:
        DatasetManifest: Validated manifest

    Raises:
        ManifestError: Listing every duplicate id, unknown label, bad split
            and missing file found
    """
    path = Path(path)
    frame = _read_csv(path, "manifest")
    missing_columns = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing_columns:
        raise ManifestError(f"manifest {path} lacks columns: {missing_columns}")
    if frame.empty:
        raise ManifestError(f"manifest {path} has no rows")

    vocabulary = _read_vocabulary(Path(vocabulary_path)) if vocabulary_path else None
    known = set(vocabulary) if vocabulary is not None else None

    frame["clip_id"] = frame["clip_id"].str.strip()
    frame["split"] = frame["split"].str.strip()

    problems: list[str] = []
    duplicates = sorted(i for i, c in Counter(frame["clip_id"]).items() if c > 1 and i)
    for clip_id in duplicates:
        problems.append(f"duplicate clip_id {clip_id!r}")

    entries: list[ManifestEntry] = []
    seen_labels: set[str] = set()
    base = path.parent
    for row in frame.itertuples(index=False):
        clip_id = str(row.clip_id)
        if not clip_id:
            problems.append("empty clip_id")
            continue
        if row.split not in SPLITS:
            problems.append(f"clip {clip_id!r} has unknown split {row.split!r}")
            continue
        labels = _split_labels(row.labels)
        if known is not None:
            for label in labels:
                if label not in known:
                    problems.append(f"clip {clip_id!r} has unknown label {label!r}")
        audio = Path(row.path)
        if not audio.is_absolute():
            audio = base / audio
        if check_files and not audio.is_file():
            problems.append(f"clip {clip_id!r} audio file {audio} is missing")
        seen_labels.update(labels)
        entries.append(ManifestEntry(clip_id=clip_id, path=audio, split=row.split, labels=labels))

    if problems:
        for problem in problems:
            logger.error("Manifest %s: %s", path, problem)
        raise ManifestError(f"manifest {path} is invalid: " + "; ".join(problems))

    if vocabulary is None:
        vocabulary = sorted(seen_labels)
    if not vocabulary:
        raise ManifestError(f"manifest {path} has no labels at all")

    manifest = DatasetManifest(
        source=path,
        entries=entries,
        vocabulary=vocabulary,
        content_hash=_content_hash(path.read_bytes(), vocabulary, entries),
    )
    logger.info(
        "Ingested %s: %d clips, %d classes, splits %s",
        path,
        len(entries),
        manifest.num_classes,
        manifest.split_counts(),
    )
    return manifest
