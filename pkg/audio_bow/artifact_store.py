"""Content-addressed, write-once artifact directory."""

import hashlib
import json
import logging
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator, Mapping, Union

from .exceptions import MissingArtifactError, ValidationFailure
from .serialization import canonical_json


logger = logging.getLogger(__name__)

META_FILE = "meta.json"
TIMINGS_FILE = "timings.jsonl"
KEY_LENGTH = 16


class ArtifactStoreError(ValidationFailure):
    """Exception raised when an artifact would be overwritten with new content."""

    pass


class CorruptArtifactError(MissingArtifactError):
    """A stored file no longer matches the hash recorded for it."""

    pass


def config_hash(config: Any) -> str:
    """Short sha256 of the canonical JSON of ``config``."""
    return hashlib.sha256(canonical_json(config)).hexdigest()[:KEY_LENGTH]


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class ArtifactRef:
    """Address of one artifact: its kind and config hash."""

    kind: str
    key: str

    def __str__(self) -> str:
        return f"{self.kind}/{self.key}"


class ArtifactStore:
    """
    On-disk store of stage outputs.

    Layout is ``<root>/<kind>/<key>/<file>`` plus a ``meta.json`` recording
    the producing config and the sha256 of every file. Artifacts are written
    once, atomically; every read verifies the recorded hash.
    """

    def __init__(self, root: Union[str, Path]) -> None:
        self.root = Path(root)

    def directory(self, ref: ArtifactRef) -> Path:
        return self.root / ref.kind / ref.key

    def exists(self, ref: ArtifactRef) -> bool:
        return (self.directory(ref) / META_FILE).is_file()

    def meta(self, ref: ArtifactRef) -> dict[str, Any]:
        meta_path = self.directory(ref) / META_FILE
        if not meta_path.is_file():
            raise MissingArtifactError(f"artifact {ref} (hash {ref.key}) is not in {self.root}")
        return json.loads(meta_path.read_text(encoding="utf-8"))

    def put(self, ref: ArtifactRef, files: Mapping[str, bytes], config: Any) -> Path:
        """
        Write an artifact.

        Re-putting byte-identical content is a no-op.

        Raises:
            ArtifactStoreError: If the artifact exists with different content
        """
        if META_FILE in files:
            raise ArtifactStoreError(f"file name {META_FILE} is reserved")
        meta = {
            "kind": ref.kind,
            "key": ref.key,
            "config": config,
            "files": {name: sha256_bytes(data) for name, data in sorted(files.items())},
        }
        target = self.directory(ref)
        if self.exists(ref):
            if self.meta(ref)["files"] != meta["files"]:
                raise ArtifactStoreError(
                    f"artifact {ref} already exists with different content; artifacts are immutable"
                )
            logger.debug("Artifact %s already stored, identical content", ref)
            return target

        target.parent.mkdir(parents=True, exist_ok=True)
        staging = Path(tempfile.mkdtemp(prefix=f".{ref.key}.", dir=target.parent))
        try:
            for name, data in files.items():
                (staging / name).write_bytes(data)
            (staging / META_FILE).write_bytes(canonical_json(meta) + b"\n")
            os.replace(staging, target)
        except OSError:
            shutil.rmtree(staging, ignore_errors=True)
            raise
        logger.info("Stored artifact %s (%d files)", ref, len(files))
        return target

    def get(self, ref: ArtifactRef, name: str) -> bytes:
        """
        Read one file of an artifact and verify its hash.

        Raises:
            MissingArtifactError: If the artifact or file is absent
            CorruptArtifactError: If the content does not match its hash
        """
        expected = self.meta(ref)["files"].get(name)
        path = self.directory(ref) / name
        if expected is None or not path.is_file():
            raise MissingArtifactError(f"artifact {ref} has no file {name!r}")
        data = path.read_bytes()
        if sha256_bytes(data) != expected:
            raise CorruptArtifactError(f"artifact {ref} file {name!r} fails hash verification")
        return data

    def files(self, ref: ArtifactRef) -> list[str]:
        return sorted(self.meta(ref)["files"])

    def refs(self, kind: str) -> Iterator[ArtifactRef]:
        base = self.root / kind
        if not base.is_dir():
            return
        for child in sorted(base.iterdir()):
            if (child / META_FILE).is_file():
                yield ArtifactRef(kind, child.name)

    def require(self, ref: ArtifactRef, needed_by: str) -> None:
        if not self.exists(ref):
            logger.error("%s needs upstream artifact %s, which is missing", needed_by, ref)
            raise MissingArtifactError(
                f"{needed_by} needs {ref.kind} artifact with hash {ref.key}; run that stage first"
            )

    def record_timing(self, stage: str, ref: ArtifactRef, seconds: float, cached: bool) -> None:
        """Append a wall-clock record to ``<root>/logs/timings.jsonl``."""
        log_dir = self.root / "logs"
        log_dir.mkdir(parents=True, exist_ok=True)
        record = {
            "stage": stage,
            "kind": ref.kind,
            "key": ref.key,
            "seconds": seconds,
            "cached": cached,
        }
        with open(log_dir / TIMINGS_FILE, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def timings(self) -> list[dict[str, Any]]:
        path = self.root / "logs" / TIMINGS_FILE
        if not path.is_file():
            return []
        return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line]
