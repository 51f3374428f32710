"""k-means codebooks, bag-of-codewords features and count masking."""

import logging
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Union

import numpy as np

from .exceptions import ValidationFailure
from .patching import FAMILIES, PATCHES_PER_CHUNK, PatchFamily
from .serialization import pack, unpack


logger = logging.getLogger(__name__)

DEFAULT_MAX_ITER = 300
DEFAULT_TOL = 1e-4
_DISTANCE_BUDGET = 1 << 22


class CodebookError(ValidationFailure):
    """Exception raised for invalid clustering input or mismatched codebooks."""

    pass


@dataclass
class Codebook:
    """D centroids for one patch family at one compression factor."""

    centroids: np.ndarray
    inertia: float
    family: Optional[PatchFamily] = None
    compression: Optional[int] = None
    seed: Optional[int] = None
    n_iter: int = 0
    inertia_history: list[float] = field(default_factory=list)

    @property
    def size(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.centroids.shape[1])

    def assign(self, vectors: np.ndarray) -> np.ndarray:
        """Nearest-centroid codes for a batch of vectors."""
        return assign_batch(self, vectors)

    def to_bytes(self) -> bytes:
        header = {
            "kind": "codebook",
            "family": self.family.tag if self.family is not None else None,
            "compression": self.compression,
            "size": self.size,
            "seed": self.seed,
            "inertia": self.inertia,
            "n_iter": self.n_iter,
        }
        return pack(header, {"centroids": self.centroids.astype("<f4")})

    @classmethod
    def from_bytes(cls, data: bytes) -> "Codebook":
        header, blocks = unpack(data)
        if header.get("kind") != "codebook":
            raise CodebookError(f"container kind {header.get('kind')!r} is not a codebook")
        family = header.get("family")
        return cls(
            centroids=blocks["centroids"].astype(np.float64),
            inertia=float(header["inertia"]),
            family=PatchFamily.from_tag(family) if family is not None else None,
            compression=header.get("compression"),
            seed=header.get("seed"),
            n_iter=int(header.get("n_iter", 0)),
        )


def _squared_distances(vectors: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = vectors[:, None, :] - centroids[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _nearest(vectors: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Codes and squared distances, computed in row blocks; ties go to the lowest index."""
    n, d = vectors.shape
    step = max(1, _DISTANCE_BUDGET // max(1, centroids.shape[0] * d))
    codes = np.empty(n, dtype=np.int64)
    dists = np.empty(n, dtype=np.float64)
    for start in range(0, n, step):
        block = _squared_distances(vectors[start : start + step], centroids)
        idx = np.argmin(block, axis=1)
        codes[start : start + step] = idx
        dists[start : start + step] = block[np.arange(block.shape[0]), idx]
    return codes, dists


def _pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact squared distances (len(a), len(b)), computed in column blocks."""
    out = np.empty((a.shape[0], b.shape[0]))
    step = max(1, _DISTANCE_BUDGET // max(1, a.shape[0] * a.shape[1]))
    for start in range(0, b.shape[0], step):
        out[:, start : start + step] = _squared_distances(a, b[start : start + step])
    return out


def _kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++ seeding: best of several D^2-weighted candidates per center."""
    n = x.shape[0]
    n_trials = 2 + int(np.log(k))
    centers = np.empty((k, x.shape[1]))
    first = rng.integers(n)
    centers[0] = x[first]
    closest = _pairwise_distances(x[first : first + 1], x)[0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            raise CodebookError(f"only {i} distinct vectors available for {k} clusters")
        draws = rng.random(n_trials) * total
        candidates = np.minimum(np.searchsorted(np.cumsum(closest), draws, side="right"), n - 1)
        cand_dists = np.minimum(closest[None, :], _pairwise_distances(x[candidates], x))
        best = int(np.argmin(cand_dists.sum(axis=1)))
        centers[i] = x[candidates[best]]
        closest = cand_dists[best]
    return centers


def fit_kmeans(
    vectors: np.ndarray,
    size: int,
    seed: int,
    family: Optional[PatchFamily] = None,
    compression: Optional[int] = None,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
) -> Codebook:
    """
    Lloyd's k-means with k-means++ seeding.

    Stops when the largest centroid shift, relative to the data's RMS spread,
    drops below ``tol`` or after ``max_iter`` iterations. Empty clusters are
    re-seeded at the points farthest from their centroids. The reported
    inertia is that of a final assignment pass with the returned centroids.

    Args:
        vectors: Array (n, d) with at least ``size`` distinct rows
        size: Number of clusters D (>= 2)
        seed: Seed for the k-means++ draws
        family: Family tag recorded on the codebook
        compression: Compression factor recorded on the codebook

    Returns:
        Codebook: Centroids, inertia and per-iteration inertia history

    Raises:
        CodebookError: On too few distinct vectors or non-finite input
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise CodebookError(f"expected a non-empty matrix of vectors, got shape {x.shape}")
    if size < 2:
        raise CodebookError(f"codebook size must be at least 2, got {size}")
    if not np.all(np.isfinite(x)):
        raise CodebookError("vectors contain non-finite values")
    if x.shape[0] < size:
        raise CodebookError(f"need at least {size} vectors for {size} clusters, got {x.shape[0]}")
    n_distinct = np.unique(x, axis=0).shape[0]
    if n_distinct < size:
        raise CodebookError(
            f"need at least {size} distinct vectors for {size} clusters, got {n_distinct}"
        )

    scale = float(np.sqrt(np.mean(np.var(x, axis=0))))
    if scale <= 0.0:
        scale = 1.0

    rng = np.random.default_rng(seed)
    centroids = _kmeans_plus_plus(x, size, rng)
    history: list[float] = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        codes, dists = _nearest(x, centroids)
        history.append(float(dists.sum()))

        sums = np.zeros_like(centroids)
        np.add.at(sums, codes, x)
        counts = np.bincount(codes, minlength=size)
        updated = centroids.copy()
        filled = counts > 0
        updated[filled] = sums[filled] / counts[filled, None]

        empty = np.flatnonzero(~filled)
        if empty.size:
            logger.warning("Re-seeding %d empty clusters at iteration %d", empty.size, n_iter)
            farthest = np.argsort(-dists, kind="stable")
            chosen: list[int] = []
            for idx in farthest:
                if len(chosen) == empty.size or dists[idx] <= 0.0:
                    break
                if not any(np.array_equal(x[idx], x[c]) for c in chosen):
                    chosen.append(int(idx))
            updated[empty[: len(chosen)]] = x[chosen]

        shift = float(np.sqrt(np.max(np.sum((updated - centroids) ** 2, axis=1)))) / scale
        centroids = updated
        if shift < tol and not empty.size:
            break

    _, dists = _nearest(x, centroids)
    inertia = float(dists.sum())
    history.append(inertia)
    logger.info(
        "k-means D=%d%s: %d iterations, inertia %.6g",
        size,
        f" ({family.tag})" if family is not None else "",
        n_iter,
        inertia,
    )
    return Codebook(
        centroids=centroids,
        inertia=inertia,
        family=family,
        compression=compression,
        seed=seed,
        n_iter=n_iter,
        inertia_history=history,
    )


def assign_batch(codebook: Codebook, vectors: np.ndarray) -> np.ndarray:
    """Codes in [0, D) for a batch; squared Euclidean, lowest index wins ties."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != codebook.dim:
        raise CodebookError(f"codebook expects vectors of dim {codebook.dim}, got {x.shape}")
    codes, _ = _nearest(x, codebook.centroids)
    return codes


def assign(codebook: Codebook, vector: np.ndarray) -> int:
    """Code of the nearest centroid for one vector."""
    v = np.asarray(vector, dtype=np.float64)
    if v.ndim != 1:
        raise CodebookError(f"expected a single vector, got shape {v.shape}")
    return int(assign_batch(codebook, v[None, :])[0])


@dataclass(frozen=True)
class FeatureVector:
    """Concatenated per-family code counts (pat | fenv | env | o), length 4*D."""

    counts: np.ndarray
    codebook_size: int

    def block(self, family: PatchFamily) -> np.ndarray:
        i = FAMILIES.index(family)
        return self.counts[i * self.codebook_size : (i + 1) * self.codebook_size]

    def block_sums(self) -> tuple[int, ...]:
        return tuple(int(self.block(f).sum()) for f in FAMILIES)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


class CodebookSet:
    """The four family codebooks sharing one D and one compression factor."""

    def __init__(self, codebooks: Mapping[PatchFamily, Codebook]) -> None:
        missing = [f.tag for f in FAMILIES if f not in codebooks]
        if missing:
            raise CodebookError(f"codebook set is missing families: {missing}")
        sizes = {cb.size for cb in codebooks.values()}
        if len(sizes) != 1:
            raise CodebookError(f"codebooks disagree on D: {sorted(sizes)}")
        factors = {cb.compression for cb in codebooks.values()}
        if len(factors) != 1:
            raise CodebookError(f"codebooks disagree on compression factor: {factors}")
        for family, cb in codebooks.items():
            if cb.family is not None and cb.family is not family:
                raise CodebookError(f"codebook for {cb.family.tag} registered under {family.tag}")
        self.codebooks = dict(codebooks)
        self.size = sizes.pop()
        self.compression = factors.pop()

    def __getitem__(self, family: PatchFamily) -> Codebook:
        return self.codebooks[family]

    @property
    def feature_dim(self) -> int:
        return len(FAMILIES) * self.size

    def featurize_batch(self, encoded: Mapping[PatchFamily, np.ndarray]) -> np.ndarray:
        """
        Count matrix for many chunks at once.

        Args:
            encoded: Per family, array (n_chunks, count_per_chunk, bottleneck_dim)

        Returns:
            Array (n_chunks, 4*D) of int64 counts
        """
        blocks = []
        n_chunks = None
        for family in FAMILIES:
            codes_in = np.asarray(encoded[family])
            if codes_in.ndim != 3 or codes_in.shape[1] != family.count_per_chunk:
                raise CodebookError(
                    f"{family.tag} embeddings must be (n, {family.count_per_chunk}, dim), "
                    f"got {codes_in.shape}"
                )
            if n_chunks is None:
                n_chunks = codes_in.shape[0]
            elif codes_in.shape[0] != n_chunks:
                raise CodebookError("families disagree on the number of chunks")
            codes = assign_batch(self.codebooks[family], codes_in.reshape(-1, codes_in.shape[2]))
            codes = codes.reshape(n_chunks, family.count_per_chunk)
            offsets = codes + self.size * np.arange(n_chunks)[:, None]
            hist = np.bincount(offsets.ravel(), minlength=n_chunks * self.size)
            blocks.append(hist.reshape(n_chunks, self.size))
        return np.concatenate(blocks, axis=1)

    def to_header(self) -> dict[str, Any]:
        return {
            "size": self.size,
            "compression": self.compression,
            "families": [f.tag for f in FAMILIES],
        }


def featurize(
    codebooks: Union[CodebookSet, Mapping[PatchFamily, Codebook]],
    encoded_chunk: Mapping[PatchFamily, np.ndarray],
) -> FeatureVector:
    """
    Bag-of-codewords counts for one encoded chunk.

    Args:
        codebooks: One codebook per family, shared D and compression factor
        encoded_chunk: Per family, array (count_per_chunk, bottleneck_dim)

    Returns:
        FeatureVector: Block sums (120, 12, 10, 1), total 143
    """
    book_set = codebooks if isinstance(codebooks, CodebookSet) else CodebookSet(codebooks)
    missing = [f.tag for f in FAMILIES if f not in encoded_chunk]
    if missing:
        raise CodebookError(f"encoded chunk is missing families: {missing}")
    counts = book_set.featurize_batch({f: np.asarray(encoded_chunk[f])[None] for f in FAMILIES})[0]
    fv = FeatureVector(counts=counts, codebook_size=book_set.size)
    if fv.total != PATCHES_PER_CHUNK:
        raise CodebookError(f"feature vector sums to {fv.total}, expected {PATCHES_PER_CHUNK}")
    return fv


def mask_counts(
    fv: Union[FeatureVector, np.ndarray],
    p: float,
    seed: Any,
) -> Union[FeatureVector, np.ndarray]:
    """
    Zero each count independently with probability ``p``.

    Works on a FeatureVector or any count array; unmasked entries are left
    untouched. Used only when building training batches.

    Raises:
        CodebookError: If ``p`` is outside [0, 1]
    """
    if not 0.0 <= p <= 1.0:
        raise CodebookError(f"mask probability must be in [0, 1], got {p}")
    counts = fv.counts if isinstance(fv, FeatureVector) else np.asarray(fv)
    keep = np.random.default_rng(seed).random(counts.shape) >= p
    masked = np.where(keep, counts, np.zeros_like(counts))
    if isinstance(fv, FeatureVector):
        return FeatureVector(counts=masked, codebook_size=fv.codebook_size)
    return masked
