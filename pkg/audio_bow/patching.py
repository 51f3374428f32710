"""Patch families cut from a 96 x 100 spectrogram chunk.

Every patch is flattened row-major (frequency-major). Ordering:

    SpectralPatch     120 tiles of 8 x 10, band-major then time
    FreqBandEnvelope  12 strips of 8 x 100, ascending frequency
    SpectralEnvelope  10 slabs of 96 x 10, ascending time
    WholeSpectrogram  1 bicubic 8 x 10 thumbnail
"""

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np

from .audio_frontend import CHUNK_FRAMES, N_MELS
from .exceptions import ValidationFailure


CHUNK_SHAPE = (N_MELS, CHUNK_FRAMES)
CUBIC_A = -0.5
PATCHES_PER_CHUNK = 143

PATCHING_CONVENTIONS = {
    "flattening": "row-major (frequency-major)",
    "spectral_patch_order": "band-major, then time",
    "bicubic_kernel": "Catmull-Rom a=-0.5, clamp-to-edge, half-pixel centers",
}


class PatchingError(ValidationFailure):
    """Exception raised when a chunk has the wrong shape."""

    pass


class PatchFamily(str, Enum):
    """The four views of a chunk, in feature-vector order."""

    SPECTRAL_PATCH = "pat"
    FREQ_BAND_ENVELOPE = "fenv"
    SPECTRAL_ENVELOPE = "env"
    WHOLE_SPECTROGRAM = "o"

    @property
    def tag(self) -> str:
        return self.value

    @property
    def patch_rows(self) -> int:
        return _GEOMETRY[self][0]

    @property
    def patch_cols(self) -> int:
        return _GEOMETRY[self][1]

    @property
    def count_per_chunk(self) -> int:
        return _GEOMETRY[self][2]

    @property
    def input_dim(self) -> int:
        return self.patch_rows * self.patch_cols

    @classmethod
    def from_tag(cls, tag: str) -> "PatchFamily":
        return cls(tag)


_GEOMETRY = {
    PatchFamily.SPECTRAL_PATCH: (8, 10, 120),
    PatchFamily.FREQ_BAND_ENVELOPE: (8, 100, 12),
    PatchFamily.SPECTRAL_ENVELOPE: (96, 10, 10),
    PatchFamily.WHOLE_SPECTROGRAM: (8, 10, 1),
}

FAMILIES = tuple(PatchFamily)


@dataclass(frozen=True)
class PatchSet:
    """Flattened patches of one chunk, keyed by family."""

    patches: dict[PatchFamily, np.ndarray]

    def __post_init__(self) -> None:
        for family in FAMILIES:
            block = self.patches.get(family)
            if block is None or block.shape != (family.count_per_chunk, family.input_dim):
                raise PatchingError(f"patch set is missing or misshapes family {family.tag}")

    def __getitem__(self, family: PatchFamily) -> np.ndarray:
        return self.patches[family]

    @property
    def total(self) -> int:
        return sum(block.shape[0] for block in self.patches.values())


def _check_chunks(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values)
    if values.shape[-2:] != CHUNK_SHAPE or values.ndim not in (2, 3):
        raise PatchingError(f"expected chunk(s) of shape {CHUNK_SHAPE}, got {values.shape}")
    return values


def extract_spectral_patches(chunk: np.ndarray) -> np.ndarray:
    """120 tiles of 8 x 10 -> array (120, 80)."""
    c = _check_chunks(chunk)
    return c.reshape(*c.shape[:-2], 12, 8, 10, 10).swapaxes(-3, -2).reshape(*c.shape[:-2], 120, 80)


def extract_freq_band_envelopes(chunk: np.ndarray) -> np.ndarray:
    """12 horizontal strips of 8 x 100 -> array (12, 800)."""
    c = _check_chunks(chunk)
    return c.reshape(*c.shape[:-2], 12, 800)


def extract_spectral_envelopes(chunk: np.ndarray) -> np.ndarray:
    """10 vertical slabs of 96 x 10 -> array (10, 960)."""
    c = _check_chunks(chunk)
    return c.reshape(*c.shape[:-2], 96, 10, 10).swapaxes(-3, -2).reshape(*c.shape[:-2], 10, 960)


def cubic_kernel(x: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    """Keys cubic convolution kernel; a = -0.5 gives Catmull-Rom."""
    x = np.abs(x)
    near = ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    far = ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


@lru_cache(maxsize=None)
def bicubic_weights(in_size: int, out_size: int) -> np.ndarray:
    """
    Resampling matrix for one axis.

    Output sample j sits at source coordinate (j + 0.5) * in/out - 0.5; the
    four nearest taps are weighted by the cubic kernel, clamped to the edge.

    Returns:
        Matrix of shape (out_size, in_size)
    """
    scale = in_size / out_size
    weights = np.zeros((out_size, in_size))
    for j in range(out_size):
        src = (j + 0.5) * scale - 0.5
        base = int(np.floor(src))
        for tap in range(base - 1, base + 3):
            weights[j, min(max(tap, 0), in_size - 1)] += cubic_kernel(np.array(src - tap))
    weights.setflags(write=False)
    return weights


def downsample_whole(chunk: np.ndarray) -> np.ndarray:
    """Bicubic 96 x 100 -> 8 x 10 thumbnail, flattened -> array (1, 80)."""
    c = _check_chunks(chunk)
    rows = bicubic_weights(N_MELS, 8)
    cols = bicubic_weights(CHUNK_FRAMES, 10)
    thumb = rows @ c @ cols.T
    return thumb.reshape(*c.shape[:-2], 1, 80)


_EXTRACTORS = {
    PatchFamily.SPECTRAL_PATCH: extract_spectral_patches,
    PatchFamily.FREQ_BAND_ENVELOPE: extract_freq_band_envelopes,
    PatchFamily.SPECTRAL_ENVELOPE: extract_spectral_envelopes,
    PatchFamily.WHOLE_SPECTROGRAM: downsample_whole,
}


def extract_patch_set(chunk: np.ndarray) -> PatchSet:
    """All 143 patches of one chunk."""
    c = _check_chunks(chunk)
    if c.ndim != 2:
        raise PatchingError(f"expected a single chunk, got shape {c.shape}")
    return PatchSet({family: _EXTRACTORS[family](c) for family in FAMILIES})


def family_vectors(chunks: np.ndarray, family: PatchFamily) -> np.ndarray:
    """
    Patches of one family for a stack of chunks.

    Args:
        chunks: Array (n, 96, 100)
        family: Which family to cut

    Returns:
        Array (n * count_per_chunk, input_dim), chunk-major
    """
    c = _check_chunks(chunks)
    if c.ndim == 2:
        c = c[None]
    return _EXTRACTORS[family](c).reshape(-1, family.input_dim)


def assemble_spectral_patches(patches: np.ndarray) -> np.ndarray:
    """Inverse of ``extract_spectral_patches``."""
    return np.asarray(patches).reshape(12, 10, 8, 10).swapaxes(1, 2).reshape(CHUNK_SHAPE)


def assemble_freq_band_envelopes(strips: np.ndarray) -> np.ndarray:
    """Inverse of ``extract_freq_band_envelopes``."""
    return np.asarray(strips).reshape(CHUNK_SHAPE)


def assemble_spectral_envelopes(slabs: np.ndarray) -> np.ndarray:
    """Inverse of ``extract_spectral_envelopes``."""
    return np.asarray(slabs).reshape(10, 96, 10).swapaxes(0, 1).reshape(CHUNK_SHAPE)
