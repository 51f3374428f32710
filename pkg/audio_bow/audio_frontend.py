"""Audio ingestion and log-mel frontend.

Decodes PCM WAV files, resamples to 16 kHz, computes 96-bin log-mel
spectrograms (30 ms Hann window, 10 ms hop, 2048-point FFT) and cuts them
into one-second chunks of 96 x 100 frames.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from math import gcd
from pathlib import Path
from typing import Hashable, Union

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .exceptions import ValidationFailure


logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
N_MELS = 96
WINDOW_LENGTH = 480
HOP_LENGTH = 160
N_FFT = 2048
F_MIN = 0.0
F_MAX = 8000.0
LOG_SCALE = 10000.0
CHUNK_FRAMES = 100

FRONTEND_CONVENTIONS = {
    "sample_rate": SAMPLE_RATE,
    "n_mels": N_MELS,
    "window": "hann",
    "window_length": WINDOW_LENGTH,
    "hop_length": HOP_LENGTH,
    "n_fft": N_FFT,
    "mel_scale": "htk",
    "mel_filters": "triangular, peak-normalized",
    "f_min": F_MIN,
    "f_max": F_MAX,
    "compression": "log(1 + 10000 * magnitude)",
    "chunk_frames": CHUNK_FRAMES,
    "chunk_padding": "zero-pad final partial chunk on the right",
}


class AudioFrontendError(ValidationFailure):
    """Exception raised when audio cannot be decoded or analysed."""

    pass


@dataclass(frozen=True)
class AudioClip:
    """Mono audio in [-1, 1] at ``sample_rate`` Hz."""

    samples: np.ndarray
    sample_rate: int
    clip_id: Hashable = None

    def __post_init__(self) -> None:
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise AudioFrontendError(f"clip {self.clip_id!r} must hold non-empty mono samples")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class MelSpectrogram:
    """Log-mel magnitudes, shape (96, T)."""

    values: np.ndarray
    frame_hop_s: float = HOP_LENGTH / SAMPLE_RATE
    window_s: float = WINDOW_LENGTH / SAMPLE_RATE

    @property
    def n_frames(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True)
class SpectrogramChunk:
    """One second of spectrogram, shape (96, 100)."""

    values: np.ndarray
    clip_id: Hashable
    chunk_index: int


def _to_unit_float(data: np.ndarray) -> np.ndarray:
    """Scale integer or float PCM to float64 in [-1, 1]."""
    kind = data.dtype.kind
    if kind == "u" and data.dtype.itemsize == 1:
        return (data.astype(np.float64) - 128.0) / 128.0
    if kind == "i":
        # scipy returns 24-bit PCM left-justified in int32
        full_scale = float(2 ** (8 * data.dtype.itemsize - 1))
        return data.astype(np.float64) / full_scale
    if kind == "f":
        return np.clip(data.astype(np.float64), -1.0, 1.0)
    raise AudioFrontendError(f"unsupported PCM encoding {data.dtype}")


def resample(samples: np.ndarray, orig_rate: int, target_rate: int = SAMPLE_RATE) -> np.ndarray:
    """
    Resample with a windowed-sinc polyphase filter.

    A unity ratio is a pass-through.

    Args:
        samples: Mono float samples
        orig_rate: Source rate in Hz
        target_rate: Destination rate in Hz

    Returns:
        Resampled samples clipped to [-1, 1]
    """
    if orig_rate <= 0 or target_rate <= 0:
        raise AudioFrontendError(f"invalid sample rates {orig_rate} -> {target_rate}")
    if orig_rate == target_rate:
        return samples
    g = gcd(orig_rate, target_rate)
    out = signal.resample_poly(samples, target_rate // g, orig_rate // g, window=("kaiser", 5.0))
    return np.clip(out, -1.0, 1.0)


def decode_and_resample(path: Union[str, Path], clip_id: Hashable = None) -> AudioClip:
    """
    Read a PCM WAV file as a mono 16 kHz clip.

    Args:
        path: WAV file (8/16/24/32-bit int or 32-bit float, any channel count)
        clip_id: Identifier carried by the clip (defaults to the file stem)

    Returns:
        AudioClip: Channels averaged, resampled to 16 kHz

    Raises:
        AudioFrontendError: If the file is unreadable, unsupported or empty
    """
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError, EOFError) as e:
        raise AudioFrontendError(f"Could not read WAV file {path}: {e}") from e

    if data.size == 0:
        raise AudioFrontendError(f"WAV file {path} contains no samples")

    samples = _to_unit_float(data)
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    samples = resample(samples, int(rate))
    logger.debug("Decoded %s: %d Hz -> %d samples at %d Hz", path, rate, samples.size, SAMPLE_RATE)
    return AudioClip(
        samples=samples,
        sample_rate=SAMPLE_RATE,
        clip_id=path.stem if clip_id is None else clip_id,
    )


def hz_to_mel(freq: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """HTK mel scale."""
    return 2595.0 * np.log10(1.0 + np.asarray(freq) / 700.0)


def mel_to_hz(mel: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Inverse of ``hz_to_mel``."""
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


def mel_center_frequencies() -> np.ndarray:
    """Center frequency in Hz of each of the 96 filters."""
    edges = mel_to_hz(np.linspace(hz_to_mel(F_MIN), hz_to_mel(F_MAX), N_MELS + 2))
    return edges[1:-1]


@lru_cache(maxsize=1)
def mel_filterbank() -> np.ndarray:
    """
    Triangular, peak-normalized HTK mel filters over the rfft bins.

    Returns:
        Matrix of shape (96, 1025)
    """
    fft_freqs = np.fft.rfftfreq(N_FFT, d=1.0 / SAMPLE_RATE)
    edges = mel_to_hz(np.linspace(hz_to_mel(F_MIN), hz_to_mel(F_MAX), N_MELS + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs[None, :] - lower) / (center - lower)
    falling = (upper - fft_freqs[None, :]) / (upper - center)
    bank = np.maximum(0.0, np.minimum(rising, falling))
    bank.setflags(write=False)
    return bank


def frame_count(n_samples: int) -> int:
    """Number of STFT frames for a clip of ``n_samples`` samples."""
    if n_samples < WINDOW_LENGTH:
        return 0
    return (n_samples - WINDOW_LENGTH) // HOP_LENGTH + 1


def melspectrogram(clip: AudioClip) -> MelSpectrogram:
    """
    Compute the log-mel spectrogram of a 16 kHz clip.

    Args:
        clip: Clip of at least one window (480 samples)

    Returns:
        MelSpectrogram: 96 x T grid, T = floor((N - 480) / 160) + 1

    Raises:
        AudioFrontendError: If the clip is at the wrong rate or too short
    """
    if clip.sample_rate != SAMPLE_RATE:
        raise AudioFrontendError(
            f"clip {clip.clip_id!r} is at {clip.sample_rate} Hz, expected 16 kHz"
        )
    if clip.samples.size < WINDOW_LENGTH:
        raise AudioFrontendError(
            f"clip {clip.clip_id!r} has {clip.samples.size} samples, "
            f"shorter than one {WINDOW_LENGTH}-sample window"
        )
    if not np.all(np.isfinite(clip.samples)):
        raise AudioFrontendError(f"clip {clip.clip_id!r} contains non-finite samples")

    frames = np.lib.stride_tricks.sliding_window_view(clip.samples, WINDOW_LENGTH)[::HOP_LENGTH]
    window = signal.get_window("hann", WINDOW_LENGTH)
    magnitude = np.abs(np.fft.rfft(frames * window, n=N_FFT, axis=1))
    mel = mel_filterbank() @ magnitude.T
    return MelSpectrogram(values=np.log1p(LOG_SCALE * mel))


def chunk(spec: MelSpectrogram, clip_id: Hashable) -> list[SpectrogramChunk]:
    """
    Split a spectrogram into consecutive 100-frame chunks.

    The final partial chunk is zero-padded on the right.

    Args:
        spec: Spectrogram with at least one frame
        clip_id: Identifier carried by every chunk

    Returns:
        Chunks in time order
    """
    values = spec.values
    n_frames = values.shape[1]
    if n_frames < 1:
        raise AudioFrontendError(f"spectrogram for clip {clip_id!r} has no frames")

    n_chunks = -(-n_frames // CHUNK_FRAMES)
    padded = np.zeros((values.shape[0], n_chunks * CHUNK_FRAMES), dtype=values.dtype)
    padded[:, :n_frames] = values
    return [
        SpectrogramChunk(
            values=padded[:, i * CHUNK_FRAMES : (i + 1) * CHUNK_FRAMES].copy(),
            clip_id=clip_id,
            chunk_index=i,
        )
        for i in range(n_chunks)
    ]


def load_chunks(path: Union[str, Path], clip_id: Hashable) -> np.ndarray:
    """
    Run the whole frontend on one file.

    Clips shorter than one window are zero-padded to a single window so every
    labeled clip yields at least one chunk.

    Returns:
        Array of shape (n_chunks, 96, 100)
    """
    clip = decode_and_resample(path, clip_id)
    if clip.samples.size < WINDOW_LENGTH:
        logger.warning("Clip %s is shorter than one window; zero-padding", clip_id)
        padded = np.zeros(WINDOW_LENGTH)
        padded[: clip.samples.size] = clip.samples
        clip = AudioClip(samples=padded, sample_rate=SAMPLE_RATE, clip_id=clip_id)
    chunks = chunk(melspectrogram(clip), clip_id)
    return np.stack([c.values for c in chunks])
