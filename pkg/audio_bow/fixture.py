"""Deterministic synthetic multi-label dataset for end-to-end runs.

Each class is one sound generator; a clip's labels are exactly the
generators mixed into it.
"""

import json
import logging
from pathlib import Path
from typing import Any, Callable, Union

import numpy as np
import pandas as pd
from scipy import signal
from scipy.io import wavfile

from .audio_frontend import SAMPLE_RATE
from .exceptions import ValidationFailure


logger = logging.getLogger(__name__)

CLASS_NAMES = (
    "tone_250",
    "tone_1000",
    "tone_3500",
    "chirp_up",
    "chirp_down",
    "noise_low",
    "noise_high",
    "clicks",
)
ALT_SAMPLE_RATE = 32000
EXTRA_LABEL_PROB = 0.15
BACKGROUND_LEVEL = 0.003
PEAK = 0.8

# (time axis, sample rate, rng) -> waveform
SoundGenerator = Callable[[np.ndarray, float, np.random.Generator], np.ndarray]


class FixtureError(ValidationFailure):
    """Exception raised for impossible fixture parameters."""

    pass


def _tone(freq: float) -> SoundGenerator:
    def render(t: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
        return np.sin(2.0 * np.pi * freq * t + rng.uniform(0.0, 2.0 * np.pi))

    return render


def _chirp(f0: float, f1: float) -> SoundGenerator:
    def render(t: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
        return signal.chirp(t, f0=f0, t1=t[-1], f1=f1, method="logarithmic")

    return render


def _noise_band(low: float, high: float) -> SoundGenerator:
    def render(t: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
        sos = signal.butter(4, [low, high], btype="bandpass", fs=rate, output="sos")
        band = signal.sosfilt(sos, rng.standard_normal(t.size))
        return band / max(float(np.sqrt(np.mean(band**2))), 1e-12) * 0.5

    return render


def _clicks(t: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    out = np.zeros(t.size)
    period = int(rate / 8.0)
    decay = np.exp(-np.arange(int(0.004 * rate)) / (0.0008 * rate))
    for start in range(int(rng.integers(0, period)), t.size, period):
        stop = min(start + decay.size, t.size)
        out[start:stop] += decay[: stop - start]
    return out


GENERATORS: dict[str, SoundGenerator] = {
    "tone_250": _tone(250.0),
    "tone_1000": _tone(1000.0),
    "tone_3500": _tone(3500.0),
    "chirp_up": _chirp(300.0, 3000.0),
    "chirp_down": _chirp(3000.0, 300.0),
    "noise_low": _noise_band(100.0, 600.0),
    "noise_high": _noise_band(4000.0, 7000.0),
    "clicks": _clicks,
}


def _split_for(index: int) -> str:
    slot = index % 20
    if slot < 14:
        return "train"
    if slot < 17:
        return "val"
    return "test"


def fixture_recipe(seed: int = 0, n_clips: int = 600, n_classes: int = 8) -> list[dict[str, Any]]:
    """
    The generating recipe of every fixture clip.

    Clip ``i`` always contains class ``i % n_classes`` and each other class
    with probability 0.15; durations are 1 to 3 s and every fifth clip is
    stored at 32 kHz.
    """
    if not 1 <= n_classes <= len(CLASS_NAMES):
        raise FixtureError(f"n_classes must be in [1, {len(CLASS_NAMES)}], got {n_classes}")
    if n_clips < 1:
        raise FixtureError(f"n_clips must be positive, got {n_clips}")
    names = CLASS_NAMES[:n_classes]
    recipe = []
    for i in range(n_clips):
        rng = np.random.default_rng([seed, i])
        present = [i % n_classes] + [
            k for k in range(n_classes) if k != i % n_classes and rng.random() < EXTRA_LABEL_PROB
        ]
        present.sort()
        recipe.append(
            {
                "clip_id": f"clip_{i:04d}",
                "file": f"audio/clip_{i:04d}.wav",
                "split": _split_for(i),
                "labels": [names[k] for k in present],
                "gains": {names[k]: round(float(rng.uniform(0.5, 1.0)), 4) for k in present},
                "duration_s": round(float(rng.uniform(1.0, 3.0)), 2),
                "sample_rate": ALT_SAMPLE_RATE if i % 5 == 0 else SAMPLE_RATE,
            }
        )
    return recipe


def render_clip(entry: dict[str, Any], seed: int, index: int) -> np.ndarray:
    """16-bit PCM samples for one recipe entry."""
    rate = entry["sample_rate"]
    n = int(round(entry["duration_s"] * rate))
    t = np.arange(n) / rate
    rng = np.random.default_rng([seed, index, 1])
    mix = BACKGROUND_LEVEL * rng.standard_normal(n)
    for name in entry["labels"]:
        mix += entry["gains"][name] * GENERATORS[name](t, rate, rng)
    mix *= PEAK / max(float(np.max(np.abs(mix))), PEAK)
    return np.round(mix * 32767.0).astype(np.int16)


def make_synthetic_fixture(
    out_dir: Union[str, Path],
    seed: int = 0,
    n_clips: int = 600,
    n_classes: int = 8,
) -> Path:
    """
    Write the fixture's WAV files, ``manifest.csv``, ``vocabulary.csv`` and
    ``recipe.json`` under ``out_dir``.

    Returns:
        Path of the manifest CSV
    """
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    recipe = fixture_recipe(seed, n_clips, n_classes)
    for i, entry in enumerate(recipe):
        wavfile.write(out_dir / entry["file"], entry["sample_rate"], render_clip(entry, seed, i))

    manifest = pd.DataFrame(
        {
            "clip_id": [e["clip_id"] for e in recipe],
            "path": [e["file"] for e in recipe],
            "split": [e["split"] for e in recipe],
            "labels": [";".join(e["labels"]) for e in recipe],
        }
    )
    manifest_path = out_dir / "manifest.csv"
    manifest.to_csv(manifest_path, index=False)
    pd.DataFrame({"index": range(n_classes), "name": CLASS_NAMES[:n_classes]}).to_csv(
        out_dir / "vocabulary.csv", index=False
    )
    (out_dir / "recipe.json").write_text(
        json.dumps({"seed": seed, "clips": recipe}, indent=2, sort_keys=True) + "\n"
    )
    logger.info("Wrote synthetic fixture: %d clips, %d classes in %s", n_clips, n_classes, out_dir)
    return manifest_path
