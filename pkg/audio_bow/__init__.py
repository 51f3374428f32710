"""Attention-free audio tagging with autoencoder codebooks and bag-of-codewords heads."""

__version__ = "0.1.0"
__author__ = "Developer"

from .audio_frontend import AudioClip, MelSpectrogram, SpectrogramChunk
from .classifier import ClassificationHead, HeadSpec
from .codebook import Codebook, CodebookSet, FeatureVector
from .config_manager import ConfigManager, RunConfig
from .encoder_bank import AutoencoderSpec, EncoderBank, EncoderModel
from .manifest import DatasetManifest
from .patching import PatchFamily, PatchSet
from .pipeline import Pipeline

__all__ = [
    "AudioClip",
    "MelSpectrogram",
    "SpectrogramChunk",
    "PatchFamily",
    "PatchSet",
    "AutoencoderSpec",
    "EncoderModel",
    "EncoderBank",
    "Codebook",
    "CodebookSet",
    "FeatureVector",
    "HeadSpec",
    "ClassificationHead",
    "DatasetManifest",
    "ConfigManager",
    "RunConfig",
    "Pipeline",
]
