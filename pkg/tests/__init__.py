"""Tests for the audio bag-of-codewords pipeline."""
