"""Gated attention MIL for Gleason grading of prostate biopsies, with its validation harness."""

__version__ = "0.1.0"
