"""Streaming source-free test-time adaptation for single-lead EEG sleep staging."""

__version__ = "0.1.0"
