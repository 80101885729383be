"""Staged-curriculum training of a small decoder and analysis of its attention heads."""

__version__ = "0.1.0"
