"""Gloss-free sign language translation with visual-language pretraining, at desk scale."""

__version__ = "0.1.0"
