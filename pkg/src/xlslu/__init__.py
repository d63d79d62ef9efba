"""Contrastive training for zero-shot cross-lingual intent detection and slot
filling, built on a small numpy autodiff engine."""

__version__ = "0.1.0"
