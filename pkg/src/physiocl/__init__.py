"""Contrastive pretraining and confidence-weighted fusion for physiological signals."""

__version__ = "0.1.0"
