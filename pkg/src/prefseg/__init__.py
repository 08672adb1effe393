"""Region-normalized preference fine-tuning for segmentation on synthetic data."""

__version__ = "0.1.0"
