"""Comparative deep generative models: contrastive / multi-group VAEs, MGDA and HSIC-constrained fitting."""

__version__ = "0.1.0"
