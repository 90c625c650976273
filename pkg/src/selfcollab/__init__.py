"""Unsupervised image restoration with prompt-guided parallel GAN synthesis
and self-collaboration (replace-and-retrain) restorer boosting."""

__version__ = "0.1.0"
