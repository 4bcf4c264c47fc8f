"""Early action prediction with a future-predictive two-stream video VAE."""

__version__ = "0.1.0"
