"""Dense-matrix approximate Bayesian inference for latent Gaussian models."""

__version__ = "0.1.0"
