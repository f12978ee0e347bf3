"""Single-shot latent forecasting of parametric PDEs with a propagator VAE."""

__version__ = "0.1.0"
