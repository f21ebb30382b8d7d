"""Limited-angle CT to synthetic CT with a multi-volume VQ-VAE and a one-step latent consistency model."""

__version__ = "0.1.0"
