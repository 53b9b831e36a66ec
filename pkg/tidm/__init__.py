"""Text-and-anchor-image guided latent diffusion at desk scale."""

__version__ = "0.1.0"
