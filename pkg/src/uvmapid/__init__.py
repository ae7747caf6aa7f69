"""ID-conditioned UV texture-map diffusion at desk scale."""

__version__ = "0.1.0"
