"""One-step diffusion face restoration at desk scale."""

__version__ = "0.1.0"
