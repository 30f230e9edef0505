"""Implicit and explicit language guidance for diffusion-backbone perception, at desk scale."""

__version__ = "0.1.0"
