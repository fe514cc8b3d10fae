"""Tri-plane radiance fields and 3D-aware roll-out diffusion at desk scale."""
__version__ = "0.1.0"
