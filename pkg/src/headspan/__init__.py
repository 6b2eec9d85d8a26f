"""Personalized lifelong head avatars built on 2D Gaussian surfels.

A canonical surfel set is deformed by a prunable bank of hash-encoded
feature fields (one row of blend weights per lifestage), animated by a
blendshape-driven warping field, rendered differentiably, and meshed by
depth fusion. See README.md for the CLI and the render service.
"""

from .backend import active_backend

__version__ = "0.1.0"

__all__ = ["active_backend", "__version__"]
