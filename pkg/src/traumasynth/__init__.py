"""Paired image/label inpainting for lesioned brain volumes.

Synthesizes lesioned brain images together with region label maps from
normal templates plus lesion masks, and benchmarks the synthesized pairs
as data augmentation for 2D/3D region segmentation.
"""

__version__ = "0.1.0"
