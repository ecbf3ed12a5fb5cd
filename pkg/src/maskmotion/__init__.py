"""Mask-guided controllable video generation at desk scale.

A rectified-flow transformer over a toy collision world, conditioned on
subject masks through a zero-initialized adapter with scheduled latent
injection, plus the analysis stack: attention-based motion-layer ranking,
layer-skip ablations, LoRA placement, and mask/reconstruction metrics.
"""

__version__ = "0.1.0"
