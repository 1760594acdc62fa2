"""Plug-in guide distillation for diffusion denoisers, at desk scale.

A frozen base denoiser is steered by a small external guide that adds features
to its decoder, so one guided pass reproduces two-pass classifier-free guidance.
"""

__version__ = "0.1.0"
