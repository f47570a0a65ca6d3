"""Desk-scale singing-voice synthesis lab.

A residual-vector-quantized mel codec, a musical-score condition encoder
with data-driven priors, and a latent diffusion generator, all on a small
hand-written reverse-mode autodiff substrate, driven by the `minisvs` CLI.
"""

__version__ = "0.1.0"
