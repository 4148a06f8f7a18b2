"""Sounding-video generation at desk scale.

Two-stage pipeline: a hierarchical multi-modal autoencoder compresses audio
images and video frames into perceptual latents with a shared semantic space,
and a joint transformer diffusion model generates concatenated audio/video
latents with cross-modal classifier-free guidance.
"""

__version__ = "0.1.0"
