"""Desk-scale diffusion virtual try-on: numpy autodiff, a small UNet, and
stacked-canvas garment transfer with predicted inpainting masks."""

__version__ = "0.1.0"
