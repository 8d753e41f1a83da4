"""Flow-guided video inpainting with noise-optimized diffusion sampling."""

__version__ = "0.1.0"
