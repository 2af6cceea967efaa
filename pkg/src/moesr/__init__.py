"""Region-adaptive mixture-of-experts latent-diffusion super-resolution."""

from . import autodiff, fourier, kernels

__all__ = ["autodiff", "fourier", "kernels"]
__version__ = "0.1.0"
