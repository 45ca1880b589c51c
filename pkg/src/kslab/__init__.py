"""Cardiac cine k-space toolkit: mistriggering artefact simulation, per-line
corruption detection, data-consistent iterative correction, and a compact
segmentation model, evaluated end to end on a synthetic beating-heart phantom.
"""

__version__ = "0.1.0"

from .core import fft2, ifft2, magnitude, ValidationError

__all__ = ["fft2", "ifft2", "magnitude", "ValidationError", "__version__"]
