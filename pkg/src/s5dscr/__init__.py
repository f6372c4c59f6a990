"""Hyperspectral single-image super-resolution toolkit.

Implements the S5-DSCR / S5-DSCR-S depthwise-separable residual models, the
matching sensor degradation simulator, the data-preparation pipeline, a
training harness, and an evaluation suite, runnable end to end at desk scale
on synthetic data.
"""

__version__ = "0.1.0"

from .bands import BandInfo, Spectrometer
from .resample import (
    DegradationSpec,
    Kernel2D,
    bicubic_upsample,
    decimate,
    degrade,
    gaussian_kernel,
    psf_blur,
)

__all__ = [
    "BandInfo",
    "Spectrometer",
    "DegradationSpec",
    "Kernel2D",
    "bicubic_upsample",
    "decimate",
    "degrade",
    "gaussian_kernel",
    "psf_blur",
    "__version__",
]
