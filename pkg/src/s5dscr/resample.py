"""Sensor degradation simulator and bicubic pre-upsampling.

The degradation pipeline is blur-then-decimate: an asymmetric Gaussian point
spread function models the detector blur, then plain decimation keeps every
``scale``-th sample.  The PSF itself is the model of sensor averaging, so no
second area-averaging is applied at the decimation stage.

All operations act on plain numpy arrays whose last two axes are spatial
(rows = along-track, columns = across-track); any leading axes (channels,
batch) are carried through independently.  Arithmetic runs in float64
internally and is cast back to the input dtype, which keeps constants exactly
constant after float32 rounding.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .bands import BandInfo, Spectrometer
from .errors import ShapeMismatchError

# Per-spectrometer PSF standard deviations in HR-grid pixels, (across, along).
PSF_SIGMAS: dict[Spectrometer, tuple[float, float]] = {
    Spectrometer.UV: (0.37, 0.36),
    Spectrometer.UVIS: (0.44, 0.74),
    Spectrometer.NIR: (0.45, 0.74),
    Spectrometer.SWIR: (0.15, 0.20),
}

DEFAULT_SCALE = 4
DEFAULT_TRUNCATION = 3.0


@dataclass(frozen=True)
class DegradationSpec:
    """PSF sigmas, truncation rule and decimation factor for one spectrometer."""

    spectrometer: Spectrometer
    sigma_across: float
    sigma_along: float
    scale: int = DEFAULT_SCALE
    truncation: float = DEFAULT_TRUNCATION

    def __post_init__(self) -> None:
        if self.sigma_across <= 0 or self.sigma_along <= 0:
            raise ValueError("PSF sigmas must be positive")
        if self.scale < 2:
            raise ValueError("scale must be >= 2")
        if self.truncation <= 0:
            raise ValueError("truncation must be positive")

    @classmethod
    def for_spectrometer(
        cls,
        spectrometer: Spectrometer,
        scale: int = DEFAULT_SCALE,
        truncation: float = DEFAULT_TRUNCATION,
        sigma_multiplier: float = 1.0,
    ) -> DegradationSpec:
        """Built-in sigma table entry for ``spectrometer``.

        ``sigma_multiplier`` exposes the alternative reading of the sigma
        units (e.g. ``scale`` to express them on the LR grid); the default is
        the literal HR-pixel interpretation.
        """
        across, along = PSF_SIGMAS[spectrometer]
        return cls(
            spectrometer=spectrometer,
            sigma_across=across * sigma_multiplier,
            sigma_along=along * sigma_multiplier,
            scale=scale,
            truncation=truncation,
        )

    @classmethod
    def for_band(cls, band: BandInfo | int, **kwargs) -> DegradationSpec:
        if isinstance(band, int):
            band = BandInfo.for_band(band)
        return cls.for_spectrometer(band.spectrometer, **kwargs)

    def kernel(self) -> Kernel2D:
        return gaussian_kernel(self.sigma_across, self.sigma_along, self.truncation)


@dataclass(frozen=True)
class Kernel2D:
    """Normalized 2-D blur kernel with odd dimensions, anchored at the center.

    Separable by construction: built as the outer product of two sampled 1-D
    Gaussians.
    """

    taps: np.ndarray  # [kh, kw], float64, sums to 1

    def __post_init__(self) -> None:
        if self.taps.ndim != 2:
            raise ValueError("kernel taps must be 2-D")
        kh, kw = self.taps.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("kernel dimensions must be odd")

    @property
    def shape(self) -> tuple[int, int]:
        return self.taps.shape


def _gaussian_profile(sigma: float, truncation: float) -> np.ndarray:
    radius = max(1, math.ceil(truncation * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    return np.exp(-(x**2) / (2.0 * sigma**2))


def gaussian_kernel(
    sigma_across: float, sigma_along: float, truncation: float = DEFAULT_TRUNCATION
) -> Kernel2D:
    """Asymmetric Gaussian PSF kernel.

    The along-track sigma controls the row extent, the across-track sigma the
    column extent.  Radius per direction is ``max(1, ceil(truncation*sigma))``
    and the outer product is normalized to sum to 1.
    """
    if sigma_across <= 0 or sigma_along <= 0:
        raise ValueError("PSF sigmas must be positive")
    rows = _gaussian_profile(sigma_along, truncation)
    cols = _gaussian_profile(sigma_across, truncation)
    taps = np.outer(rows, cols)
    taps /= taps.sum()
    return Kernel2D(taps=taps)


def _thread_cap() -> int:
    """Internal parallelism cap from the DSCR_THREADS environment variable."""
    raw = os.environ.get("DSCR_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def psf_blur(cube: np.ndarray, kernel: Kernel2D, edge_mode: str = "replicate") -> np.ndarray:
    """Per-plane 2-D correlation with ``kernel``, same output size.

    Edge handling replicates the border pixel (``edge_mode='replicate'``);
    planes (all leading axes) are independent.
    """
    if edge_mode != "replicate":
        raise ValueError(f"unsupported edge mode {edge_mode!r}")
    cube = np.asarray(cube)
    if cube.ndim < 2:
        raise ShapeMismatchError("blur input must have at least 2 dimensions")
    kh, kw = kernel.shape
    if kh > cube.shape[-2] or kw > cube.shape[-1]:
        raise ShapeMismatchError(
            f"kernel {kernel.shape} larger than image {cube.shape[-2:]}"
        )
    planes = cube.reshape(-1, cube.shape[-2], cube.shape[-1])
    out = np.empty_like(planes)
    taps = kernel.taps

    def _blur_plane(i: int) -> None:
        blurred = ndimage.correlate(planes[i].astype(np.float64), taps, mode="nearest")
        out[i] = blurred.astype(out.dtype)

    cap = _thread_cap()
    if cap > 1 and planes.shape[0] > 1:
        # Disjoint outputs per plane: order-independent, results identical to
        # the serial path.
        with ThreadPoolExecutor(max_workers=cap) as pool:
            list(pool.map(_blur_plane, range(planes.shape[0])))
    else:
        for i in range(planes.shape[0]):
            _blur_plane(i)
    return out.reshape(cube.shape)


def decimate(cube: np.ndarray, scale: int) -> np.ndarray:
    """Keep samples at offsets 0, s, 2s, ... along both spatial axes."""
    cube = np.asarray(cube)
    h, w = cube.shape[-2], cube.shape[-1]
    if h % scale != 0 or w % scale != 0:
        raise ShapeMismatchError(
            f"spatial dims {h}x{w} not divisible by scale {scale}"
        )
    return cube[..., ::scale, ::scale]


def degrade(cube: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """Simulate an LR observation: PSF blur followed by decimation."""
    cube = np.asarray(cube)
    h, w = cube.shape[-2], cube.shape[-1]
    if h % spec.scale != 0 or w % spec.scale != 0:
        raise ShapeMismatchError(
            f"spatial dims {h}x{w} not divisible by scale {spec.scale}"
        )
    return decimate(psf_blur(cube, spec.kernel()), spec.scale)


def _keys_weights(d: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic-convolution kernel evaluated at distances ``d``."""
    d = np.abs(d)
    near = (a + 2.0) * d**3 - (a + 3.0) * d**2 + 1.0
    far = a * d**3 - 5.0 * a * d**2 + 8.0 * a * d - 4.0 * a
    return np.where(d <= 1.0, near, np.where(d < 2.0, far, 0.0))


def _cubic_upsample_axis(n_src: int, scale: int) -> tuple[np.ndarray, np.ndarray]:
    """Tap indices [n_dst, 4] (edge-clamped) and Keys weights for one axis."""
    dst = np.arange(n_src * scale, dtype=np.float64)
    src = (dst + 0.5) / scale - 0.5
    base = np.floor(src).astype(np.int64)
    offsets = np.array([-1, 0, 1, 2], dtype=np.int64)
    idx = base[:, None] + offsets[None, :]
    dist = src[:, None] - idx.astype(np.float64)
    weights = _keys_weights(dist)
    idx = np.clip(idx, 0, n_src - 1)
    return idx, weights


def bicubic_upsample(cube: np.ndarray, scale: int) -> np.ndarray:
    """Per-plane cubic-convolution upscaling by an integer factor.

    Keys kernel with a = -0.5, half-pixel-center coordinate mapping
    ``src = (dst + 0.5)/scale - 0.5``, replicate edge handling.  Output
    spatial dims are exactly ``scale`` times the input's.
    """
    if scale < 2:
        raise ValueError("scale must be >= 2")
    cube = np.asarray(cube)
    if cube.ndim < 2:
        raise ShapeMismatchError("upsample input must have at least 2 dimensions")
    out_dtype = cube.dtype
    x = cube.astype(np.float64)

    ridx, rw = _cubic_upsample_axis(cube.shape[-2], scale)
    # rows: gather the four taps then combine; einsum keeps this single-threaded
    gathered = x[..., ridx, :]  # [..., n_dst_rows, 4, W]
    x = np.einsum("...dkw,dk->...dw", gathered, rw)

    cidx, cw = _cubic_upsample_axis(cube.shape[-1], scale)
    gathered = x[..., :, cidx]  # [..., H_out, n_dst_cols, 4]
    x = np.einsum("...hdk,dk->...hd", gathered, cw)
    return x.astype(out_dtype)
