"""Quantitative evaluation and PCA false-color visualization.

PSNR is computed from the whole-cube MSE (all channels jointly), not as a
mean of per-channel PSNRs; the two differ and this artifact pins the former.
SCC is the Pearson correlation of Laplacian-high-passed images, the standard
pan-sharpening formulation.  Values default to normalized [0, 1] units with
``max_val`` / ``value_range`` = 1; pass the inverse-normalized cubes and the
radiance range for radiance-unit reporting.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegeneratePCAError, ShapeMismatchError

PSNR_IDENTICAL = float("inf")

_LAPLACIAN = np.array([[0.0, -1.0, 0.0], [-1.0, 4.0, -1.0], [0.0, -1.0, 0.0]])


def _as_cube_array(x) -> np.ndarray:
    data = getattr(x, "data", x)
    data = np.asarray(data)
    if data.ndim != 3:
        raise ShapeMismatchError(f"expected a [C,H,W] cube, got shape {data.shape}")
    return data


def psnr(ref, test, max_val: float = 1.0) -> float:
    """10*log10(max^2 / MSE) in dB; +inf when the cubes are identical."""
    ref = _as_cube_array(ref)
    test = _as_cube_array(test)
    if ref.shape != test.shape:
        raise ShapeMismatchError(f"shape mismatch: {ref.shape} vs {test.shape}")
    diff = ref.astype(np.float64) - test.astype(np.float64)
    mse = float((diff * diff).mean())
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(max_val * max_val / mse)


def _gaussian_window_1d(window: int, sigma: float) -> np.ndarray:
    coords = np.arange(window, dtype=np.float64) - window // 2
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(plane: np.ndarray, win1d: np.ndarray) -> np.ndarray:
    # separable correlation; the outputs kept are those whose window lies
    # fully inside, so the padding mode never contributes
    half = win1d.size // 2
    out = ndimage.correlate1d(plane, win1d, axis=0, mode="nearest")
    out = ndimage.correlate1d(out, win1d, axis=1, mode="nearest")
    return out[half:-half, half:-half]


def ssim(
    ref,
    test,
    window: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    value_range: float = 1.0,
) -> float:
    """Single-scale SSIM with Gaussian-weighted local statistics.

    The SSIM map is computed per channel over the valid window positions,
    averaged per channel, then averaged over channels.
    """
    ref = _as_cube_array(ref).astype(np.float64)
    test = _as_cube_array(test).astype(np.float64)
    if ref.shape != test.shape:
        raise ShapeMismatchError(f"shape mismatch: {ref.shape} vs {test.shape}")
    if ref.shape[1] < window or ref.shape[2] < window:
        raise ShapeMismatchError(
            f"spatial dims {ref.shape[1:]} smaller than the {window}-pixel window"
        )
    win = _gaussian_window_1d(window, sigma)
    c1 = (k1 * value_range) ** 2
    c2 = (k2 * value_range) ** 2

    channel_means = []
    for x, y in zip(ref, test):
        mx = _filter_valid(x, win)
        my = _filter_valid(y, win)
        vx = _filter_valid(x * x, win) - mx * mx
        vy = _filter_valid(y * y, win) - my * my
        vxy = _filter_valid(x * y, win) - mx * my
        num = (2.0 * mx * my + c1) * (2.0 * vxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        channel_means.append(float((num / den).mean()))
    return float(np.mean(channel_means))


def _laplacian_valid(plane: np.ndarray) -> np.ndarray:
    out = ndimage.correlate(plane, _LAPLACIAN, mode="nearest")
    return out[1:-1, 1:-1]


def scc(ref, test) -> float:
    """Mean per-channel Pearson correlation of Laplacian-filtered images.

    A channel whose filtered reference or test has zero variance contributes
    0 and raises a warning.
    """
    ref = _as_cube_array(ref).astype(np.float64)
    test = _as_cube_array(test).astype(np.float64)
    if ref.shape != test.shape:
        raise ShapeMismatchError(f"shape mismatch: {ref.shape} vs {test.shape}")
    if ref.shape[1] < 3 or ref.shape[2] < 3:
        raise ShapeMismatchError("spatial dims must be >= 3 for the high-pass filter")
    values = []
    for ch, (x, y) in enumerate(zip(ref, test)):
        fx = _laplacian_valid(x)
        fy = _laplacian_valid(y)
        fx = fx - fx.mean()
        fy = fy - fy.mean()
        denom = math.sqrt(float((fx * fx).sum()) * float((fy * fy).sum()))
        if denom == 0.0:
            warnings.warn(f"zero-variance high-pass channel {ch} contributes 0 to SCC")
            values.append(0.0)
        else:
            values.append(float((fx * fy).sum()) / denom)
    return float(np.mean(values))


@dataclass(frozen=True)
class MethodMetrics:
    method: str
    psnr_db: float
    scc: float
    ssim: float
    n_images: int
    per_cube: tuple = ()


@dataclass
class MetricsReport:
    """Per-method aggregates plus the winner of each metric."""

    band_id: int | None
    rows: list[MethodMetrics]
    best: dict[str, str]

    @staticmethod
    def _fmt(value: float) -> str:
        return "identical" if math.isinf(value) else f"{value:.6f}"

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["band", "method", "psnr_db", "scc", "ssim", "n_images"])
            for row in self.rows:
                writer.writerow(
                    [
                        self.band_id if self.band_id is not None else "",
                        row.method,
                        self._fmt(row.psnr_db),
                        f"{row.scc:.6f}",
                        f"{row.ssim:.6f}",
                        row.n_images,
                    ]
                )

    def to_json(self, path) -> None:
        payload = {
            "band": self.band_id,
            "methods": [
                {
                    "method": row.method,
                    "psnr_db": None if math.isinf(row.psnr_db) else row.psnr_db,
                    "psnr_identical": math.isinf(row.psnr_db),
                    "scc": row.scc,
                    "ssim": row.ssim,
                    "n_images": row.n_images,
                    "per_cube": [
                        {
                            "psnr_db": None if math.isinf(p) else p,
                            "scc": s,
                            "ssim": ss,
                        }
                        for p, s, ss in row.per_cube
                    ],
                }
                for row in self.rows
            ],
            "best": self.best,
        }
        with open(path, "w") as f:
            json.dump(payload, f, indent=1)


def evaluate(
    ref_cubes,
    labeled_tests: dict,
    band_id: int | None = None,
    max_val: float = 1.0,
) -> MetricsReport:
    """Score every labeled method against the reference cubes.

    ``ref_cubes`` is one cube or a list; every method's list must align with
    it.  The best method per metric (highest mean) is marked in the report.
    """
    if not isinstance(ref_cubes, (list, tuple)):
        ref_cubes = [ref_cubes]
    refs = [_as_cube_array(c) for c in ref_cubes]
    if not labeled_tests:
        raise ValueError("no test methods given")

    rows = []
    for method, cubes in labeled_tests.items():
        if not isinstance(cubes, (list, tuple)):
            cubes = [cubes]
        if len(cubes) != len(refs):
            raise ShapeMismatchError(
                f"method {method!r} has {len(cubes)} cubes, reference has {len(refs)}"
            )
        per_cube = []
        for ref, test in zip(refs, cubes):
            test = _as_cube_array(test)
            per_cube.append(
                (psnr(ref, test, max_val=max_val), scc(ref, test),
                 ssim(ref, test, value_range=max_val))
            )
        rows.append(
            MethodMetrics(
                method=method,
                psnr_db=float(np.mean([p for p, _, _ in per_cube])),
                scc=float(np.mean([s for _, s, _ in per_cube])),
                ssim=float(np.mean([s for _, _, s in per_cube])),
                n_images=len(per_cube),
                per_cube=tuple(per_cube),
            )
        )
    best = {
        "psnr_db": max(rows, key=lambda r: r.psnr_db).method,
        "scc": max(rows, key=lambda r: r.scc).method,
        "ssim": max(rows, key=lambda r: r.ssim).method,
    }
    return MetricsReport(band_id=band_id, rows=rows, best=best)


def pca_basis(ref) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-3 principal directions of the reference cube's channel space.

    Pixels are the samples, channels the variables.  Returns (mean [C],
    components [C,3], eigenvalues [3]); component signs are fixed so the
    largest-magnitude coefficient is positive.
    """
    ref = _as_cube_array(ref).astype(np.float64)
    c = ref.shape[0]
    if c < 3:
        raise ShapeMismatchError(f"PCA visualization needs >= 3 channels, got {c}")
    flat = ref.reshape(c, -1).T  # [n_pixels, C]
    mean = flat.mean(axis=0)
    centered = flat - mean
    cov = centered.T @ centered / max(1, centered.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:3]
    eigvals = eigvals[order]
    components = eigvecs[:, order]
    if eigvals[0] <= 0.0 or not np.isfinite(eigvals).all():
        raise DegeneratePCAError("reference cube has no channel variance")
    for j in range(3):
        k = np.argmax(np.abs(components[:, j]))
        if components[k, j] < 0:
            components[:, j] = -components[:, j]
    return mean, components, eigvals


def pca_rgb(ref, display) -> np.ndarray:
    """Project ``display`` onto the reference's top-3 PCA components.

    Each component is min-max stretched to [0, 255] using the range of the
    *reference* projection, so different methods displayed against the same
    reference share one color mapping.  Returns an [H, W, 3] uint8 image.
    """
    ref_arr = _as_cube_array(ref).astype(np.float64)
    disp = _as_cube_array(display).astype(np.float64)
    if ref_arr.shape != disp.shape:
        raise ShapeMismatchError(f"shape mismatch: {ref_arr.shape} vs {disp.shape}")
    mean, components, _ = pca_basis(ref_arr)
    c, h, w = disp.shape
    ref_proj = (ref_arr.reshape(c, -1).T - mean) @ components
    disp_proj = (disp.reshape(c, -1).T - mean) @ components

    out = np.zeros((h * w, 3), dtype=np.uint8)
    for j in range(3):
        lo = ref_proj[:, j].min()
        hi = ref_proj[:, j].max()
        if not lo < hi:
            raise DegeneratePCAError(f"PCA component {j} has zero range")
        stretched = (disp_proj[:, j] - lo) / (hi - lo) * 255.0
        out[:, j] = np.clip(np.rint(stretched), 0, 255).astype(np.uint8)
    return out.reshape(h, w, 3)
