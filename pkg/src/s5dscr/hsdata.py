"""On-disk cube format, synthetic data generation, and the data pipeline.

The pipeline stages in dataset-preparation order: crop cubes into a
non-overlapping tile grid, clip and reject outlier tiles, assign tiles to
train/val/test splits, normalize with statistics from the training split
only, degrade the normalized HR tiles to LR, and cut aligned patch pairs.

The HSC cube file is the single on-disk unit: a fixed 52-byte header
followed by a float32 little-endian payload, with a JSON sidecar for
provenance and normalization statistics.  Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bands import BandInfo
from .errors import (
    BadMagicError,
    DataError,
    DegenerateRangeError,
    HeaderMismatchError,
    NonFiniteDataError,
    ShapeMismatchError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from .resample import DegradationSpec, Kernel2D, degrade, psf_blur

HSC_MAGIC = b"HSC1"
HSC_VERSION = 1
# magic(4) version(u16) band_id(u16) C,H,W(u32 each) wl_lo,wl_hi(f64 each) reserved(16)
_HEADER_FMT = "<4sHHIIIdd16s"
_HEADER_SIZE = struct.calcsize(_HEADER_FMT)

DEFAULT_FRACTIONS = (0.65, 0.20, 0.15)


@dataclass
class HsCube:
    """A single hyperspectral image: [C, H, W] float32 radiance plus metadata.

    ``reduced_channels`` must be declared explicitly when the cube carries
    fewer channels than the physical band (desk-scale cubes); a silent
    mismatch is rejected.
    """

    band: BandInfo
    data: np.ndarray
    provenance: str = ""
    reduced_channels: bool = False

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ShapeMismatchError(f"cube data must be [C,H,W], got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise NonFiniteDataError("cube contains NaN or Inf values")
        c = self.data.shape[0]
        if c > self.band.n_channels:
            raise ShapeMismatchError(
                f"{c} channels exceed band {self.band.band_id}'s {self.band.n_channels}"
            )
        if c != self.band.n_channels and not self.reduced_channels:
            raise ShapeMismatchError(
                f"cube has {c} channels but band {self.band.band_id} has "
                f"{self.band.n_channels}; declare reduced_channels=True for subsets"
            )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    def with_data(self, data: np.ndarray, provenance: str | None = None) -> HsCube:
        return HsCube(
            band=self.band,
            data=data,
            provenance=self.provenance if provenance is None else provenance,
            reduced_channels=data.shape[0] != self.band.n_channels,
        )


@dataclass(frozen=True)
class NormStats:
    """Affine normalization range: 1st/99th percentile of the training tiles."""

    lo: float
    hi: float

    def __post_init__(self) -> None:
        if not (self.lo < self.hi):
            raise DegenerateRangeError(f"degenerate normalization range [{self.lo}, {self.hi}]")

    def apply(self, values: np.ndarray) -> np.ndarray:
        out = (values.astype(np.float32) - np.float32(self.lo)) / np.float32(self.hi - self.lo)
        return np.clip(out, 0.0, 1.0)

    def invert(self, values: np.ndarray) -> np.ndarray:
        return values.astype(np.float32) * np.float32(self.hi - self.lo) + np.float32(self.lo)

    def to_dict(self) -> dict:
        return {"lo": self.lo, "hi": self.hi}

    @classmethod
    def from_dict(cls, d: dict) -> NormStats:
        return cls(lo=float(d["lo"]), hi=float(d["hi"]))


@dataclass(frozen=True)
class TileOrigin:
    cube_id: str
    row: int
    col: int

    def to_dict(self) -> dict:
        return {"cube_id": self.cube_id, "row": self.row, "col": self.col}

    @classmethod
    def from_dict(cls, d: dict) -> TileOrigin:
        return cls(cube_id=str(d["cube_id"]), row=int(d["row"]), col=int(d["col"]))


@dataclass
class TileSet:
    """Uniformly shaped tiles plus per-tile origin records and rejections.

    ``rejected`` indices refer to the tile ordering of the *input* the filter
    ran on, paired with a machine-readable reason.
    """

    tiles: list[HsCube]
    source_ids: list[TileOrigin]
    rejected: list[tuple[int, str]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.tiles) != len(self.source_ids):
            raise ValueError("tiles and source_ids must have equal length")
        shapes = {t.shape for t in self.tiles}
        if len(shapes) > 1:
            raise ShapeMismatchError(f"tiles are not uniformly shaped: {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.tiles)

    @property
    def band(self) -> BandInfo:
        return self.tiles[0].band


@dataclass
class PatchPair:
    """One aligned LR/HR training pair cut from a tile."""

    lr: np.ndarray
    hr: np.ndarray
    tile_id: str
    offset: tuple[int, int]  # (row, col) on the LR grid

    def __post_init__(self) -> None:
        if self.lr.shape[0] != self.hr.shape[0]:
            raise ShapeMismatchError("lr and hr patch channel counts differ")
        for axis in (1, 2):
            if self.hr.shape[axis] % self.lr.shape[axis] != 0:
                raise ShapeMismatchError(
                    f"hr dims {self.hr.shape[1:]} are not an integer multiple "
                    f"of lr dims {self.lr.shape[1:]}"
                )
        if self.hr.shape[1] // self.lr.shape[1] != self.hr.shape[2] // self.lr.shape[2]:
            raise ShapeMismatchError("hr/lr scale differs between axes")

    @property
    def scale(self) -> int:
        return self.hr.shape[1] // self.lr.shape[1]


@dataclass(frozen=True)
class SplitAssignment:
    """Disjoint, exhaustive train/val/test tile indices."""

    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]
    seed: int
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS

    def __post_init__(self) -> None:
        all_idx = list(self.train) + list(self.val) + list(self.test)
        if len(set(all_idx)) != len(all_idx):
            raise ValueError("split index lists overlap")
        if sorted(all_idx) != list(range(len(all_idx))):
            raise ValueError("split index lists do not partition 0..n-1")

    def to_dict(self) -> dict:
        return {
            "train": list(self.train),
            "val": list(self.val),
            "test": list(self.test),
            "seed": self.seed,
            "fractions": list(self.fractions),
        }

    @classmethod
    def from_dict(cls, d: dict) -> SplitAssignment:
        return cls(
            train=tuple(d["train"]),
            val=tuple(d["val"]),
            test=tuple(d["test"]),
            seed=int(d["seed"]),
            fractions=tuple(d["fractions"]),
        )


# ---------------------------------------------------------------------------
# HSC file format
# ---------------------------------------------------------------------------

def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def write_cube(cube: HsCube, path: str | Path, norm_stats: NormStats | None = None) -> None:
    """Write ``cube`` as an HSC file plus its JSON sidecar (lossless)."""
    path = Path(path)
    c, h, w = cube.shape
    lo, hi = cube.band.wavelength_range_nm
    header = struct.pack(
        _HEADER_FMT, HSC_MAGIC, HSC_VERSION, cube.band.band_id, c, h, w, lo, hi, b"\x00" * 16
    )
    payload = np.ascontiguousarray(cube.data, dtype="<f4").tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)
    sidecar = {"provenance": cube.provenance}
    if norm_stats is not None:
        sidecar["norm_stats"] = norm_stats.to_dict()
    _sidecar_path(path).write_text(json.dumps(sidecar, indent=1))


def read_cube(path: str | Path) -> tuple[HsCube, NormStats | None]:
    """Read an HSC file; returns the cube and the sidecar's NormStats, if any."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4 or raw[:4] != HSC_MAGIC:
        raise BadMagicError(f"{path}: not an HSC file (magic {raw[:4]!r})")
    if len(raw) < _HEADER_SIZE:
        raise TruncatedFileError(f"{path}: header truncated ({len(raw)} bytes)")
    _, version, band_id, c, h, w, wl_lo, wl_hi, _ = struct.unpack(
        _HEADER_FMT, raw[:_HEADER_SIZE]
    )
    if version != HSC_VERSION:
        raise UnsupportedVersionError(f"{path}: HSC version {version} not supported")
    try:
        band = BandInfo.for_band(band_id)
    except ValueError as exc:
        raise HeaderMismatchError(f"{path}: {exc}") from exc
    if (wl_lo, wl_hi) != band.wavelength_range_nm:
        raise HeaderMismatchError(
            f"{path}: header wavelengths ({wl_lo}, {wl_hi}) do not match "
            f"band {band_id}'s {band.wavelength_range_nm}"
        )
    expected = c * h * w * 4
    got = len(raw) - _HEADER_SIZE
    if got < expected:
        raise TruncatedFileError(f"{path}: payload holds {got} bytes, header announces {expected}")
    if got > expected:
        raise HeaderMismatchError(f"{path}: {got - expected} trailing bytes beyond payload")
    data = np.frombuffer(raw[_HEADER_SIZE:], dtype="<f4").reshape(c, h, w)
    if not np.isfinite(data).all():
        raise NonFiniteDataError(f"{path}: payload contains non-finite values")

    provenance = ""
    norm_stats = None
    sidecar = _sidecar_path(path)
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        provenance = meta.get("provenance", "")
        if meta.get("norm_stats") is not None:
            norm_stats = NormStats.from_dict(meta["norm_stats"])
    cube = HsCube(
        band=band,
        data=data.copy(),
        provenance=provenance,
        reduced_channels=c != band.n_channels,
    )
    return cube, norm_stats


# ---------------------------------------------------------------------------
# Synthetic cubes
# ---------------------------------------------------------------------------

def _clamped_gaussian_kernel(sigma: float, height: int, width: int) -> Kernel2D:
    # Blur radius is clamped so the kernel always fits the field.
    radius = max(1, math.ceil(3.0 * sigma))
    radius = min(radius, (min(height, width) - 1) // 2)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    profile = np.exp(-(x**2) / (2.0 * sigma**2))
    taps = np.outer(profile, profile)
    return Kernel2D(taps=taps / taps.sum())


def synth_cube(
    n_channels: int,
    height: int,
    width: int,
    seed: int,
    spatial_sigma: float = 2.0,
    channel_mix: float = 0.9,
    band_id: int = 3,
) -> HsCube:
    """Deterministic synthetic radiance cube, a desk-scale sensor stand-in.

    A shared Gaussian-blurred noise field gives every channel the same
    spatial structure; each channel adds its own independently blurred noise,
    weighted by ``channel_mix``.  Adjacent channels therefore correlate, which
    is the structure the pointwise stage of the network exploits.  Values are
    affinely mapped to [0.1, 0.9].
    """
    if n_channels < 1:
        raise ValueError("n_channels must be >= 1")
    if height < 8 or width < 8:
        raise ValueError("spatial dims must be >= 8")
    if spatial_sigma <= 0:
        raise ValueError("spatial_sigma must be positive")
    if not (0.0 <= channel_mix <= 1.0):
        raise ValueError("channel_mix must lie in [0, 1]")

    rng = np.random.default_rng(seed)
    kernel = _clamped_gaussian_kernel(spatial_sigma, height, width)
    base = psf_blur(rng.standard_normal((height, width)), kernel)
    indep = psf_blur(rng.standard_normal((n_channels, height, width)), kernel)
    cube = channel_mix * base[None, :, :] + (1.0 - channel_mix) * indep

    lo, hi = float(cube.min()), float(cube.max())
    if not lo < hi:
        raise DegenerateRangeError("synthetic field is constant; cannot map to [0.1, 0.9]")
    cube = 0.1 + 0.8 * (cube - lo) / (hi - lo)

    band = BandInfo.for_band(band_id)
    provenance = (
        f"synth_cube(n_channels={n_channels}, height={height}, width={width}, "
        f"seed={seed}, spatial_sigma={spatial_sigma}, channel_mix={channel_mix}, "
        f"band_id={band_id})"
    )
    return HsCube(
        band=band,
        data=cube.astype(np.float32),
        provenance=provenance,
        reduced_channels=n_channels != band.n_channels,
    )


# ---------------------------------------------------------------------------
# Tiling, filtering, normalization, splitting, patching
# ---------------------------------------------------------------------------

def crop_tiles(
    cube: HsCube,
    tile_h: int,
    tile_w: int,
    scale: int = 4,
    cube_id: str | None = None,
) -> TileSet:
    """Non-overlapping grid tiling, row-major, leftover margins dropped.

    Tile dims are first trimmed down to the nearest multiple of ``scale`` so
    every tile can be degraded without remainder (the across-track width of
    the SWIR crops is not a multiple of 4).
    """
    if tile_h < 1 or tile_w < 1:
        raise ValueError("tile dims must be positive")
    eff_h = (tile_h // scale) * scale
    eff_w = (tile_w // scale) * scale
    if eff_h < scale or eff_w < scale:
        raise ValueError(f"tile dims {tile_h}x{tile_w} too small for scale {scale}")
    _, h, w = cube.shape
    if eff_h > h or eff_w > w:
        raise ShapeMismatchError(
            f"cube {h}x{w} smaller than one {eff_h}x{eff_w} tile"
        )
    cid = cube_id if cube_id is not None else (cube.provenance or "cube")
    tiles: list[HsCube] = []
    origins: list[TileOrigin] = []
    for r in range(0, h - eff_h + 1, eff_h):
        for c in range(0, w - eff_w + 1, eff_w):
            data = cube.data[:, r : r + eff_h, c : c + eff_w].copy()
            tiles.append(cube.with_data(data, provenance=f"{cid}@({r},{c})"))
            origins.append(TileOrigin(cube_id=cid, row=r, col=c))
    return TileSet(tiles=tiles, source_ids=origins)


def concat_tilesets(tilesets: list[TileSet]) -> TileSet:
    tiles: list[HsCube] = []
    origins: list[TileOrigin] = []
    for ts in tilesets:
        tiles.extend(ts.tiles)
        origins.extend(ts.source_ids)
    return TileSet(tiles=tiles, source_ids=origins)


def outlier_filter(tiles: TileSet, iqr_k: float = 1.5, clip_pct: float = 0.01) -> TileSet:
    """Clip extreme values per tile, then reject whole outlier tiles.

    Stage 1 clips each tile's values to its own [clip_pct, 1-clip_pct]
    percentile range.  Stage 2 computes each clipped tile's median and
    rejects tiles whose median falls outside the interquartile fences
    [Q1 - k*IQR, Q3 + k*IQR] of the tile-median distribution.
    """
    if len(tiles) < 4:
        raise DataError(f"outlier filter needs >= 4 tiles (got {len(tiles)}): quartiles undefined")
    if not (0.0 <= clip_pct < 0.5):
        raise ValueError("clip_pct must lie in [0, 0.5)")

    clipped: list[HsCube] = []
    for tile in tiles.tiles:
        lo, hi = np.percentile(tile.data, [100.0 * clip_pct, 100.0 * (1.0 - clip_pct)])
        clipped.append(tile.with_data(np.clip(tile.data, lo, hi)))

    medians = np.array([float(np.median(t.data)) for t in clipped])
    q1, q3 = np.percentile(medians, [25.0, 75.0])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - iqr_k * iqr, q3 + iqr_k * iqr

    kept: list[HsCube] = []
    origins: list[TileOrigin] = []
    rejected: list[tuple[int, str]] = []
    for i, tile in enumerate(clipped):
        if lo_fence <= medians[i] <= hi_fence:
            kept.append(tile)
            origins.append(tiles.source_ids[i])
        else:
            rejected.append((i, "iqr_outlier"))
    return TileSet(tiles=kept, source_ids=origins, rejected=rejected)


def compute_norm_stats(tiles: TileSet, clip_pct: float = 0.01) -> NormStats:
    """Pooled [clip_pct, 1-clip_pct] percentiles over all training tile values."""
    pooled = np.concatenate([t.data.ravel() for t in tiles.tiles])
    lo, hi = np.percentile(pooled, [100.0 * clip_pct, 100.0 * (1.0 - clip_pct)])
    if not lo < hi:
        raise DegenerateRangeError("training tiles are constant; normalization undefined")
    return NormStats(lo=float(lo), hi=float(hi))


def normalize(tiles: TileSet, stats: NormStats | None = None) -> tuple[TileSet, NormStats]:
    """Map tile values through (x - lo)/(hi - lo), clamped to [0, 1].

    When ``stats`` is absent the tiles must be the training split and the
    range is computed from them.
    """
    if stats is None:
        stats = compute_norm_stats(tiles)
    out = [t.with_data(stats.apply(t.data)) for t in tiles.tiles]
    return TileSet(tiles=out, source_ids=list(tiles.source_ids), rejected=list(tiles.rejected)), stats


def denormalize(tiles: TileSet, stats: NormStats) -> TileSet:
    """Inverse of :func:`normalize` for metric computation in radiance units."""
    out = [t.with_data(stats.invert(t.data)) for t in tiles.tiles]
    return TileSet(tiles=out, source_ids=list(tiles.source_ids), rejected=list(tiles.rejected))


def split(
    tiles: TileSet | int,
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS,
    seed: int = 0,
) -> SplitAssignment:
    """Deterministic tile-level split; remainder tiles go to train.

    Counts are floors of n*fraction; whatever the floors leave over is added
    to the training split so validation/test sizes stay stable.
    """
    n = tiles if isinstance(tiles, int) else len(tiles)
    if n < 3:
        raise DataError(f"need >= 3 tiles to split (got {n})")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions {fractions} do not sum to 1")
    n_train = math.floor(n * fractions[0])
    n_val = math.floor(n * fractions[1])
    n_test = math.floor(n * fractions[2])
    n_train += n - (n_train + n_val + n_test)

    perm = np.random.default_rng(seed).permutation(n)
    train = tuple(sorted(int(i) for i in perm[:n_train]))
    val = tuple(sorted(int(i) for i in perm[n_train : n_train + n_val]))
    test = tuple(sorted(int(i) for i in perm[n_train + n_val :]))
    return SplitAssignment(train=train, val=val, test=test, seed=seed, fractions=fractions)


def _window_starts(length: int, patch: int, stride: int) -> list[int]:
    starts = list(range(0, length - patch + 1, stride))
    if starts[-1] != length - patch:
        starts.append(length - patch)  # trailing window aligned to the far edge
    return starts


def patchify(
    hr_tile: HsCube,
    lr_tile: HsCube,
    hr_size: int = 256,
    lr_size: int = 64,
    lr_stride: int = 32,
    tile_id: str | None = None,
) -> list[PatchPair]:
    """Cut aligned overlapping LR/HR patch pairs from one tile pair.

    Windows slide over the LR grid with ``lr_stride``; the HR window is the
    scale-multiplied counterpart at scale-multiplied offsets.  The patch size
    is clamped to the tile when the tile is narrower than one patch (the
    SWIR case), and the trailing window is aligned to the far edge so every
    pixel is covered.
    """
    if hr_tile.n_channels != lr_tile.n_channels:
        raise ShapeMismatchError("hr and lr tiles have different channel counts")
    if lr_stride < 1:
        raise ValueError("lr_stride must be >= 1")
    _, hr_h, hr_w = hr_tile.shape
    _, lr_h, lr_w = lr_tile.shape
    if hr_size % lr_size != 0:
        raise ValueError(f"hr_size {hr_size} must be a multiple of lr_size {lr_size}")
    s = hr_size // lr_size
    if hr_h != s * lr_h or hr_w != s * lr_w:
        raise ShapeMismatchError(
            f"hr tile {hr_h}x{hr_w} is not {s}x the lr tile {lr_h}x{lr_w}"
        )
    patch_h = min(lr_size, lr_h)
    patch_w = min(lr_size, lr_w)
    tid = tile_id if tile_id is not None else (hr_tile.provenance or "tile")

    pairs: list[PatchPair] = []
    for r in _window_starts(lr_h, patch_h, lr_stride):
        for c in _window_starts(lr_w, patch_w, lr_stride):
            lr = lr_tile.data[:, r : r + patch_h, c : c + patch_w].copy()
            hr = hr_tile.data[
                :, s * r : s * (r + patch_h), s * c : s * (c + patch_w)
            ].copy()
            pairs.append(PatchPair(lr=lr, hr=hr, tile_id=tid, offset=(r, c)))
    return pairs


# ---------------------------------------------------------------------------
# Dataset assembly (manifest-driven)
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"


@dataclass
class BandDataset:
    """Everything the trainer and evaluator need for one band."""

    band: BandInfo
    scale: int
    deg_spec: DegradationSpec
    norm_stats: NormStats
    patches: dict[str, list[PatchPair]]
    tiles: dict[str, list[tuple[HsCube, HsCube]]]  # split -> [(hr, lr), ...]
    manifest: dict


def prepare_dataset(
    cubes: list[HsCube],
    out_dir: str | Path,
    tile_h: int,
    tile_w: int,
    seed: int,
    scale: int = 4,
    deg_spec: DegradationSpec | None = None,
    lr_size: int = 64,
    lr_stride: int = 32,
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS,
    iqr_k: float = 1.5,
    clip_pct: float = 0.01,
) -> dict:
    """Run the full preparation pipeline and write a manifest-driven dataset.

    Splitting happens before normalization so the normalization range is
    computed from the training split only; the split is stored in the
    manifest and never re-derived, keeping the splits non-overlapping across
    every later invocation.
    """
    if not cubes:
        raise DataError("no input cubes")
    band = cubes[0].band
    for cube in cubes[1:]:
        if cube.band != band or cube.n_channels != cubes[0].n_channels:
            raise ShapeMismatchError("all cubes must share band and channel count")
    if deg_spec is None:
        deg_spec = DegradationSpec.for_band(band, scale=scale)
    if deg_spec.scale != scale:
        raise ValueError(f"degradation scale {deg_spec.scale} != requested scale {scale}")

    tilesets = [
        crop_tiles(cube, tile_h, tile_w, scale=scale, cube_id=f"cube{i:03d}")
        for i, cube in enumerate(cubes)
    ]
    tiles = concat_tilesets(tilesets)
    tiles = outlier_filter(tiles, iqr_k=iqr_k, clip_pct=clip_pct)
    assignment = split(tiles, fractions=fractions, seed=seed)

    train_tiles = TileSet(
        tiles=[tiles.tiles[i] for i in assignment.train],
        source_ids=[tiles.source_ids[i] for i in assignment.train],
    )
    stats = compute_norm_stats(train_tiles)
    tiles, _ = normalize(tiles, stats)

    out_dir = Path(out_dir)
    tile_dir = out_dir / "tiles"
    tile_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, tile in enumerate(tiles.tiles):
        hr_path = tile_dir / f"hr_{i:04d}.hsc"
        lr_path = tile_dir / f"lr_{i:04d}.hsc"
        lr_tile = tile.with_data(degrade(tile.data, deg_spec))
        write_cube(tile, hr_path, norm_stats=stats)
        write_cube(lr_tile, lr_path, norm_stats=stats)
        entries.append(
            {
                "index": i,
                "hr": str(hr_path.relative_to(out_dir)),
                "lr": str(lr_path.relative_to(out_dir)),
                "origin": tiles.source_ids[i].to_dict(),
            }
        )

    manifest = {
        "format": "s5dscr-dataset",
        "version": 1,
        "band_id": band.band_id,
        "n_channels": cubes[0].n_channels,
        "scale": scale,
        "seed": seed,
        "degradation": {
            "spectrometer": deg_spec.spectrometer.value,
            "sigma_across": deg_spec.sigma_across,
            "sigma_along": deg_spec.sigma_along,
            "scale": deg_spec.scale,
            "truncation": deg_spec.truncation,
        },
        "norm_stats": stats.to_dict(),
        "patch": {"hr_size": lr_size * scale, "lr_size": lr_size, "lr_stride": lr_stride},
        "tiles": entries,
        "split": assignment.to_dict(),
        "rejected": [[i, reason] for i, reason in tiles.rejected],
    }
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))
    return manifest


def load_dataset(dataset_dir: str | Path) -> BandDataset:
    """Load a prepared dataset directory back into memory, patch pairs included."""
    dataset_dir = Path(dataset_dir)
    manifest_path = dataset_dir / MANIFEST_NAME
    if not manifest_path.exists():
        raise DataError(f"no {MANIFEST_NAME} in {dataset_dir}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != "s5dscr-dataset":
        raise DataError(f"{manifest_path}: not a dataset manifest")

    from .bands import Spectrometer  # local import keeps module top uncluttered

    deg = manifest["degradation"]
    deg_spec = DegradationSpec(
        spectrometer=Spectrometer(deg["spectrometer"]),
        sigma_across=deg["sigma_across"],
        sigma_along=deg["sigma_along"],
        scale=deg["scale"],
        truncation=deg["truncation"],
    )
    stats = NormStats.from_dict(manifest["norm_stats"])
    assignment = SplitAssignment.from_dict(manifest["split"])
    patch_cfg = manifest["patch"]

    split_indices = {"train": assignment.train, "val": assignment.val, "test": assignment.test}
    patches: dict[str, list[PatchPair]] = {}
    tile_pairs: dict[str, list[tuple[HsCube, HsCube]]] = {}
    for name, indices in split_indices.items():
        patches[name] = []
        tile_pairs[name] = []
        for i in indices:
            entry = manifest["tiles"][i]
            hr, _ = read_cube(dataset_dir / entry["hr"])
            lr, _ = read_cube(dataset_dir / entry["lr"])
            tile_pairs[name].append((hr, lr))
            patches[name].extend(
                patchify(
                    hr,
                    lr,
                    hr_size=patch_cfg["hr_size"],
                    lr_size=patch_cfg["lr_size"],
                    lr_stride=patch_cfg["lr_stride"],
                    tile_id=f"tile{i:04d}",
                )
            )
    return BandDataset(
        band=BandInfo.for_band(manifest["band_id"]),
        scale=manifest["scale"],
        deg_spec=deg_spec,
        norm_stats=stats,
        patches=patches,
        tiles=tile_pairs,
        manifest=manifest,
    )
