"""Spectrometer band metadata for the Sentinel-5P instrument.

Band 1 is excluded throughout: its signal-to-noise ratio is too low to be a
useful super-resolution target, so constructors reject it outright.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum


class Spectrometer(Enum):
    UV = "UV"
    UVIS = "UVIS"
    NIR = "NIR"
    SWIR = "SWIR"


# band_id -> (spectrometer, n_channels, (wavelength_lo_nm, wavelength_hi_nm))
_BAND_TABLE: dict[int, tuple[Spectrometer, int, tuple[float, float]]] = {
    2: (Spectrometer.UV, 497, (300.0, 320.0)),
    3: (Spectrometer.UVIS, 497, (320.0, 405.0)),
    4: (Spectrometer.UVIS, 497, (405.0, 500.0)),
    5: (Spectrometer.NIR, 497, (675.0, 725.0)),
    6: (Spectrometer.NIR, 497, (725.0, 775.0)),
    7: (Spectrometer.SWIR, 480, (2305.0, 2345.0)),
    8: (Spectrometer.SWIR, 480, (2345.0, 2385.0)),
}

VALID_BAND_IDS = tuple(sorted(_BAND_TABLE))


@dataclass(frozen=True)
class BandInfo:
    """Static characteristics of one spectrometer band.

    ``n_channels`` is always the canonical channel count of the physical
    detector (497 for bands 2-6, 480 for bands 7-8); desk-scale cubes with
    fewer channels declare that on the cube, not here.
    """

    band_id: int
    spectrometer: Spectrometer
    n_channels: int
    wavelength_range_nm: tuple[float, float]

    def __post_init__(self) -> None:
        if self.band_id == 1:
            raise ValueError("band 1 is excluded (low signal-to-noise ratio)")
        if self.band_id not in _BAND_TABLE:
            raise ValueError(f"unknown band id {self.band_id}; valid: {VALID_BAND_IDS}")
        spec, n_ch, wl = _BAND_TABLE[self.band_id]
        if self.spectrometer is not spec:
            raise ValueError(
                f"band {self.band_id} belongs to {spec.value}, not {self.spectrometer.value}"
            )
        if self.n_channels != n_ch:
            raise ValueError(f"band {self.band_id} has {n_ch} channels, not {self.n_channels}")
        if tuple(self.wavelength_range_nm) != wl:
            raise ValueError(f"band {self.band_id} covers {wl} nm, not {self.wavelength_range_nm}")

    @classmethod
    def for_band(cls, band_id: int) -> BandInfo:
        """Look up the canonical metadata for ``band_id`` (2..8)."""
        if band_id == 1:
            raise ValueError("band 1 is excluded (low signal-to-noise ratio)")
        if band_id not in _BAND_TABLE:
            raise ValueError(f"unknown band id {band_id}; valid: {VALID_BAND_IDS}")
        spec, n_ch, wl = _BAND_TABLE[band_id]
        return cls(band_id=band_id, spectrometer=spec, n_channels=n_ch, wavelength_range_nm=wl)
