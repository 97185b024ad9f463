"""Ten bio-optical water-quality indices computed from a reflectance spectrum.

Ratios and normalized differences follow the usual band-math definitions; FAI is
the floating algae index, NIR reflectance minus a red/SWIR linear baseline.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .synth import SWIR_NM, Spectrum, WavelengthGrid

INDEX_NAMES = ("CI", "NDCI", "MCI", "FAI", "PC", "ChlRed", "BG", "GR", "NIR", "NDI")
REQUIRED_NM = (443.0, 555.0, 620.0, 665.0, 680.0, 681.0, 709.0, 753.0, 865.0)
DENOM_TOL = 1e-12


class DegenerateSpectrumError(ValueError):
    def __init__(self, names, rows=None):
        self.indices = tuple(names)
        where = "" if rows is None else f" (rows {list(rows)[:5]})"
        super().__init__(f"zero denominator for index {', '.join(self.indices)}{where}")


@dataclass(frozen=True)
class PhysicsFeatures:
    values: np.ndarray

    def __getitem__(self, name: str) -> float:
        return float(self.values[INDEX_NAMES.index(name)])

    def as_dict(self) -> dict:
        return dict(zip(INDEX_NAMES, self.values.tolist()))


def _bracket(grid_nm: np.ndarray, wavelength: float):
    lo, hi = grid_nm[0], grid_nm[-1]
    if not lo <= wavelength <= hi:
        raise ValueError(f"{wavelength} nm is outside the grid range [{lo}, {hi}]")
    j = int(np.searchsorted(grid_nm, wavelength, side="right")) - 1
    j = min(j, len(grid_nm) - 2)
    t = (wavelength - grid_nm[j]) / (grid_nm[j + 1] - grid_nm[j])
    return j, t


def _bands(spectra: np.ndarray, grid_nm: np.ndarray, wavelength: float) -> np.ndarray:
    j, t = _bracket(grid_nm, wavelength)
    a = spectra[..., j]
    if t == 0.0:
        return a
    # a + t*(b - a) keeps flat spectra exactly flat
    return a + t * (spectra[..., j + 1] - a)


def band_at(spectrum: Spectrum, wavelength_nm: float) -> float:
    """Reflectance at ``wavelength_nm``, linearly interpolated between grid bands."""
    return float(_bands(spectrum.reflectance, spectrum.grid.wavelengths_nm, wavelength_nm))


def index_matrix(spectra, grid: WavelengthGrid, swir_nm: float = SWIR_NM) -> np.ndarray:
    """Indices for a stack of spectra (rows), shape (n, 10) in INDEX_NAMES order."""
    spectra = np.asarray(spectra, dtype=float)
    single = spectra.ndim == 1
    spectra = np.atleast_2d(spectra)
    wl = grid.wavelengths_nm
    if spectra.shape[1] != len(wl):
        raise ValueError("spectra width does not match the grid")
    b = {nm: _bands(spectra, wl, nm) for nm in REQUIRED_NM + (swir_nm,)}
    r443, r555, r620, r665 = b[443.0], b[555.0], b[620.0], b[665.0]
    r680, r681, r709, r753, r865 = b[680.0], b[681.0], b[709.0], b[753.0], b[865.0]
    rswir = b[swir_nm]

    denominators = {
        "NDCI": r709 + r665, "PC": r665, "ChlRed": r665, "BG": r555,
        "GR": r665, "NIR": r665, "NDI": r665 + r620,
    }
    bad = [k for k, v in denominators.items() if np.any(np.abs(v) < DENOM_TOL)]
    if bad:
        rows = np.flatnonzero(np.any([np.abs(denominators[k]) < DENOM_TOL for k in bad], axis=0))
        raise DegenerateSpectrumError(bad, None if single else rows)

    fai_baseline = r665 + (rswir - r665) * (865.0 - 665.0) / (swir_nm - 665.0)
    out = np.column_stack([
        r681 - r665,
        (r709 - r665) / (r709 + r665),
        r709 - (r681 + r753) / 2.0,
        r865 - fai_baseline,
        r620 / r665,
        r680 / r665,
        r443 / r555,
        r555 / r665,
        r865 / r665,
        (r665 - r620) / (r665 + r620),
    ])
    return out[0] if single else out


def compute_indices(spectrum: Spectrum, swir_nm: float = SWIR_NM) -> PhysicsFeatures:
    return PhysicsFeatures(index_matrix(spectrum.reflectance, spectrum.grid, swir_nm))


def write_features_csv(features: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(INDEX_NAMES)
        for row in np.atleast_2d(features):
            w.writerow([repr(float(v)) for v in row])


def read_features_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != INDEX_NAMES:
        raise ValueError("unexpected header")
    return np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, len(INDEX_NAMES))
