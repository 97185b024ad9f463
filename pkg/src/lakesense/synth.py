"""Synthetic lake scenes: a log-Gaussian concentration field over stations and
per-station reflectance spectra from a saturating bio-optical forward model.

    rho(lambda) = rho_water(lambda) + u * delta(lambda) + noise,   u = c / (c + c_half)
"""
from __future__ import annotations

import csv
import functools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial.distance import pdist, squareform
from scipy.stats import qmc

SWIR_NM = 1240.0

# control wavelength -> (clear-water reflectance, full-bloom increment)
CONTROL_TABLE = {
    443.0: (0.020, -0.010),
    555.0: (0.015, +0.004),
    620.0: (0.008, -0.004),
    665.0: (0.006, -0.004),
    680.0: (0.0058, +0.001),
    681.0: (0.0058, +0.004),
    709.0: (0.004, +0.010),
    753.0: (0.002, +0.002),
    865.0: (0.001, +0.006),
    SWIR_NM: (0.0005, 0.0),
}
CONTROL_NM = np.array(sorted(CONTROL_TABLE))
CLEAR_WATER = np.array([CONTROL_TABLE[w][0] for w in CONTROL_NM])
BLOOM_DELTA = np.array([CONTROL_TABLE[w][1] for w in CONTROL_NM])

C_HALF = 1.0
BLOOM_THRESHOLD = 1.5
FIELD_SCALE = 0.5
FIELD_LOG_SD = 1.0
COV_JITTER = 1e-10

# hand-placed 8-station layout in the unit square (a fixed stand-in for a real monitoring network)
WESTERN_BASIN_8 = np.array([
    [0.10, 0.80], [0.22, 0.55], [0.35, 0.90], [0.48, 0.62],
    [0.60, 0.30], [0.72, 0.75], [0.85, 0.45], [0.92, 0.12],
])
PRESETS = {"western_basin_8": WESTERN_BASIN_8}


@dataclass(frozen=True)
class WavelengthGrid:
    wavelengths_nm: np.ndarray
    vnir_max_nm: float = 900.0

    def __post_init__(self):
        wl = np.asarray(self.wavelengths_nm, dtype=float)
        if wl.ndim != 1 or len(wl) < 2 or np.any(np.diff(wl) <= 0):
            raise ValueError("wavelengths must be a strictly increasing list")
        object.__setattr__(self, "wavelengths_nm", wl)

    def __len__(self):
        return len(self.wavelengths_nm)

    @property
    def vnir_mask(self) -> np.ndarray:
        return self.wavelengths_nm <= self.vnir_max_nm

    def covers(self, wavelengths) -> bool:
        wl = np.asarray(wavelengths, dtype=float)
        return bool(np.all((wl >= self.wavelengths_nm[0]) & (wl <= self.wavelengths_nm[-1])))

    def __eq__(self, other):
        return isinstance(other, WavelengthGrid) and np.array_equal(self.wavelengths_nm, other.wavelengths_nm)

    def __hash__(self):
        return hash(self.wavelengths_nm.tobytes())


def default_grid(n_bands: int = 117, swir_nm: float = SWIR_NM) -> WavelengthGrid:
    """``n_bands`` evenly spaced bands over 400-900 nm plus one SWIR anchor band."""
    return WavelengthGrid(np.append(np.linspace(400.0, 900.0, n_bands), swir_nm))


def control_grid() -> WavelengthGrid:
    """Grid holding exactly the control wavelengths; forward-model values are exact there."""
    return WavelengthGrid(CONTROL_NM.copy())


@dataclass
class Spectrum:
    grid: WavelengthGrid
    reflectance: np.ndarray

    def __post_init__(self):
        self.reflectance = np.asarray(self.reflectance, dtype=float)
        if self.reflectance.shape != (len(self.grid),):
            raise ValueError("reflectance length must match the grid")


@functools.lru_cache(maxsize=16)
def _tables_on(grid: WavelengthGrid):
    wl = grid.wavelengths_nm
    return np.interp(wl, CONTROL_NM, CLEAR_WATER), np.interp(wl, CONTROL_NM, BLOOM_DELTA)


def saturation(c, c_half: float = C_HALF):
    c = np.asarray(c, dtype=float)
    return c / (c + c_half)


def reflectance_matrix(concentrations, noise_sd: float, rng, grid: Optional[WavelengthGrid] = None,
                       c_half: float = C_HALF, delta_scale: float = 1.0) -> np.ndarray:
    """Forward model for many concentrations at once; rows are spectra."""
    grid = grid or default_grid()
    c = np.atleast_1d(np.asarray(concentrations, dtype=float))
    if np.any(c < 0):
        raise ValueError("concentration must be >= 0")
    if noise_sd < 0:
        raise ValueError("noise_sd must be >= 0")
    rho_w, delta = _tables_on(grid)
    rho = rho_w[None, :] + saturation(c, c_half)[:, None] * (delta_scale * delta)[None, :]
    if noise_sd > 0:
        rho = rho + rng.normal(0.0, noise_sd, size=rho.shape)
    return np.clip(rho, 0.0, None)


def reflectance_of(concentration: float, noise_sd: float = 0.0, seed: int = 0,
                   grid: Optional[WavelengthGrid] = None, c_half: float = C_HALF,
                   delta_scale: float = 1.0) -> Spectrum:
    grid = grid or default_grid()
    rng = np.random.default_rng(seed)
    rho = reflectance_matrix([concentration], noise_sd, rng, grid, c_half, delta_scale)[0]
    return Spectrum(grid, rho)


@dataclass
class ConcentrationField:
    station_coords: np.ndarray
    truth: np.ndarray
    bloom_threshold: float = BLOOM_THRESHOLD
    scale: float = FIELD_SCALE
    log_sd: float = FIELD_LOG_SD
    correlation_length: float = 0.3
    seed: int = 0

    @property
    def n_stations(self) -> int:
        return len(self.truth)

    @property
    def distances(self) -> np.ndarray:
        return squareform(pdist(self.station_coords))

    @property
    def diameter(self) -> float:
        return float(pdist(self.station_coords).max())


def station_layout(n_stations: int, preset: Optional[str] = None) -> np.ndarray:
    if preset is not None:
        coords = PRESETS[preset]
        if len(coords) != n_stations:
            raise ValueError(f"preset {preset!r} has {len(coords)} stations, not {n_stations}")
        return coords.copy()
    # unscrambled Halton: the layout depends only on n, so it is shared across seeds
    return qmc.Halton(d=2, scramble=False).random(n_stations + 1)[1:]


@functools.lru_cache(maxsize=32)
def _field_factor(coords_bytes: bytes, n: int, correlation_length: float, log_sd: float):
    coords = np.frombuffer(coords_bytes).reshape(n, 2)
    cov = log_sd ** 2 * np.exp(-squareform(pdist(coords)) / correlation_length)
    cov[np.diag_indices(n)] += COV_JITTER
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("field covariance is not positive definite after jitter") from exc


def generate_field(n_stations: int, correlation_length: float = 0.3, seed: int = 0, *,
                   scale: float = FIELD_SCALE, log_sd: float = FIELD_LOG_SD,
                   bloom_threshold: float = BLOOM_THRESHOLD,
                   preset: Optional[str] = None) -> ConcentrationField:
    """Log-Gaussian field, exponential covariance, sampled by Cholesky factorization."""
    if n_stations < 2:
        raise ValueError("need at least two stations")
    if correlation_length <= 0:
        raise ValueError("correlation_length must be positive")
    coords = np.ascontiguousarray(station_layout(n_stations, preset), dtype=float)
    L = _field_factor(coords.tobytes(), n_stations, float(correlation_length), float(log_sd))
    g = L @ np.random.default_rng(seed).standard_normal(n_stations)
    return ConcentrationField(
        station_coords=coords, truth=scale * np.exp(g), bloom_threshold=bloom_threshold,
        scale=scale, log_sd=log_sd, correlation_length=correlation_length, seed=seed,
    )


@dataclass
class Scene:
    field: ConcentrationField
    grid: WavelengthGrid
    spectra: np.ndarray           # (n_stations, n_bands)
    unlabeled_pool: np.ndarray    # (pool_size, n_bands)
    seed: int = 0
    noise_sd: float = 0.0
    delta_scale: float = 1.0

    def __post_init__(self):
        if len(self.spectra) != self.field.n_stations:
            raise ValueError("need one spectrum per station")

    @property
    def n_stations(self) -> int:
        return self.field.n_stations

    @property
    def truth(self) -> np.ndarray:
        return self.field.truth

    @property
    def coords(self) -> np.ndarray:
        return self.field.station_coords

    def spectrum(self, i: int) -> Spectrum:
        return Spectrum(self.grid, self.spectra[i])


def render_scene(field: ConcentrationField, unlabeled_count: int = 0, noise_sd: float = 2e-4,
                 seed: int = 0, grid: Optional[WavelengthGrid] = None,
                 delta_scale: float = 1.0) -> Scene:
    """Noisy station spectra plus an unlabeled pool drawn from the field's marginal."""
    if unlabeled_count < 0:
        raise ValueError("unlabeled_count must be >= 0")
    grid = grid or default_grid()
    station_ss, pool_ss = np.random.SeedSequence(seed).spawn(2)
    spectra = reflectance_matrix(field.truth, noise_sd, np.random.default_rng(station_ss),
                                 grid, delta_scale=delta_scale)
    rng = np.random.default_rng(pool_ss)
    pool_c = field.scale * np.exp(field.log_sd * rng.standard_normal(unlabeled_count))
    pool = reflectance_matrix(pool_c, noise_sd, rng, grid, delta_scale=delta_scale)
    return Scene(field=field, grid=grid, spectra=spectra, unlabeled_pool=pool, seed=seed,
                 noise_sd=noise_sd, delta_scale=delta_scale)


def make_scene(n_stations: int, seed: int, *, correlation_length: float = 0.3,
               noise_sd: float = 2e-4, unlabeled_count: int = 0,
               grid: Optional[WavelengthGrid] = None, preset: Optional[str] = None,
               scale: float = FIELD_SCALE, log_sd: float = FIELD_LOG_SD,
               bloom_threshold: float = BLOOM_THRESHOLD, delta_scale: float = 1.0) -> Scene:
    """Field plus rendering from one seed (field and noise use separate streams)."""
    field_seed, noise_seed = np.random.SeedSequence(seed).generate_state(2)
    field = generate_field(n_stations, correlation_length, int(field_seed), scale=scale,
                           log_sd=log_sd, bloom_threshold=bloom_threshold, preset=preset)
    return render_scene(field, unlabeled_count, noise_sd, int(noise_seed), grid, delta_scale)


def scene_to_dict(scene: Scene) -> dict:
    f = scene.field
    return {
        "format": "lakesense-scene",
        "version": 1,
        "seed": scene.seed,
        "noise_sd": scene.noise_sd,
        "delta_scale": scene.delta_scale,
        "field": {
            "station_coords": f.station_coords.tolist(),
            "truth": f.truth.tolist(),
            "bloom_threshold": f.bloom_threshold,
            "scale": f.scale,
            "log_sd": f.log_sd,
            "correlation_length": f.correlation_length,
            "seed": f.seed,
        },
        "wavelengths_nm": scene.grid.wavelengths_nm.tolist(),
        "spectra": scene.spectra.tolist(),
        "unlabeled_pool": scene.unlabeled_pool.tolist(),
    }


def scene_from_dict(d: dict) -> Scene:
    if d.get("format") != "lakesense-scene":
        raise ValueError("not a scene file")
    fd = d["field"]
    field = ConcentrationField(
        station_coords=np.asarray(fd["station_coords"], dtype=float),
        truth=np.asarray(fd["truth"], dtype=float),
        bloom_threshold=fd["bloom_threshold"], scale=fd["scale"], log_sd=fd["log_sd"],
        correlation_length=fd["correlation_length"], seed=fd["seed"],
    )
    grid = WavelengthGrid(np.asarray(d["wavelengths_nm"], dtype=float))
    pool = np.asarray(d["unlabeled_pool"], dtype=float).reshape(-1, len(grid))
    return Scene(field=field, grid=grid, spectra=np.asarray(d["spectra"], dtype=float),
                 unlabeled_pool=pool, seed=d["seed"], noise_sd=d["noise_sd"],
                 delta_scale=d["delta_scale"])


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene)))


def load_scene(path) -> Scene:
    return scene_from_dict(json.loads(Path(path).read_text()))


def write_truth_csv(scene: Scene, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["station", "x", "y", "truth"])
        for i, ((x, y), t) in enumerate(zip(scene.coords, scene.truth)):
            w.writerow([i, repr(float(x)), repr(float(y)), repr(float(t))])
