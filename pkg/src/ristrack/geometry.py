"""ROI geometry, array placement, UE motion and per-period environment draws."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import BandConfig, ConfigError, Roi, ScenarioConfig

# substream tags for rng_for(); keep stable, they define the datasets
STREAM_TRACK = 0
STREAM_ENV = 1
STREAM_SCHEDULE = 2
STREAM_CHANNEL = 3
STREAM_NOISE = 4


def rng_for(seed: int, period: int, stream: int) -> np.random.Generator:
    """Independent generator for one (seed, period, stream) triple."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(period), int(stream)]))


def complex_normal(rng: np.random.Generator, variance, size=None) -> np.ndarray:
    """Draws from CN(0, variance)."""
    scale = np.sqrt(np.asarray(variance, dtype=float) / 2.0)
    return scale * (rng.standard_normal(size) + 1j * rng.standard_normal(size))


@dataclass(frozen=True, eq=False)
class UeTrack:
    """Ground-truth UE motion over one tracking period.

    Constant-velocity tracks use ``start + t * velocity``.  Chaotic tracks are
    piecewise linear through ``knot_positions`` at ``knot_times``.
    """

    start: np.ndarray
    velocity: np.ndarray
    duration: float
    knot_times: np.ndarray | None = None
    knot_positions: np.ndarray | None = None
    clipped: bool = False

    def position(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.knot_times is None:
            return self.start + t[..., None] * self.velocity
        return np.stack([np.interp(t, self.knot_times, self.knot_positions[:, a]) for a in range(3)], axis=-1)

    @property
    def speed(self) -> float:
        return float(np.linalg.norm(self.velocity))


def _random_direction(rng: np.random.Generator, size=None) -> np.ndarray:
    shape = (3,) if size is None else (size, 3)
    v = rng.standard_normal(shape)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    while np.any(norm == 0):  # measure-zero, but never divide by zero
        v = rng.standard_normal(shape)
        norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / norm


def sample_track(rng: np.random.Generator, roi: Roi, speed_range, duration: float,
                 chaotic_step: float | None = None) -> UeTrack:
    """Random start in the ROI, uniform speed, uniform direction on the sphere.

    With ``chaotic_step`` the direction is redrawn every ``chaotic_step``
    seconds (speed kept) and the knots are clipped to the ROI; ``clipped``
    records whether clipping changed any knot.
    """
    lo, hi = (float(v) for v in speed_range)
    if lo < 0 or hi < lo:
        raise ConfigError(f"invalid speed range {speed_range}")
    if duration <= 0:
        raise ConfigError("track duration must be > 0")
    start = rng.uniform(roi.low, roi.high)
    speed = rng.uniform(lo, hi) if hi > lo else lo
    velocity = speed * _random_direction(rng)
    if chaotic_step is None:
        return UeTrack(start=start, velocity=velocity, duration=float(duration))

    n_seg = max(1, int(np.ceil(duration / chaotic_step - 1e-9)))
    times = np.minimum(np.arange(n_seg + 1) * chaotic_step, duration)
    dirs = _random_direction(rng, n_seg)
    dirs[0] = velocity / speed if speed > 0 else dirs[0]
    knots = np.empty((n_seg + 1, 3))
    knots[0] = start
    clipped = False
    for s in range(n_seg):
        nxt = knots[s] + (times[s + 1] - times[s]) * speed * dirs[s]
        inside = roi.clip(nxt)
        clipped |= bool(np.any(inside != nxt))
        knots[s + 1] = inside
    return UeTrack(start=start, velocity=velocity, duration=float(duration),
                   knot_times=times, knot_positions=knots, clipped=clipped)


def tx_positions(track: UeTrack, t: float, band: BandConfig, scale: float = 1.0) -> np.ndarray:
    """UE Tx antennas at time ``t``: offset vertically from the UE centre,
    spaced half a wavelength along y.  ``scale`` stretches every offset."""
    centre = track.position(t) + np.array([0.0, 0.0, band.tx_offset_z * scale])
    offs = (np.arange(band.n_tx) - (band.n_tx - 1) / 2.0) * band.wavelength / 2.0 * scale
    pos = np.repeat(centre[None, :], band.n_tx, axis=0)
    pos[:, 1] += offs
    return pos


def rx_positions(band: BandConfig, sampled: bool = True) -> np.ndarray:
    """Rx antennas: half-wavelength uniform linear array along y.

    With ``sampled`` only every ``rx_stride``-th antenna is returned.
    """
    offs = (np.arange(band.n_rx) - (band.n_rx - 1) / 2.0) * band.wavelength / 2.0
    pos = np.repeat(np.asarray(band.rx_center, dtype=float)[None, :], band.n_rx, axis=0)
    pos[:, 1] += offs
    return pos[::band.rx_stride] if sampled else pos


def ris_element_positions(band: BandConfig, sampled: bool = True) -> np.ndarray:
    """Meta-element centres, row-major over (z-row, x-col).

    The panel lies in the x-z plane through ``ris_center`` (normal -y) with
    pitch ``gamma * wavelength``.  With ``sampled`` only one element out of
    every ``ris_stride`` x ``ris_stride`` block is returned.
    """
    pitch = band.gamma * band.wavelength
    step = band.ris_stride if sampled else 1
    dz = ((np.arange(band.ris_rows) - (band.ris_rows - 1) / 2.0) * pitch)[::step]
    dx = ((np.arange(band.ris_cols) - (band.ris_cols - 1) / 2.0) * pitch)[::step]
    zz, xx = np.meshgrid(dz, dx, indexing="ij")
    cx, cy, cz = band.ris_center
    return np.stack([cx + xx.ravel(), np.full(xx.size, cy), cz + zz.ravel()], axis=-1)


def grid_shape(m: int) -> tuple[int, int]:
    """rows x cols closest to square with rows * cols == m."""
    rows = int(np.floor(np.sqrt(m)))
    while m % rows:
        rows -= 1
    return rows, m // rows


def los_probability(d_2d) -> np.ndarray | float:
    """Urban-macro LoS probability for horizontal distance ``d_2d`` (m)."""
    d = np.asarray(d_2d, dtype=float)
    if np.any(d < 0):
        raise ValueError("d_2d must be >= 0")
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        p = 18.0 / d + np.exp(-d / 63.0) * (1.0 - 18.0 / d)
    p = np.where(d <= 18.0, 1.0, np.minimum(p, 1.0))
    return float(p) if p.ndim == 0 else p


@dataclass(frozen=True, eq=False)
class BandEnvironment:
    """Reflectors seen by one band: points in the ROI and CN(0, V) coefficients."""

    dt_points: np.ndarray
    dt_coeffs: np.ndarray
    ris_points: np.ndarray
    ris_coeffs: np.ndarray


@dataclass(frozen=True, eq=False)
class EnvironmentRealization:
    bands: tuple[BandEnvironment, ...]
    var_dt: float
    var_ris: float
    stream: tuple[int, int] = (0, 0)


def sample_environment(rng: np.random.Generator, scenario: ScenarioConfig,
                       stream: tuple[int, int] = (0, 0)) -> EnvironmentRealization:
    """One stochastic environment for a tracking period (all bands)."""
    roi = scenario.roi
    bands = []
    for _ in scenario.bands:
        r, r2 = scenario.n_reflectors_dt, scenario.n_reflectors_ris
        bands.append(BandEnvironment(
            dt_points=rng.uniform(roi.low, roi.high, size=(r, 3)),
            dt_coeffs=complex_normal(rng, scenario.var_reflect_dt, r),
            ris_points=rng.uniform(roi.low, roi.high, size=(r2, 3)),
            ris_coeffs=complex_normal(rng, scenario.var_reflect_ris, r2),
        ))
    return EnvironmentRealization(bands=tuple(bands), var_dt=scenario.var_reflect_dt,
                                  var_ris=scenario.var_reflect_ris, stream=tuple(stream))


def empty_environment(n_bands: int) -> EnvironmentRealization:
    """Reflection-free environment (used for noise calibration)."""
    z3, z = np.zeros((0, 3)), np.zeros(0, dtype=complex)
    band = BandEnvironment(z3, z, z3, z)
    return EnvironmentRealization(bands=(band,) * n_bands, var_dt=0.0, var_ris=0.0)
