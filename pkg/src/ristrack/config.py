"""Physical and protocol configuration for the RIS-aided multi-band simulator.

All lengths are in meters, frequencies in Hz and durations in seconds.
Configs are frozen dataclasses; derived quantities (wavelength, effective
antenna counts, subcarrier frequencies) are properties so that a config
snapshot written to disk is enough to rebuild a dataset.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


def _as_vec3(value, name: str) -> tuple[float, float, float]:
    vec = tuple(float(v) for v in value)
    if len(vec) != 3:
        raise ConfigError(f"{name} must have 3 components, got {len(vec)}")
    return vec  # type: ignore[return-value]


@dataclass(frozen=True)
class Roi:
    """Axis-aligned cuboid region of interest (closed intervals)."""

    x_range: tuple[float, float] = (0.0, 100.0)
    y_range: tuple[float, float] = (-50.0, 50.0)
    z_range: tuple[float, float] = (0.0, 10.0)

    def __post_init__(self):
        for name in ("x_range", "y_range", "z_range"):
            lo, hi = (float(v) for v in getattr(self, name))
            if not (math.isfinite(lo) and math.isfinite(hi)) or hi < lo:
                raise ConfigError(f"ROI {name} must be a nonempty interval, got {(lo, hi)}")
            object.__setattr__(self, name, (lo, hi))

    @property
    def low(self) -> np.ndarray:
        return np.array([self.x_range[0], self.y_range[0], self.z_range[0]])

    @property
    def high(self) -> np.ndarray:
        return np.array([self.x_range[1], self.y_range[1], self.z_range[1]])

    @property
    def center(self) -> np.ndarray:
        return (self.low + self.high) / 2.0

    @property
    def sides(self) -> np.ndarray:
        """Side lengths along x, y, z."""
        return self.high - self.low

    def contains(self, points, atol: float = 1e-9) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return np.all((pts >= self.low - atol) & (pts <= self.high + atol), axis=-1)

    def clip(self, points) -> np.ndarray:
        return np.clip(np.asarray(points, dtype=float), self.low, self.high)


@dataclass(frozen=True)
class BandConfig:
    """One frequency band: its antenna arrays, RIS panel and frame timing."""

    center_freq_hz: float
    bandwidth_hz: float
    n_subcarriers: int
    n_tx: int
    n_rx: int
    rx_center: tuple[float, float, float]
    ris_center: tuple[float, float, float]
    ris_rows: int
    ris_cols: int
    gamma: float = 0.5
    frame_duration_s: float = 0.01
    p_ul: float = 0.1
    tx_offset_z: float = 0.0
    rx_stride: int = 1
    ris_stride: int = 1

    def __post_init__(self):
        object.__setattr__(self, "rx_center", _as_vec3(self.rx_center, "rx_center"))
        object.__setattr__(self, "ris_center", _as_vec3(self.ris_center, "ris_center"))
        if self.center_freq_hz <= 0 or self.bandwidth_hz < 0:
            raise ConfigError("center frequency must be > 0 and bandwidth >= 0")
        if self.bandwidth_hz >= 2 * self.center_freq_hz:
            raise ConfigError("bandwidth must keep every subcarrier frequency positive")
        for name in ("n_subcarriers", "n_tx", "n_rx", "ris_rows", "ris_cols", "rx_stride", "ris_stride"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 <= self.p_ul <= 1.0:
            raise ConfigError(f"p_ul must lie in [0, 1], got {self.p_ul}")
        if self.frame_duration_s <= 0:
            raise ConfigError("frame_duration_s must be > 0")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.center_freq_hz

    @property
    def n_rx_used(self) -> int:
        """Rx antennas kept after 1-of-``rx_stride`` sub-sampling."""
        return -(-self.n_rx // self.rx_stride)

    @property
    def ris_shape(self) -> tuple[int, int]:
        """(rows, cols) of meta-elements kept after 1-of-``ris_stride``^2 sub-sampling."""
        return -(-self.ris_rows // self.ris_stride), -(-self.ris_cols // self.ris_stride)

    @property
    def n_ris(self) -> int:
        """Number of meta-elements covered by the RIS-CSI (M_n)."""
        rows, cols = self.ris_shape
        return rows * cols

    @property
    def n_links(self) -> int:
        """Q_n: number of Tx/Rx antenna pairs in the CSI."""
        return self.n_tx * self.n_rx_used

    @property
    def subcarrier_freqs(self) -> np.ndarray:
        if self.n_subcarriers == 1:
            return np.array([self.center_freq_hz])
        half = self.bandwidth_hz / 2.0
        return np.linspace(self.center_freq_hz - half, self.center_freq_hz + half, self.n_subcarriers)

    def n_frames(self, period_s: float) -> int:
        """F_n = T_TP / T_n, rounded to the nearest integer."""
        n = int(round(period_s / self.frame_duration_s))
        if n < 1 or abs(n * self.frame_duration_s - period_s) > 1e-9 * max(1.0, period_s):
            raise ConfigError(
                f"tracking period {period_s} s is not a whole number of {self.frame_duration_s} s frames")
        return n


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to simulate one deployment environment (domain)."""

    name: str
    bands: tuple[BandConfig, ...]
    roi: Roi = field(default_factory=Roi)
    period_s: float = 0.5
    speed_range: tuple[float, float] = (0.0, 10.0)
    n_reflectors_dt: int = 3
    n_reflectors_ris: int = 3
    var_reflect_dt: float = 0.1
    var_reflect_ris: float = 0.1
    snr_anchor_db: float = 10.0
    snr_mode: str = "same_noise"
    snr_anchor_band: int = 1
    noise_offset_db: float = 0.0
    tx_scale: float = 1.0
    chaotic_tracks: bool = False
    train_fraction: float = 0.9
    applied_deltas: tuple[str, ...] = ()

    def __post_init__(self):
        bands = tuple(self.bands)
        if not bands:
            raise ConfigError("a scenario needs at least one band")
        object.__setattr__(self, "bands", bands)
        lo, hi = (float(v) for v in self.speed_range)
        if lo < 0 or hi < lo:
            raise ConfigError(f"speed_range must satisfy 0 <= lo <= hi, got {(lo, hi)}")
        object.__setattr__(self, "speed_range", (lo, hi))
        object.__setattr__(self, "applied_deltas", tuple(self.applied_deltas))
        if self.period_s <= 0:
            raise ConfigError("period_s must be > 0")
        if self.n_reflectors_dt < 0 or self.n_reflectors_ris < 0:
            raise ConfigError("reflector counts must be >= 0")
        if self.var_reflect_dt < 0 or self.var_reflect_ris < 0:
            raise ConfigError("reflection variances must be >= 0")
        if self.snr_mode not in ("same_noise", "same_snr"):
            raise ConfigError(f"snr_mode must be 'same_noise' or 'same_snr', got {self.snr_mode!r}")
        if not 0 <= self.snr_anchor_band < len(bands):
            raise ConfigError("snr_anchor_band out of range")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigError("train_fraction must lie in (0, 1]")
        for band in bands:
            band.n_frames(self.period_s)

    @property
    def n_bands(self) -> int:
        return len(self.bands)

    def frames_per_band(self) -> tuple[int, ...]:
        return tuple(b.n_frames(self.period_s) for b in self.bands)

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def replace_band(self, index: int, **changes) -> "ScenarioConfig":
        bands = list(self.bands)
        bands[index] = dataclasses.replace(bands[index], **changes)
        return dataclasses.replace(self, bands=tuple(bands))

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        return _to_jsonable(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ScenarioConfig":
        data = dict(data)
        _reject_unknown(data, cls, "scenario")
        if "bands" not in data or "name" not in data:
            raise ConfigError("scenario requires 'name' and 'bands'")
        bands = []
        for i, bd in enumerate(data.pop("bands")):
            if not isinstance(bd, dict):
                raise ConfigError(f"bands[{i}] must be an object")
            _reject_unknown(bd, BandConfig, f"bands[{i}]")
            try:
                bands.append(BandConfig(**bd))
            except TypeError as exc:
                raise ConfigError(f"bands[{i}]: {exc}") from None
        roi = data.pop("roi", None)
        if roi is not None:
            _reject_unknown(roi, Roi, "roi")
            data["roi"] = Roi(**{k: tuple(v) for k, v in roi.items()})
        for key in ("speed_range", "applied_deltas"):
            if key in data:
                data[key] = tuple(data[key])
        try:
            return cls(bands=tuple(bands), **data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ScenarioConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid scenario JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("scenario JSON must be an object")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _reject_unknown(data: dict, cls, where: str) -> None:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
