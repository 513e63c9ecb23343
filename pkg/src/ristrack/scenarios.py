"""Named source/target environment presets.

``default_source()`` is the default experimental environment; every other
preset is a single delta applied on top of it.  The deltas only touch
configuration fields, no preset needs its own simulation code path.
"""

from __future__ import annotations

from typing import Callable

from .config import BandConfig, ConfigError, Roi, ScenarioConfig

SOURCE = "SRC"


def default_source() -> ScenarioConfig:
    """Default source environment with the two-band (5.9 / 28 GHz) layout.

    Array sizes and frame durations are repository defaults (12x12 RIS
    panels sounded on one element of every 3x3 block, 4 Rx antennas of
    which every second one is used, one Tx antenna, 40 + 60 frames per
    0.5 s tracking period).
    """
    band1 = BandConfig(
        center_freq_hz=5.9e9, bandwidth_hz=20e6, n_subcarriers=24,
        n_tx=1, n_rx=4, rx_center=(0.0, 0.0, 22.0), ris_center=(50.0, 50.0, 22.0),
        ris_rows=12, ris_cols=12, gamma=0.5, frame_duration_s=0.5 / 40, p_ul=0.1,
        tx_offset_z=-0.07, rx_stride=2, ris_stride=3,
    )
    band2 = BandConfig(
        center_freq_hz=28.0e9, bandwidth_hz=120e6, n_subcarriers=66,
        n_tx=1, n_rx=4, rx_center=(0.0, 0.0, 20.0), ris_center=(50.0, 50.0, 20.0),
        ris_rows=12, ris_cols=12, gamma=0.5, frame_duration_s=0.5 / 60, p_ul=0.1,
        tx_offset_z=0.07, rx_stride=2, ris_stride=3,
    )
    return ScenarioConfig(
        name=SOURCE, bands=(band1, band2), roi=Roi(), period_s=0.5,
        speed_range=(0.0, 10.0), n_reflectors_dt=3, n_reflectors_ris=3,
        var_reflect_dt=0.1, var_reflect_ris=0.1, snr_anchor_db=10.0,
        snr_mode="same_noise", snr_anchor_band=1, train_fraction=0.9,
    )


def desk_scale(cfg: ScenarioConfig, n_subcarriers=(8, 12), n_frames=(24, 36), ris_side=4,
               n_rx=2) -> ScenarioConfig:
    """Smaller system for CPU-sized experiments.

    Keeps a centred window of each band's subcarrier grid (same spacing,
    narrower bandwidth), a ``ris_side`` x ``ris_side`` panel with the same
    element pitch and ``n_rx`` receive antennas, all sounded without
    sub-sampling, and shortens the frame count per period.  Positions and
    propagation are unchanged.
    """
    if len(n_subcarriers) != cfg.n_bands or len(n_frames) != cfg.n_bands:
        raise ConfigError("desk_scale needs one entry per band")
    out = cfg
    for i, (k, f) in enumerate(zip(n_subcarriers, n_frames)):
        b = cfg.bands[i]
        k = int(k)
        if k > b.n_subcarriers:
            raise ConfigError(f"band {i + 1}: cannot keep {k} of {b.n_subcarriers} subcarriers")
        spacing = b.bandwidth_hz / (b.n_subcarriers - 1) if b.n_subcarriers > 1 else 0.0
        out = out.replace_band(i, n_subcarriers=k, bandwidth_hz=spacing * (k - 1),
                               frame_duration_s=cfg.period_s / int(f),
                               ris_rows=int(ris_side), ris_cols=int(ris_side), n_rx=int(n_rx),
                               rx_stride=1, ris_stride=1)
    return out


def _scale_variances(cfg):
    return cfg.replace(var_reflect_dt=cfg.var_reflect_dt * 5, var_reflect_ris=cfg.var_reflect_ris * 5)


def _shift_ris(dx=0.0, dy=0.0, dz=0.0, absolute_y=None):
    def apply(cfg):
        out = cfg
        for i, b in enumerate(cfg.bands):
            x, y, z = b.ris_center
            y = absolute_y if absolute_y is not None else y + dy
            out = out.replace_band(i, ris_center=(x + dx, y, z + dz))
        return out
    return apply


def _raise_rx(cfg):
    out = cfg
    for i, b in enumerate(cfg.bands):
        x, y, z = b.rx_center
        out = out.replace_band(i, rx_center=(x, y, z + 10.0))
    return out


DELTAS: dict[str, tuple[str, Callable[[ScenarioConfig], ScenarioConfig]]] = {
    "SRP": ("stronger reflection paths: reflection variances x5", _scale_variances),
    "NRL": ("nearer RIS locations: RIS x-coordinates -15 m", _shift_ris(dx=-15.0)),
    "HBS": ("higher base station: Rx z-coordinates +10 m", _raise_rx),
    "BUE": ("bigger UEs: Tx offsets from the UE centre doubled",
            lambda c: c.replace(tx_scale=c.tx_scale * 2.0)),
    "FUE": ("faster UEs: speed range doubled",
            lambda c: c.replace(speed_range=(c.speed_range[0] * 2.0, c.speed_range[1] * 2.0))),
    "MRP": ("more reflection paths: R and R' doubled",
            lambda c: c.replace(n_reflectors_dt=c.n_reflectors_dt * 2, n_reflectors_ris=c.n_reflectors_ris * 2)),
    "HMN": ("higher measurement noise: noise power +5 dB",
            lambda c: c.replace(noise_offset_db=c.noise_offset_db + 5.0)),
    "CUT": ("chaotic UE tracks: direction resampled every frame",
            lambda c: c.replace(chaotic_tracks=True)),
    "RMV": ("RISs moved to y = -50 m (cross-domain benchmark target)", _shift_ris(absolute_y=-50.0)),
}

TABLE_DELTAS = ("SRP", "NRL", "HBS", "BUE", "FUE", "MRP", "HMN", "CUT")


def preset_names() -> list[str]:
    return [SOURCE, *DELTAS]


def apply_delta(source: ScenarioConfig, name: str, allow_repeat: bool = False) -> ScenarioConfig:
    """Apply the named environment delta to ``source``.

    A delta already recorded in ``source.applied_deltas`` is refused unless
    ``allow_repeat`` is set, so "doubled" never silently becomes "quadrupled".
    """
    key = name.upper()
    if key not in DELTAS:
        raise ConfigError(f"unknown scenario delta {name!r}; valid: {', '.join(DELTAS)}")
    if key in source.applied_deltas and not allow_repeat:
        raise ConfigError(f"delta {key} already applied to scenario {source.name!r}")
    out = DELTAS[key][1](source)
    label = key if source.name == SOURCE else f"{source.name}+{key}"
    return out.replace(name=label, applied_deltas=source.applied_deltas + (key,))


def get_scenario(name: str) -> ScenarioConfig:
    """Look up a preset by name (``SRC`` or any delta name)."""
    if name.upper() == SOURCE:
        return default_source()
    return apply_delta(default_source(), name)


def describe() -> list[tuple[str, str]]:
    rows = [(SOURCE, "default source environment")]
    rows += [(k, v[0]) for k, v in DELTAS.items()]
    return rows
