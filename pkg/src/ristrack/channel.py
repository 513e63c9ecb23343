"""Hybrid deterministic/stochastic complex channel gains.

Every function broadcasts over leading position axes.  Frequencies get their
own trailing axes: a gain evaluated for positions of shape ``S`` and
frequencies of shape ``F`` has shape ``S + F``.
"""

from __future__ import annotations

import numpy as np

from .config import SPEED_OF_LIGHT
from .geometry import BandEnvironment


class ChannelDomainError(ValueError):
    """Singular geometry (zero path length) or invalid physical input."""


def free_space_gain(d, f) -> np.ndarray:
    """Friis amplitude ``c / (4 pi f d)`` with propagation phase ``-2 pi f d / c``."""
    d = np.asarray(d, dtype=float)
    f = np.asarray(f, dtype=float)
    if np.any(d <= 0):
        raise ChannelDomainError("free-space gain needs a path length > 0")
    if np.any(f <= 0):
        raise ChannelDomainError("free-space gain needs a frequency > 0")
    # real-valued phase: a complex division by c would round the ~1e4 rad argument differently
    phase = -2.0 * np.pi * f * d / SPEED_OF_LIGHT
    return SPEED_OF_LIGHT / (4.0 * np.pi * f * d) * np.exp(1j * phase)


def scattering_variance(f, d) -> np.ndarray:
    """Variance of the aggregate scattering gain: 10^-3.24 (f/1GHz)^-2 d^-3."""
    f = np.asarray(f, dtype=float)
    d = np.asarray(d, dtype=float)
    if np.any(f <= 0) or np.any(d <= 0):
        raise ChannelDomainError("scattering variance needs f > 0 and d > 0")
    return 10.0 ** -3.24 * (f / 1e9) ** -2 * d ** -3


def _freq_axes(a: np.ndarray, f: np.ndarray) -> np.ndarray:
    return a.reshape(a.shape + (1,) * f.ndim)


def _link_gain(points, coeffs, tx, rx, f, los_flag, scatter) -> np.ndarray:
    tx = np.asarray(tx, dtype=float)
    rx = np.asarray(rx, dtype=float)
    f = np.asarray(f, dtype=float)
    d = np.linalg.norm(tx - rx, axis=-1)
    if np.any(d == 0):
        raise ChannelDomainError("transmitter and receiver coincide")
    fb = f.reshape((1,) * d.ndim + f.shape)
    out = _freq_axes(np.asarray(los_flag, dtype=float) * np.ones_like(d), f) * free_space_gain(_freq_axes(d, f), fb)
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    coeffs = np.asarray(coeffs).reshape(-1)
    if len(coeffs):
        # single-bounce path length via each reflector point
        leg1 = np.linalg.norm(tx[..., None, :] - points, axis=-1)
        leg2 = np.linalg.norm(points - rx[..., None, :], axis=-1)
        bounce = leg1 + leg2
        gains = free_space_gain(_freq_axes(bounce, f), f.reshape((1,) * bounce.ndim + f.shape))
        gains = np.moveaxis(gains, bounce.ndim - 1, -1)
        out = out + gains @ coeffs
    scatter = np.asarray(scatter) * np.ones_like(d)
    return out + _freq_axes(scatter, f)


def dt_gain(env: BandEnvironment, tx, rx, f, los_flag, scatter_draw) -> np.ndarray:
    """Direct-transmission gain: LoS + single-bounce reflections + scattering.

    ``scatter_draw`` is the CN(0, Lambda) aggregate for each Tx/Rx pair and is
    shared by every frequency.
    """
    return _link_gain(env.dt_points, env.dt_coeffs, tx, rx, f, los_flag, scatter_draw)


def tx_to_ris_gains(env: BandEnvironment, tx, ris_elements, f, los_flag, scatter_draws) -> np.ndarray:
    """Tx -> meta-element gains (one LoS indicator shared by every element)."""
    tx = np.asarray(tx, dtype=float)
    ris = np.asarray(ris_elements, dtype=float)
    return _link_gain(env.ris_points, env.ris_coeffs, tx[..., None, :], ris, f, los_flag, scatter_draws)


def ris_to_rx_gains(ris_elements, rx, f) -> np.ndarray:
    """Meta-element -> Rx gains: pure LoS, deterministic."""
    ris = np.asarray(ris_elements, dtype=float)
    rx = np.asarray(rx, dtype=float)
    f = np.asarray(f, dtype=float)
    d = np.linalg.norm(ris - rx[..., None, :], axis=-1)
    if np.any(d == 0):
        raise ChannelDomainError("receiver coincides with a meta-element")
    return free_space_gain(_freq_axes(d, f), f.reshape((1,) * d.ndim + f.shape))


def ris_cascade_gain(g_rx, phi, g_tx) -> complex:
    """g_rx^T Diag(phi) g_tx."""
    g_rx, phi, g_tx = (np.asarray(v) for v in (g_rx, phi, g_tx))
    if not (g_rx.shape == phi.shape == g_tx.shape) or g_rx.ndim != 1:
        raise ValueError(f"length mismatch: g_rx {g_rx.shape}, phi {phi.shape}, g_tx {g_tx.shape}")
    return complex(np.sum(g_rx * phi * g_tx))


def overall_gain(dt, ris_cascade):
    return dt + ris_cascade
