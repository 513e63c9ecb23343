"""Frame scheduling, channel sounding and multi-band CSI sequence assembly."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .channel import dt_gain, ris_to_rx_gains, scattering_variance, tx_to_ris_gains
from .config import ConfigError, ScenarioConfig


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class CsiSample:
    """One sounded frame: time stamp, DT-CSI (Q x K) and RIS-CSI (Q x K x M)."""

    t: float
    dt_csi: np.ndarray
    ris_csi: np.ndarray
    band: int
    frame: int


@dataclass(frozen=True, eq=False)
class MbCsiSequence:
    """Merged multi-band CSI sequence of one tracking period.

    Samples are ordered band-major, then by frame; ``masks[n][tau]`` is the
    UL schedule of band ``n``.
    """

    samples: tuple[CsiSample, ...]
    masks: tuple[np.ndarray, ...]

    def __post_init__(self):
        n_sched = sum(int(np.count_nonzero(m)) for m in self.masks)
        if n_sched != len(self.samples):
            raise ValueError(f"{len(self.samples)} samples but {n_sched} scheduled frames")
        for n, mask in enumerate(self.masks):
            frames = [s.frame for s in self.samples if s.band == n]
            if frames != list(np.flatnonzero(mask)):
                raise ValueError(f"band {n} samples do not match its schedule")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.samples], dtype=float)

    @property
    def bands(self) -> np.ndarray:
        return np.array([s.band for s in self.samples], dtype=int)

    def band_samples(self, band: int) -> list[CsiSample]:
        return [s for s in self.samples if s.band == band]


@dataclass(eq=False)
class LabeledExample:
    """A tracking period: its CSI sequence and (optionally) ground truth.

    ``labeled`` marks truth usable for training.  Test-split examples keep
    their truth for evaluation even when not labeled (``has_truth``).
    ``clipped`` records that the ground-truth track was clipped to the ROI.
    """

    sequence: MbCsiSequence
    truth: np.ndarray | None
    domain: str = "source"
    labeled: bool = True
    split: str = "train"
    track: geo.UeTrack | None = field(default=None, repr=False)
    clipped: bool = False

    def __post_init__(self):
        if self.domain not in ("source", "target"):
            raise ValueError(f"domain must be 'source' or 'target', got {self.domain!r}")
        if self.labeled and self.truth is None:
            raise ValueError("a labeled example needs truth positions")
        if self.truth is not None:
            self.truth = np.asarray(self.truth, dtype=float).reshape(-1, 3)
            if len(self.truth) != len(self.sequence):
                raise ValueError("truth must have one position per CSI sample")

    @property
    def has_truth(self) -> bool:
        return self.truth is not None

    def unlabeled(self) -> "LabeledExample":
        """Copy with the labels stripped."""
        return LabeledExample(self.sequence, None, self.domain, False, self.split, clipped=self.clipped)


@dataclass(frozen=True)
class NoiseLevels:
    """Per-band measurement noise variances for DT-CSI and RIS-CSI."""

    sigma_dt: tuple[float, ...]
    sigma_ris: tuple[float, ...]

    def to_dict(self):
        return {"sigma_dt": list(self.sigma_dt), "sigma_ris": list(self.sigma_ris)}

    @classmethod
    def zero(cls, n_bands: int) -> "NoiseLevels":
        return cls((0.0,) * n_bands, (0.0,) * n_bands)


@dataclass(eq=False)
class Dataset:
    scenario: ScenarioConfig
    examples: list[LabeledExample]
    seed: int
    noise: NoiseLevels
    domain: str = "source"
    labeled_fraction: float = 1.0

    def __len__(self):
        return len(self.examples)

    def split(self, name: str) -> list[LabeledExample]:
        return [e for e in self.examples if e.split == name]

    @property
    def train(self) -> list[LabeledExample]:
        return self.split("train")

    @property
    def test(self) -> list[LabeledExample]:
        return self.split("test")


def schedule_frames(rng: np.random.Generator, p_ul: float, n_frames: int) -> np.ndarray:
    """i.i.d. Bernoulli(p_ul) UL schedule over ``n_frames`` frames."""
    if not 0.0 <= p_ul <= 1.0:
        raise ConfigError(f"p_ul must lie in [0, 1], got {p_ul}")
    if n_frames < 1:
        raise ConfigError("a band needs at least one frame")
    return rng.random(n_frames) < p_ul


def link_index(i: int, j: int, n_rx: int) -> int:
    """1-based link index q = (i - 1) * N_Rx + j for 1-based antennas i, j."""
    return (i - 1) * n_rx + j


def frame_time(band, frame: int) -> float:
    """Sounding time of a 0-based frame: mid-frame."""
    return (frame + 0.5) * band.frame_duration_s


def _horizontal(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a)[:2] - np.asarray(b)[:2]))


def sound_channel(env: geo.EnvironmentRealization, track: geo.UeTrack, scenario: ScenarioConfig,
                  band_index: int, frame: int, rng: np.random.Generator, noise: NoiseLevels,
                  *, noise_rng: np.random.Generator | None = None, force_los: bool | None = None,
                  scattering: bool = True) -> CsiSample:
    """Sound band ``band_index`` in ``frame`` and return the noisy CSI sample.

    LoS indicators are redrawn per frame from the UE's horizontal distance;
    scattering aggregates are drawn per antenna pair and shared across
    subcarriers.  ``force_los`` pins both indicators (True -> 1, False -> 0).
    """
    band = scenario.bands[band_index]
    benv = env.bands[band_index]
    t = frame_time(band, frame)
    if not 0.0 <= t < scenario.period_s:
        raise ConfigError(f"frame {frame} lies outside the tracking period")
    noise_rng = rng if noise_rng is None else noise_rng
    freqs = band.subcarrier_freqs
    tx = geo.tx_positions(track, t, band, scale=scenario.tx_scale)
    rx = geo.rx_positions(band)
    ris = geo.ris_element_positions(band)
    ue = track.position(t)

    if force_los is None:
        los_dt = float(rng.random() < geo.los_probability(_horizontal(ue, band.rx_center)))
        los_ris = float(rng.random() < geo.los_probability(_horizontal(ue, band.ris_center)))
    else:
        los_dt = los_ris = float(force_los)

    n_tx, n_rx, m = len(tx), len(rx), len(ris)
    if scattering:
        d_pair = np.linalg.norm(tx[:, None, :] - rx[None, :, :], axis=-1)
        h_dt = geo.complex_normal(rng, scattering_variance(band.center_freq_hz, d_pair))
        d_ris = np.linalg.norm(tx - np.asarray(band.ris_center), axis=-1)
        lam_ris = scattering_variance(band.center_freq_hz, d_ris)[:, None] * np.ones((n_tx, m))
        h_ris = geo.complex_normal(rng, lam_ris)
    else:
        h_dt = np.zeros((n_tx, n_rx), complex)
        h_ris = np.zeros((n_tx, m), complex)

    g_dt = dt_gain(benv, tx[:, None, :], rx, freqs, los_dt, h_dt)          # (Ntx, Nrx, K)
    g_tx = tx_to_ris_gains(benv, tx, ris, freqs, los_ris, h_ris)           # (Ntx, M, K)
    g_rx = ris_to_rx_gains(ris, rx, freqs)                                  # (Nrx, M, K)
    cascade = g_rx[None, :, :, :] * g_tx[:, None, :, :]                    # (Ntx, Nrx, M, K)

    q = n_tx * n_rx
    dt_csi = g_dt.reshape(q, len(freqs))
    ris_csi = np.transpose(cascade, (0, 1, 3, 2)).reshape(q, len(freqs), m)
    s_dt, s_ris = noise.sigma_dt[band_index], noise.sigma_ris[band_index]
    if s_dt > 0:
        dt_csi = dt_csi + geo.complex_normal(noise_rng, s_dt, dt_csi.shape)
    if s_ris > 0:
        ris_csi = ris_csi + geo.complex_normal(noise_rng, s_ris, ris_csi.shape)
    return CsiSample(t=t, dt_csi=dt_csi.astype(np.complex64), ris_csi=ris_csi.astype(np.complex64),
                     band=band_index, frame=frame)


def center_signal_power(scenario: ScenarioConfig) -> np.ndarray:
    """Mean RIS-CSI power per band with the UE parked at the ROI centre,
    LoS on and no reflections or scattering."""
    track = geo.UeTrack(start=scenario.roi.center, velocity=np.zeros(3), duration=scenario.period_s)
    env = geo.empty_environment(scenario.n_bands)
    rng = np.random.default_rng(0)
    power = []
    for n in range(scenario.n_bands):
        s = sound_channel(env, track, scenario, n, 0, rng, NoiseLevels.zero(scenario.n_bands),
                          force_los=True, scattering=False)
        power.append(float(np.mean(np.abs(s.ris_csi.astype(np.complex128)) ** 2)))
    return np.array(power)


def calibrate_noise(scenario: ScenarioConfig) -> NoiseLevels:
    """Noise variances meeting the centre-of-ROI RIS-CSI SNR anchor.

    ``same_noise``: one variance for every band, set by the anchor band.
    ``same_snr``: each band gets the anchor SNR at the centre.
    """
    power = center_signal_power(scenario)
    if np.any(power <= 0) or not np.all(np.isfinite(power)):
        raise CalibrationError(f"zero or non-finite centre signal power: {power}")
    ratio = 10.0 ** (scenario.snr_anchor_db / 10.0)
    boost = 10.0 ** (scenario.noise_offset_db / 10.0)
    if scenario.snr_mode == "same_noise":
        sigma = tuple([power[scenario.snr_anchor_band] / ratio * boost] * scenario.n_bands)
    else:
        sigma = tuple(float(p / ratio * boost) for p in power)
    return NoiseLevels(sigma_dt=tuple(float(s) for s in sigma), sigma_ris=tuple(float(s) for s in sigma))


def simulate_period(scenario: ScenarioConfig, seed: int, index: int, noise: NoiseLevels):
    """Track, environment and MB CSI sequence for period ``index``.

    Each random stream is keyed on (seed, index, stream), so a period does
    not depend on which other periods are generated.
    """
    chaotic_step = min(b.frame_duration_s for b in scenario.bands) if scenario.chaotic_tracks else None
    track = geo.sample_track(geo.rng_for(seed, index, geo.STREAM_TRACK), scenario.roi,
                             scenario.speed_range, scenario.period_s, chaotic_step=chaotic_step)
    env = geo.sample_environment(geo.rng_for(seed, index, geo.STREAM_ENV), scenario, stream=(seed, index))
    sched_rng = geo.rng_for(seed, index, geo.STREAM_SCHEDULE)
    chan_rng = geo.rng_for(seed, index, geo.STREAM_CHANNEL)
    noise_rng = geo.rng_for(seed, index, geo.STREAM_NOISE)
    masks, samples = [], []
    for n, band in enumerate(scenario.bands):
        mask = schedule_frames(sched_rng, band.p_ul, band.n_frames(scenario.period_s))
        masks.append(mask)
        for frame in np.flatnonzero(mask):
            samples.append(sound_channel(env, track, scenario, n, int(frame), chan_rng, noise,
                                         noise_rng=noise_rng))
    return track, env, MbCsiSequence(tuple(samples), tuple(masks))


def _period_job(args):
    scenario, seed, index, noise = args
    track, _, seq = simulate_period(scenario, seed, index, noise)
    return track, seq


def labeled_count(labeled_fraction: float, n_periods: int) -> int:
    """Number of labeled periods: ceil(fraction * n)."""
    return math.ceil(labeled_fraction * n_periods - 1e-9)


def generate_dataset(scenario: ScenarioConfig, n_periods: int, labeled_fraction: float = 1.0,
                     seed: int = 0, domain: str = "source", noise: NoiseLevels | None = None,
                     jobs: int = 1) -> Dataset:
    """Simulate ``n_periods`` tracking periods.

    The first ceil(labeled_fraction * n) periods are labeled; the last
    ``n - round(train_fraction * n)`` form the test split and keep their truth.
    """
    if n_periods < 1:
        raise ConfigError("n_periods must be >= 1")
    if not 0.0 <= labeled_fraction <= 1.0:
        raise ConfigError("labeled_fraction must lie in [0, 1]")
    noise = calibrate_noise(scenario) if noise is None else noise
    n_labeled = labeled_count(labeled_fraction, n_periods)
    n_train = int(round(scenario.train_fraction * n_periods))
    jobs_args = [(scenario, seed, i, noise) for i in range(n_periods)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_period_job, jobs_args, chunksize=max(1, n_periods // (4 * jobs))))
    else:
        results = [_period_job(a) for a in jobs_args]
    examples = []
    for i, (track, seq) in enumerate(results):
        labeled = i < n_labeled
        split = "train" if i < n_train else "test"
        truth = track.position(seq.times) if (labeled or split == "test") else None
        examples.append(LabeledExample(seq, truth, domain, labeled, split, track=track, clipped=track.clipped))
    return Dataset(scenario=scenario, examples=examples, seed=int(seed), noise=noise,
                   domain=domain, labeled_fraction=float(labeled_fraction))
