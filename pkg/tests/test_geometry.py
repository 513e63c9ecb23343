import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ristrack import geometry as geo
from ristrack.config import ConfigError, Roi
from ristrack.scenarios import default_source

C = 299_792_458.0


def test_zero_speed_track_is_static(rng):
    track = geo.sample_track(rng, Roi(), (0.0, 0.0), 0.5)
    np.testing.assert_array_equal(track.velocity, np.zeros(3))
    np.testing.assert_array_equal(track.position(0.37), track.start)


def test_start_mean_matches_uniform():
    rng = np.random.default_rng(7)
    roi = Roi()
    starts = np.array([geo.sample_track(rng, roi, (0, 10), 0.5).start for _ in range(10_000)])
    sigma = roi.sides / math.sqrt(12) / math.sqrt(len(starts))
    assert np.all(np.abs(starts.mean(axis=0) - [50.0, 0.0, 5.0]) < 3 * sigma)


def test_speed_and_direction_distribution():
    rng = np.random.default_rng(8)
    tracks = [geo.sample_track(rng, Roi(), (2.0, 6.0), 0.5) for _ in range(4000)]
    speeds = np.array([t.speed for t in tracks])
    assert speeds.min() >= 2.0 and speeds.max() <= 6.0
    assert abs(speeds.mean() - 4.0) < 3 * (4 / math.sqrt(12)) / math.sqrt(len(speeds))
    dirs = np.array([t.velocity / t.speed for t in tracks])
    # uniform on the sphere: each coordinate has mean 0 and variance 1/3
    assert np.all(np.abs(dirs.mean(axis=0)) < 3 * math.sqrt(1 / 3 / len(dirs)))
    np.testing.assert_allclose(dirs.var(axis=0), 1 / 3, atol=0.03)


def test_track_determinism():
    a = geo.sample_track(np.random.default_rng(5), Roi(), (0, 10), 0.5)
    b = geo.sample_track(np.random.default_rng(5), Roi(), (0, 10), 0.5)
    np.testing.assert_array_equal(a.start, b.start)
    np.testing.assert_array_equal(a.velocity, b.velocity)


def test_track_errors(rng):
    with pytest.raises(ConfigError):
        geo.sample_track(rng, Roi(), (5.0, 1.0), 0.5)
    with pytest.raises(ConfigError):
        geo.sample_track(rng, Roi(), (0.0, 1.0), 0.0)


def test_chaotic_track_stays_in_roi(rng):
    roi = Roi()
    track = geo.sample_track(rng, roi, (30.0, 30.0), 0.5, chaotic_step=0.01)
    assert len(track.knot_times) == 51
    t = np.linspace(0, 0.5, 200)
    assert np.all(roi.contains(track.position(t)))
    np.testing.assert_allclose(track.position(0.0), track.start)


def test_tx_below_band1_above_band2():
    src = default_source()
    track = geo.UeTrack(start=np.array([10.0, 0.0, 2.0]), velocity=np.zeros(3), duration=0.5)
    np.testing.assert_allclose(geo.tx_positions(track, 0.0, src.bands[0]), [[10.0, 0.0, 1.93]])
    np.testing.assert_allclose(geo.tx_positions(track, 0.0, src.bands[1]), [[10.0, 0.0, 2.07]])


def test_tx_half_wavelength_spacing():
    band = replace(default_source().bands[1], n_tx=2)
    track = geo.UeTrack(start=np.array([10.0, 0.0, 2.0]), velocity=np.zeros(3), duration=0.5)
    pos = geo.tx_positions(track, 0.0, band)
    assert pos[1, 1] - pos[0, 1] == pytest.approx(0.005353, abs=5e-7)
    assert pos[1, 1] - pos[0, 1] == pytest.approx(C / (2 * 28e9))


def test_tx_at_zero_uses_start(rng):
    track = geo.sample_track(rng, Roi(), (0, 10), 0.5)
    band = default_source().bands[0]
    np.testing.assert_allclose(geo.tx_positions(track, 0.0, band)[0], track.start + [0, 0, -0.07])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), t1=st.floats(0, 0.5), t2=st.floats(0, 0.5))
def test_tx_positions_affine_in_time(seed, t1, t2):
    track = geo.sample_track(np.random.default_rng(seed), Roi(), (0, 10), 0.5)
    band = default_source().bands[1]
    lhs = geo.tx_positions(track, t1, band) + geo.tx_positions(track, t2, band)
    rhs = 2 * geo.tx_positions(track, (t1 + t2) / 2, band)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_rx_array():
    band = default_source().bands[0]
    full = geo.rx_positions(band, sampled=False)
    assert len(full) == 4
    np.testing.assert_allclose(np.diff(full[:, 1]), C / 5.9e9 / 2)
    np.testing.assert_allclose(full.mean(axis=0), band.rx_center)
    np.testing.assert_allclose(geo.rx_positions(band), full[::2])


def test_ris_single_element_at_center():
    band = default_source().bands[0]
    one = replace(band, ris_rows=1, ris_cols=1, ris_stride=1)
    np.testing.assert_allclose(geo.ris_element_positions(one), [one.ris_center])


def test_ris_pitch_and_plane():
    band = default_source().bands[0]
    full = geo.ris_element_positions(band, sampled=False)
    assert full.shape == (144, 3)
    np.testing.assert_allclose(full[:, 1], band.ris_center[1])
    assert full[1, 0] - full[0, 0] == pytest.approx(0.0254, abs=1e-4)
    assert full[1, 0] - full[0, 0] == pytest.approx(0.5 * C / 5.9e9)
    np.testing.assert_allclose(full.mean(axis=0), band.ris_center, atol=1e-12)


def test_ris_subsampling_three_by_three():
    band = default_source().bands[0]
    nine = replace(band, ris_rows=9, ris_cols=9, ris_stride=3)
    kept = geo.ris_element_positions(nine)
    full = geo.ris_element_positions(nine, sampled=False).reshape(9, 9, 3)
    assert len(kept) == nine.n_ris == 9
    np.testing.assert_allclose(kept, full[::3, ::3].reshape(-1, 3))


def test_grid_shape():
    assert geo.grid_shape(16) == (4, 4)
    assert geo.grid_shape(12) == (3, 4)
    assert geo.grid_shape(7) == (1, 7)


def test_los_probability_values():
    assert geo.los_probability(10.0) == 1.0
    assert geo.los_probability(0.0) == 1.0
    assert geo.los_probability(63.0) == pytest.approx(0.5485, abs=1e-4)
    assert geo.los_probability(1e6) < 1e-4
    with pytest.raises(ValueError):
        geo.los_probability(-1.0)


@given(a=st.floats(18.0, 1e4), b=st.floats(18.0, 1e4))
def test_los_probability_monotone(a, b):
    lo, hi = sorted((a, b))
    assert geo.los_probability(hi) <= geo.los_probability(lo) + 1e-12
    assert 0.0 <= geo.los_probability(hi) <= 1.0


@given(d=st.floats(0.0, 18.0))
def test_los_probability_one_near(d):
    assert geo.los_probability(d) == 1.0


def test_environment_without_reflectors(rng):
    sc = default_source().replace(n_reflectors_dt=0, n_reflectors_ris=0)
    env = geo.sample_environment(rng, sc)
    for b in env.bands:
        assert b.dt_points.shape == (0, 3) and b.ris_coeffs.shape == (0,)


def test_reflection_coefficient_variance():
    sc = default_source().replace(n_reflectors_dt=10_000, n_reflectors_ris=10, var_reflect_dt=0.1)
    env = geo.sample_environment(np.random.default_rng(1), sc)
    c = env.bands[0].dt_coeffs
    assert np.mean(np.abs(c) ** 2) == pytest.approx(0.1, rel=0.05)
    assert np.all(sc.roi.contains(env.bands[0].dt_points))
    assert np.all(sc.roi.contains(env.bands[1].ris_points))


def test_environment_determinism():
    sc = default_source()
    a = geo.sample_environment(geo.rng_for(1, 2, geo.STREAM_ENV), sc)
    b = geo.sample_environment(geo.rng_for(1, 2, geo.STREAM_ENV), sc)
    for x, y in zip(a.bands, b.bands):
        np.testing.assert_array_equal(x.dt_points, y.dt_points)
        np.testing.assert_array_equal(x.ris_coeffs, y.ris_coeffs)


def test_complex_normal_moments():
    z = geo.complex_normal(np.random.default_rng(0), 2.0, 100_000)
    assert np.mean(np.abs(z) ** 2) == pytest.approx(2.0, rel=0.02)
    assert abs(z.real.mean()) < 3 * math.sqrt(1.0 / len(z))
    assert z.real.var() == pytest.approx(1.0, rel=0.03)
