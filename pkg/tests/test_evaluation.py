import math
import warnings
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ristrack.config import ConfigError, Roi
from ristrack.evaluation import (BoundInputs, CenterPredictor, DegenerateFeaturesWarning, ErrorGrid, ProxyConfig,
                                 TrackingResult, divergence_proxy, emit_report, evaluate_tracking, lemma1_bound,
                                 read_metrics)
from ristrack.network import NetConfig, TrackingNetwork
from ristrack.training import axial_mae


def _fake_dataset(tracks, split="test"):
    examples = [SimpleNamespace(sequence=list(range(len(t))), truth=np.asarray(t, float), split=split,
                                has_truth=True) for t in tracks]
    return SimpleNamespace(examples=examples)


class _Fixed:
    def __init__(self, preds):
        self.preds = preds

    def predict(self, sequences):
        return self.preds


def _uniform_tracks(rng, roi, n_tracks, length):
    return [rng.uniform(roi.low, roi.high, size=(length, 3)) for _ in range(n_tracks)]


def test_center_baseline_on_uniform_positions():
    roi = Roi()
    rng = np.random.default_rng(0)
    ds = _fake_dataset(_uniform_tracks(rng, roi, 200, 100))
    res = evaluate_tracking(CenterPredictor(roi), ds, roi=roi)
    # E|U(0,100) - 50| = 25, E|U(-50,50)| = 25, E|U(0,10) - 5| = 2.5
    np.testing.assert_allclose(res.per_axis, [25.0, 25.0, 2.5], rtol=0.01)
    assert res.mean == pytest.approx(17.5, rel=0.01)
    assert res.n_samples == 20000


def test_perfect_predictor_gives_zero(rng):
    roi = Roi()
    tracks = _uniform_tracks(rng, roi, 5, 7)
    res = evaluate_tracking(_Fixed(tracks), _fake_dataset(tracks), roi=roi)
    assert res.mean == 0.0 and res.std == 0.0
    assert np.all(res.per_axis == 0.0)


def test_constant_error_has_zero_std(rng):
    roi = Roi()
    tracks = _uniform_tracks(rng, roi, 4, 6)
    preds = [t + np.array([3.0, -3.0, 3.0]) for t in tracks]
    res = evaluate_tracking(_Fixed(preds), _fake_dataset(tracks), roi=roi)
    assert res.mean == pytest.approx(3.0)
    assert res.std == pytest.approx(0.0, abs=1e-12)


def test_mean_matches_axial_mae(rng):
    roi = Roi()
    tracks = _uniform_tracks(rng, roi, 6, 9)
    preds = [t + rng.normal(0, 4, t.shape) for t in tracks]
    res = evaluate_tracking(_Fixed(preds), _fake_dataset(tracks), roi=roi)
    assert res.mean == pytest.approx(axial_mae(preds, tracks), rel=1e-6)


def test_split_selection_and_errors(rng):
    roi = Roi()
    tracks = _uniform_tracks(rng, roi, 2, 3)
    ds = _fake_dataset(tracks, split="train")
    with pytest.raises(ValueError):
        evaluate_tracking(CenterPredictor(roi), ds, roi=roi)
    res = evaluate_tracking(CenterPredictor(roi), ds, split=None, roi=roi)
    assert res.n_samples == 6
    ds.examples[0].has_truth = False
    with pytest.raises(ValueError):
        evaluate_tracking(CenterPredictor(roi), ds, split=None, roi=roi)


def test_network_evaluation_on_dataset(tiny_source):
    net = TrackingNetwork.for_scenario(tiny_source.scenario, NetConfig(L=8, L_dt=8, L_ris=8, L_tm=4, A=2, K=1,
                                                                        conv_channels=2), seed=0)
    res = evaluate_tracking(net, tiny_source)
    test = tiny_source.test
    preds = net.predict([e.sequence for e in test])
    assert res.mean == pytest.approx(axial_mae(preds, [e.truth for e in test]), rel=1e-6)
    assert res.grid.count.sum() == res.n_samples


# -- error grid ------------------------------------------------------------------

def test_grid_bins_and_means():
    roi = Roi()
    pos = np.array([[5.0, -45.0, 1.0], [5.0, -45.0, 2.0], [95.0, 45.0, 3.0], [100.0, 50.0, 3.0]])
    grid = ErrorGrid.from_errors(pos, [1.0, 3.0, 5.0, 7.0], roi, bins=(10, 10))
    assert grid.mean.shape == (10, 10) and grid.count.sum() == 4
    assert grid.count[0, 0] == 2 and grid.mean[0, 0] == pytest.approx(2.0)
    assert grid.count[9, 9] == 2 and grid.mean[9, 9] == pytest.approx(6.0)
    assert np.isnan(grid.mean[4, 4])
    assert np.all(np.isfinite(grid.mean[grid.count > 0]))


def test_grid_round_trip(tmp_path, rng):
    roi = Roi()
    pos = rng.uniform(roi.low, roi.high, size=(50, 3))
    grid = ErrorGrid.from_errors(pos, rng.uniform(0, 10, 50), roi, bins=(4, 6))
    grid.write(tmp_path / "g.csv")
    back = ErrorGrid.read(tmp_path / "g.csv")
    np.testing.assert_array_equal(back.x_edges, grid.x_edges)
    np.testing.assert_array_equal(back.y_edges, grid.y_edges)
    np.testing.assert_array_equal(back.count, grid.count)
    np.testing.assert_array_equal(back.mean, grid.mean)


def _result(rng, roi, bins=(10, 10)):
    tracks = _uniform_tracks(rng, roi, 3, 5)
    return evaluate_tracking(CenterPredictor(roi), _fake_dataset(tracks), roi=roi, bins=bins)


def test_emit_report_round_trip(tmp_path, rng):
    roi = Roi()
    results = {"zeta": _result(rng, roi), "alpha": _result(rng, roi, bins=(3, 5))}
    paths = emit_report(results, tmp_path / "out", extra={"seed": 1})
    names = [p.name for p in paths]
    assert names == ["metrics.csv", "summary.json", "grid_alpha.csv", "grid_zeta.csv"]
    rows = read_metrics(tmp_path / "out" / "metrics.csv")
    assert [r["name"] for r in rows] == ["alpha", "zeta"]
    for r in rows:
        assert r["mean"] == pytest.approx(results[r["name"]].mean, rel=1e-12)
        assert r["n_samples"] == results[r["name"]].n_samples
    assert ErrorGrid.read(tmp_path / "out" / "grid_alpha.csv").mean.shape == (3, 5)
    first = (tmp_path / "out" / "metrics.csv").read_bytes()
    emit_report(dict(reversed(list(results.items()))), tmp_path / "out", extra={"seed": 1})
    assert (tmp_path / "out" / "metrics.csv").read_bytes() == first


def test_tracking_result_dict():
    grid = ErrorGrid.from_errors(np.zeros((1, 3)), [1.0], Roi(), bins=(1, 1))
    r = TrackingResult(1.0, 0.0, np.array([1.0, 2.0, 0.0]), 1, grid, np.array([1.0]))
    assert r.to_dict() == {"mean": 1.0, "std": 0.0, "mae_x": 1.0, "mae_y": 2.0, "mae_z": 0.0, "n_samples": 1}


# -- bounds -------------------------------------------------------------------

def test_bound2_reference_value():
    b = BoundInputs(kind="bound2", pdim=10, n=500, delta=0.1, S=100.0)
    oracle = 200.0 * math.sqrt((20 * math.log(1002) + 2 * math.log(80)) / 500)
    assert lemma1_bound(b) == pytest.approx(oracle, rel=1e-12)
    assert lemma1_bound(b) == pytest.approx(108.43, abs=1e-2)


def test_bound2_adds_empirical_error():
    base = lemma1_bound(BoundInputs(kind="bound2", pdim=3, n=100, delta=0.2, S=10.0))
    assert lemma1_bound(BoundInputs(kind="bound2", eps_hat=2.5, pdim=3, n=100, delta=0.2, S=10.0)) \
        == pytest.approx(base + 2.5)


def test_bound1_reduces_to_radicals():
    pdim, ns, nt, delta, S = 4, 300, 200, 0.05, 7.0
    b = BoundInputs(kind="bound1", pdim=pdim, delta=delta, S=S, n_src_unlabeled=ns, n_tgt_unlabeled=nt)
    r1 = math.sqrt((2 * pdim * math.log(2 * ns + 2) + 2 * math.log(8 / delta)) / ns)
    r2 = math.sqrt((2 * pdim * math.log(2 * nt) + math.log(2 / delta)) / nt)
    assert lemma1_bound(b) == pytest.approx(2 * S * r1 + 4 * S * r2, rel=1e-12)
    full = BoundInputs(kind="bound1", eps_hat=1.0, d_hat=0.5, lambda_star=2.0, pdim=pdim, delta=delta, S=S,
                       n_src_unlabeled=ns, n_tgt_unlabeled=nt)
    assert lemma1_bound(full) == pytest.approx(lemma1_bound(b) + 1.0 + S * 0.5 + 2.0, rel=1e-12)


def test_bound2_shrinks_with_size():
    vals = [lemma1_bound(BoundInputs(kind="bound2", pdim=10, n=n, delta=0.1, S=100.0))
            for n in (500 * 2 ** k for k in range(12))]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 5.0


_base = dict(eps_hat=1.0, pdim=5, delta=0.1, S=10.0, n=400, d_hat=0.3, n_src_unlabeled=400,
             n_tgt_unlabeled=300, lambda_star=1.0)


@settings(max_examples=60, deadline=None)
@given(kind=st.sampled_from(["bound1", "bound2"]),
       field=st.sampled_from(["pdim", "S", "d_hat", "lambda_star", "n", "n_src_unlabeled", "n_tgt_unlabeled",
                              "delta"]),
       factor=st.floats(1.01, 4.0))
def test_bound_monotone(kind, field, factor):
    lo = dict(_base, kind=kind)
    hi = dict(lo)
    if field == "delta":
        hi[field] = min(0.99, lo[field] * factor)
    elif field in ("pdim", "n", "n_src_unlabeled", "n_tgt_unlabeled"):
        hi[field] = int(math.ceil(lo[field] * factor))
    else:
        hi[field] = lo[field] * factor
    a, b = lemma1_bound(BoundInputs(**lo)), lemma1_bound(BoundInputs(**hi))
    if field in ("n", "n_src_unlabeled", "n_tgt_unlabeled", "delta"):
        assert b <= a + 1e-12
    else:
        assert b >= a - 1e-12


@pytest.mark.parametrize("changes", [dict(delta=0.0), dict(delta=1.0), dict(pdim=0), dict(n=0), dict(n=None),
                                     dict(S=-1.0), dict(kind="bound3")])
def test_bound_input_validation(changes):
    with pytest.raises(ConfigError):
        BoundInputs(**{**dict(kind="bound2", pdim=1, n=10, delta=0.1, S=1.0), **changes})


def test_bound1_needs_unlabeled_sizes():
    with pytest.raises(ConfigError):
        BoundInputs(kind="bound1", pdim=1, delta=0.1, S=1.0, n_src_unlabeled=10)


# -- divergence proxy -----------------------------------------------------------

_fast = ProxyConfig(epochs=10, batch_size=128, lr=1e-2, seed=0)


def test_proxy_identical_sets_near_chance():
    F = np.random.default_rng(1).normal(size=(400, 8))
    d = divergence_proxy(F, F.copy(), _fast)
    assert d == pytest.approx(1 - math.log(2), abs=0.02)


def test_proxy_separable_sets_near_one():
    rng = np.random.default_rng(2)
    Fs = rng.normal(size=(300, 8)) + 6.0
    Ft = rng.normal(size=(300, 8)) - 6.0
    assert divergence_proxy(Fs, Ft, _fast) > 0.95


def test_proxy_symmetric():
    rng = np.random.default_rng(3)
    Fs = rng.normal(size=(300, 6))
    Ft = rng.normal(size=(300, 6)) + 0.7
    # symmetry holds at the optimum, so give the classifier time to converge
    cfg = ProxyConfig(epochs=120, batch_size=128, lr=1e-2, seed=0)
    assert divergence_proxy(Fs, Ft, cfg) == pytest.approx(divergence_proxy(Ft, Fs, cfg), abs=0.02)


@settings(max_examples=10, deadline=None)
@given(shift=st.floats(0.0, 5.0), seed=st.integers(0, 100))
def test_proxy_in_unit_interval(shift, seed):
    rng = np.random.default_rng(seed)
    d = divergence_proxy(rng.normal(size=(60, 4)), rng.normal(size=(40, 4)) + shift,
                         ProxyConfig(epochs=3, batch_size=64, seed=seed))
    assert 0.0 <= d <= 1.0


def test_proxy_degenerate_warns_not_fails():
    F = np.ones((50, 4))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        d = divergence_proxy(F, F, _fast)
    assert any(issubclass(w.category, DegenerateFeaturesWarning) for w in caught)
    assert 0.0 <= d <= 1.0


@pytest.mark.parametrize("a,b", [((0, 4), (5, 4)), ((5, 4), (5, 3)), ((5,), (5,))])
def test_proxy_rejects_bad_shapes(a, b):
    with pytest.raises(ValueError):
        divergence_proxy(np.zeros(a), np.zeros(b))


def test_single_band_network_scored_on_its_samples(tiny_source):
    cfg = NetConfig(L=8, L_dt=8, L_ris=8, L_tm=4, A=2, K=1, conv_channels=2, bands=(1,))
    net = TrackingNetwork.for_scenario(tiny_source.scenario, cfg, seed=0)
    res = evaluate_tracking(net, tiny_source)
    test = tiny_source.test
    seqs = [e.sequence for e in test]
    truths = [e.truth[s.bands == 1] for e, s in zip(test, seqs)]
    assert res.n_samples == sum(len(t) for t in truths)
    assert res.mean == pytest.approx(axial_mae(net.predict(seqs), truths), rel=1e-6)
