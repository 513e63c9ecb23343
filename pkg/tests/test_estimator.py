import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ristrack.estimator import DomainAdaptiveTracker, SequenceTracker, check_sequences, check_tracks
from ristrack.training import axial_mae

SMALL = dict(L=8, L_dt=8, L_ris=8, L_tm=4, A=2, K=1, conv_channels=2, epochs_frame=1, epochs_seq=2, seed=0)


@pytest.fixture(scope="module")
def fitted(tiny_source):
    return SequenceTracker(**SMALL).fit(tiny_source)


def test_params_round_trip():
    est = SequenceTracker(**SMALL)
    params = est.get_params()
    assert params["L"] == 8 and params["epochs_seq"] == 2
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(lr=5e-4)
    assert est.lr == 5e-4


def test_da_params_include_base():
    est = DomainAdaptiveTracker(method="sda", S=0.5, **SMALL)
    p = est.get_params()
    assert p["method"] == "sda" and p["S"] == 0.5 and p["L"] == 8
    assert clone(est).get_params() == p


def test_unfitted_predict_raises(tiny_source):
    with pytest.raises(NotFittedError):
        SequenceTracker(**SMALL).predict(tiny_source)


def test_fit_predict_score(fitted, tiny_source):
    test = tiny_source.test
    preds = fitted.predict(test)
    assert len(preds) == len(test)
    for p, e in zip(preds, test):
        assert p.shape == (len(e.sequence), 3) and np.all(np.isfinite(p))
    assert fitted.score(test) == pytest.approx(-axial_mae(preds, [e.truth for e in test]))
    assert fitted.report_.rows


def test_transform_shapes(fitted, tiny_source):
    feats = fitted.transform(tiny_source.test)
    for f, e in zip(feats, tiny_source.test):
        assert f.shape == (len(e.sequence), 8)


def test_fit_from_arrays_matches_dataset(tiny_source):
    train = tiny_source.train
    seqs = [e.sequence for e in train]
    tracks = [e.truth for e in train]
    a = SequenceTracker(scenario=tiny_source.scenario, **SMALL).fit(seqs, tracks)
    b = SequenceTracker(**SMALL).fit(tiny_source)
    pa = a.predict(tiny_source.test)
    pb = b.predict(tiny_source.test)
    assert all(np.array_equal(x, y) for x, y in zip(pa, pb))


def test_fit_needs_scenario_for_arrays(tiny_source):
    e = tiny_source.train[0]
    with pytest.raises(ValueError):
        SequenceTracker(**SMALL).fit([e.sequence], [e.truth])


def test_input_validation(tiny_source):
    e = tiny_source.train[0]
    with pytest.raises(TypeError):
        check_sequences([np.zeros(3)])
    with pytest.raises(ValueError):
        check_tracks([e.sequence], [e.truth, e.truth])
    with pytest.raises(ValueError):
        check_tracks([e.sequence], [e.truth[:-1]])
    bad = e.truth.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        check_tracks([e.sequence], [bad])
    with pytest.raises(ValueError):
        check_tracks([e.sequence])


def test_domain_adaptive_fit(fitted, tiny_source, tiny_target):
    before = {k: v.copy() for k, v in fitted.network_.state_dict().items()}
    est = DomainAdaptiveTracker(method="x2track", epochs_da=1, **SMALL)
    est.fit(tiny_source, tiny_target, pretrained=fitted)
    preds = est.predict(tiny_target.test)
    assert len(preds) == len(tiny_target.test)
    assert np.isfinite(est.score(tiny_target.test))
    # the pre-trained estimator is left untouched
    assert all(np.array_equal(before[k], v) for k, v in fitted.network_.state_dict().items())
    assert est.network_ is not fitted.network_


def test_domain_adaptive_rejects_arrays(tiny_source):
    with pytest.raises(TypeError):
        DomainAdaptiveTracker(**SMALL).fit(tiny_source.train, None)


def test_single_band_score(tiny_source):
    est = SequenceTracker(bands=(0,), **SMALL).fit(tiny_source)
    test = tiny_source.test
    truths = [e.truth[e.sequence.bands == 0] for e in test]
    preds = est.predict(test)
    assert [len(p) for p in preds] == [len(t) for t in truths]
    assert est.score(test) == pytest.approx(-axial_mae(preds, truths))
