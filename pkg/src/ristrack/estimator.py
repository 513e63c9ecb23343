"""scikit-learn style estimators wrapping the tracking network."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import ScenarioConfig
from .network import NetConfig, TrackingNetwork
from .protocol import Dataset, LabeledExample, MbCsiSequence, NoiseLevels
from .training import (TrainConfig, axial_mae, cross_domain_train, pretrain, prepare_domains)

_NET_KEYS = ("L", "L_dt", "L_ris", "L_tm", "C", "A", "K", "conv_channels", "dt_conv_depth",
             "ris_conv_depth", "use_dt", "use_ris", "bands")


def check_sequences(X) -> list[MbCsiSequence]:
    """Accept a Dataset, LabeledExamples or MbCsiSequences; return the sequences."""
    if isinstance(X, Dataset):
        X = X.examples
    out = []
    for item in X:
        if isinstance(item, LabeledExample):
            out.append(item.sequence)
        elif isinstance(item, MbCsiSequence):
            out.append(item)
        else:
            raise TypeError(f"expected MbCsiSequence or LabeledExample, got {type(item).__name__}")
    return out


def check_tracks(X, y=None) -> tuple[list[MbCsiSequence], list[np.ndarray]]:
    """Sequences with one (|J|, 3) truth array each, validated for shape and finiteness."""
    seqs = check_sequences(X)
    if y is None:
        examples = X.examples if isinstance(X, Dataset) else list(X)
        if not all(isinstance(e, LabeledExample) and e.has_truth for e in examples):
            raise ValueError("y is required unless X carries ground truth")
        y = [e.truth for e in examples]
    if len(y) != len(seqs):
        raise ValueError(f"{len(seqs)} sequences but {len(y)} tracks")
    tracks = []
    for s, t in zip(seqs, y):
        t = np.asarray(t, dtype=float).reshape(-1, 3)
        if len(t) != len(s):
            raise ValueError("each track needs one position per CSI sample")
        if not np.all(np.isfinite(t)):
            raise ValueError("tracks must be finite")
        tracks.append(t)
    return seqs, tracks


def _as_dataset(X, y, scenario: ScenarioConfig) -> Dataset:
    if isinstance(X, Dataset):
        return X
    seqs, tracks = check_tracks(X, y)
    examples = [LabeledExample(s, t, split="train") for s, t in zip(seqs, tracks)]
    return Dataset(scenario, examples, seed=0, noise=NoiseLevels.zero(scenario.n_bands))


class SequenceTracker(BaseEstimator):
    """Two-step pre-trained tracking function for one (source) environment.

    ``fit`` takes a ``Dataset`` (its train split is used) or a list of
    sequences plus a list of (|J|, 3) tracks together with ``scenario``.
    ``predict`` returns one (|J|, 3) array per sequence, ``transform`` the
    positional feature vectors, ``score`` the negated axial MAE.
    """

    def __init__(self, scenario: ScenarioConfig | None = None, L=64, L_dt=32, L_ris=64, L_tm=16, C=4, A=4, K=3,
                 conv_channels=8, dt_conv_depth=1, ris_conv_depth=2, use_dt=True, use_ris=True, bands=None,
                 epochs_frame=8, epochs_seq=30, batch_size=16, lr=1e-3, patience=6, val_fraction=0.1,
                 freeze_frame=False, seed=0):
        self.scenario = scenario
        self.L, self.L_dt, self.L_ris, self.L_tm = L, L_dt, L_ris, L_tm
        self.C, self.A, self.K = C, A, K
        self.conv_channels, self.dt_conv_depth, self.ris_conv_depth = conv_channels, dt_conv_depth, ris_conv_depth
        self.use_dt, self.use_ris, self.bands = use_dt, use_ris, bands
        self.epochs_frame, self.epochs_seq, self.batch_size = epochs_frame, epochs_seq, batch_size
        self.lr, self.patience, self.val_fraction = lr, patience, val_fraction
        self.freeze_frame, self.seed = freeze_frame, seed

    def _net_config(self) -> NetConfig:
        return NetConfig(**{k: getattr(self, k) for k in _NET_KEYS})

    def _train_config(self, **extra) -> TrainConfig:
        return TrainConfig(epochs_frame=self.epochs_frame, epochs_seq=self.epochs_seq, batch_size=self.batch_size,
                           lr=self.lr, patience=self.patience, val_fraction=self.val_fraction,
                           freeze_frame=self.freeze_frame, seed=self.seed, **extra)

    def _scenario_of(self, X) -> ScenarioConfig:
        sc = X.scenario if isinstance(X, Dataset) else self.scenario
        if sc is None:
            raise ValueError("scenario is required when X is not a Dataset")
        return sc

    def fit(self, X, y=None):
        sc = self._scenario_of(X)
        ds = _as_dataset(X, y, sc)
        net = TrackingNetwork.for_scenario(sc, self._net_config(), seed=self.seed)
        self.report_ = pretrain(net, ds, self._train_config())
        self.network_ = net
        self.n_bands_ = sc.n_bands
        return self

    def predict(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "network_")
        return self.network_.predict(check_sequences(X))

    def transform(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "network_")
        from .evaluation import extract_features
        seqs = check_sequences(X)
        feats = extract_features(self.network_, seqs)
        out, start = [], 0
        for s in seqs:
            n = sum(1 for smp in s.samples if smp.band in self.network_.bands)
            out.append(feats[start:start + n])
            start += n
        return out

    def score(self, X, y=None) -> float:
        seqs, tracks = check_tracks(X, y)
        check_is_fitted(self, "network_")
        bands = self.network_.bands
        keep = [i for i, s in enumerate(seqs) if np.isin(s.bands, bands).any()]
        preds = self.predict([seqs[i] for i in keep])
        return -axial_mae(preds, [tracks[i][np.isin(seqs[i].bands, bands)] for i in keep])


class DomainAdaptiveTracker(SequenceTracker):
    """Pre-train on a source dataset, then adapt to a target dataset.

    ``method`` selects x2track (separate source/target regressors with the
    adversarial divergence term) or one of the baselines finetune, uda, sda,
    semi_sda.  ``fit(source, target)`` takes two ``Dataset`` objects; a
    fitted ``SequenceTracker`` passed as ``pretrained`` skips pre-training.
    """

    def __init__(self, scenario=None, method="x2track", S=1.0, epochs_da=10, lr_finetune_h=5e-5, lr_da_h=5e-5,
                 L=64, L_dt=32,
                 L_ris=64, L_tm=16, C=4, A=4, K=3, conv_channels=8, dt_conv_depth=1, ris_conv_depth=2, use_dt=True,
                 use_ris=True, bands=None, epochs_frame=8, epochs_seq=30, batch_size=16, lr=1e-3, patience=6,
                 val_fraction=0.1, freeze_frame=False, seed=0):
        super().__init__(scenario, L, L_dt, L_ris, L_tm, C, A, K, conv_channels, dt_conv_depth, ris_conv_depth,
                         use_dt, use_ris, bands, epochs_frame, epochs_seq, batch_size, lr, patience, val_fraction,
                         freeze_frame, seed)
        self.method, self.S, self.epochs_da = method, S, epochs_da
        self.lr_finetune_h, self.lr_da_h = lr_finetune_h, lr_da_h

    def fit(self, X, y=None, pretrained: SequenceTracker | None = None):
        if not isinstance(X, Dataset) or not isinstance(y, Dataset):
            raise TypeError("DomainAdaptiveTracker.fit expects (source Dataset, target Dataset)")
        cfg = self._train_config(method=self.method, S=self.S, epochs_da=self.epochs_da,
                                 lr_finetune_h=self.lr_finetune_h, lr_da_h=self.lr_da_h)
        if pretrained is not None:
            check_is_fitted(pretrained, "network_")
            net = pretrained.network_.clone()
        else:
            net = TrackingNetwork.for_scenario(X.scenario, self._net_config(), seed=self.seed)
            pretrain(net, X, cfg)
        src, tgt = prepare_domains(net, X, y, self.method)
        self.report_ = cross_domain_train(net, src, tgt, cfg)
        self.network_ = net
        self.n_bands_ = X.scenario.n_bands
        return self
