"""Tracking-error metrics, the domain-divergence proxy and the generalisation bounds."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ConfigError, Roi
from .network import Regressor, TrackingNetwork, make_batch
from .optim import Adam


class DegenerateFeaturesWarning(RuntimeWarning):
    """The feature sets handed to the divergence proxy have (near) zero spread."""


# -- tracking errors ---------------------------------------------------------------

@dataclass
class ErrorGrid:
    """Mean axial error per horizontal (x, y) bin of the ground-truth position."""

    x_edges: np.ndarray
    y_edges: np.ndarray
    mean: np.ndarray   # (nx, ny), NaN where count == 0
    count: np.ndarray  # (nx, ny)

    @classmethod
    def from_errors(cls, positions, errors, roi: Roi, bins=(10, 10)) -> "ErrorGrid":
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        errors = np.asarray(errors, dtype=float).ravel()
        x_edges = np.linspace(roi.x_range[0], roi.x_range[1], bins[0] + 1)
        y_edges = np.linspace(roi.y_range[0], roi.y_range[1], bins[1] + 1)
        ix = np.clip(np.searchsorted(x_edges, positions[:, 0], side="right") - 1, 0, bins[0] - 1)
        iy = np.clip(np.searchsorted(y_edges, positions[:, 1], side="right") - 1, 0, bins[1] - 1)
        total = np.zeros(bins)
        count = np.zeros(bins, dtype=np.int64)
        np.add.at(total, (ix, iy), errors)
        np.add.at(count, (ix, iy), 1)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = np.where(count > 0, total / np.maximum(count, 1), np.nan)
        return cls(x_edges, y_edges, mean, count)

    def write(self, path) -> None:
        """Dense matrix with a bin-edge header: two edge lines, then nx rows of ny means."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x_edges", *[repr(float(v)) for v in self.x_edges]])
            w.writerow(["y_edges", *[repr(float(v)) for v in self.y_edges]])
            for i in range(self.mean.shape[0]):
                w.writerow([f"count:{','.join(str(int(c)) for c in self.count[i])}",
                            *["" if np.isnan(v) else repr(float(v)) for v in self.mean[i]]])

    @classmethod
    def read(cls, path) -> "ErrorGrid":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        x_edges = np.array([float(v) for v in rows[0][1:]])
        y_edges = np.array([float(v) for v in rows[1][1:]])
        mean = np.array([[np.nan if v == "" else float(v) for v in r[1:]] for r in rows[2:]])
        count = np.array([[int(c) for c in r[0].split(":", 1)[1].split(",")] for r in rows[2:]])
        return cls(x_edges, y_edges, mean, count)


@dataclass
class TrackingResult:
    mean: float
    std: float
    per_axis: np.ndarray
    n_samples: int
    grid: ErrorGrid
    errors: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "mae_x": float(self.per_axis[0]),
                "mae_y": float(self.per_axis[1]), "mae_z": float(self.per_axis[2]),
                "n_samples": self.n_samples}


class CenterPredictor:
    """Predicts the ROI centre for every sample (the analytic baseline)."""

    def __init__(self, roi: Roi):
        self.center = np.asarray(roi.center, dtype=float)

    def predict(self, sequences) -> list[np.ndarray]:
        return [np.tile(self.center, (len(s), 1)) for s in sequences]


def _examples(dataset, split):
    examples = dataset.examples if hasattr(dataset, "examples") else list(dataset)
    if split is not None:
        examples = [e for e in examples if e.split == split]
    return examples


def evaluate_tracking(model, dataset, *, split: str | None = "test", roi: Roi | None = None,
                      bins=(10, 10), source_head: bool = False) -> TrackingResult:
    """Average and standard deviation of per-sample axial errors, plus an error grid.

    ``model`` is a ``TrackingNetwork`` or anything with ``predict(sequences)``.
    A network restricted to some bands is scored on the samples of those
    bands only.  Empty sequences contribute nothing.
    """
    examples = [e for e in _examples(dataset, split) if len(e.sequence)]
    if not examples:
        raise ValueError("evaluate_tracking: no non-empty examples")
    if any(not e.has_truth for e in examples):
        raise ValueError("evaluate_tracking needs ground truth for every example")
    if roi is None:
        roi = dataset.scenario.roi if hasattr(dataset, "scenario") else Roi()
    seqs = [e.sequence for e in examples]
    truths = [e.truth for e in examples]
    if isinstance(model, TrackingNetwork):
        preds = model.predict(seqs, source_head=source_head)
        truths = [t[np.isin(s.bands, model.bands)] for s, t in zip(seqs, truths)]
    else:
        preds = model.predict(seqs)
    P = np.concatenate([np.reshape(p, (-1, 3)) for p in preds])
    T = np.concatenate(truths)
    if len(T) == 0:
        raise ValueError("evaluate_tracking: the model covers none of the samples")
    if P.shape != T.shape:
        raise ValueError(f"evaluate_tracking: {P.shape} estimates vs {T.shape} truths")
    absdiff = np.abs(P - T)
    err = absdiff.sum(axis=1) / 3.0
    return TrackingResult(float(err.mean()), float(err.std()), absdiff.mean(axis=0), len(err),
                          ErrorGrid.from_errors(T, err, roi, bins), err)


# -- divergence proxy ---------------------------------------------------------

def extract_features(net: TrackingNetwork, sequences, batch_size: int = 64) -> np.ndarray:
    """Positional feature vectors of all samples (rows of Y), concatenated."""
    encoded = [net.encode(s) for s in sequences]
    encoded = [e for e in encoded if len(e)]
    rows = []
    for s in range(0, len(encoded), batch_size):
        batch = make_batch(encoded[s:s + batch_size], net.bands)
        rows.append(net.features(batch).data[batch.mask])
    if not rows:
        return np.zeros((0, net.cfg.L), dtype=np.float32)
    return np.concatenate(rows)


@dataclass(frozen=True)
class ProxyConfig:
    epochs: int = 30
    batch_size: int = 256
    lr: float = 1e-2
    seed: int = 0


def _balanced_ce(zeta: Regressor, F_src, F_tgt) -> float:
    ls = zeta(Tensor(F_src)).data.astype(float).ravel()
    lt = zeta(Tensor(F_tgt)).data.astype(float).ravel()
    sp = lambda z: np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))  # noqa: E731
    return float(np.mean(sp(-ls)) + np.mean(sp(lt)))


def divergence_proxy(F_src, F_tgt, cfg: ProxyConfig = ProxyConfig()) -> float:
    """1 - (best domain-classification CE)/2, clipped to [0, 1].

    A fresh soft domain classifier (same skeleton as the position regressor)
    is trained to separate the two feature sets; the CE is the sum of the
    two per-domain means, so halving it gives the per-sample average
    (chance level ln 2).  This approximates, but is not, the supremum over
    threshold functions.
    """
    F_src = np.asarray(F_src, dtype=np.float32)
    F_tgt = np.asarray(F_tgt, dtype=np.float32)
    if F_src.ndim != 2 or F_tgt.ndim != 2 or F_src.shape[1] != F_tgt.shape[1]:
        raise ValueError("divergence_proxy: feature sets must be (n, L) with equal L")
    if len(F_src) == 0 or len(F_tgt) == 0:
        raise ValueError("divergence_proxy: empty feature set")
    if float(np.concatenate([F_src, F_tgt]).std(axis=0).max()) < 1e-8:
        warnings.warn("feature sets have collapsed to a constant", DegenerateFeaturesWarning)
    L = F_src.shape[1]
    rng = np.random.default_rng(cfg.seed)
    zeta = Regressor(np.random.default_rng([cfg.seed, 1]), max(L, 2), 1)
    opt = Adam(zeta.named_parameters(), lr=cfg.lr)
    best = _balanced_ce(zeta, F_src, F_tgt)
    half = max(1, cfg.batch_size // 2)
    n_steps = max(1, math.ceil(max(len(F_src), len(F_tgt)) / half))
    for _ in range(cfg.epochs):
        for _ in range(n_steps):
            xs = F_src[rng.integers(0, len(F_src), half)]
            xt = F_tgt[rng.integers(0, len(F_tgt), half)]
            opt.zero_grad()
            loss = ad.mean(ad.softplus(-zeta(Tensor(xs)))) + ad.mean(ad.softplus(zeta(Tensor(xt))))
            loss.backward()
            opt.step()
        best = min(best, _balanced_ce(zeta, F_src, F_tgt))
    return float(min(1.0, max(0.0, 1.0 - best / 2.0)))


def network_divergence(net: TrackingNetwork, src_sequences, tgt_sequences, cfg: ProxyConfig = ProxyConfig()) -> float:
    """``divergence_proxy`` on the features h produces for two sets of sequences."""
    return divergence_proxy(extract_features(net, src_sequences), extract_features(net, tgt_sequences), cfg)


# -- generalisation bounds ----------------------------------------------------------------

@dataclass(frozen=True)
class BoundInputs:
    """Inputs of the two upper bounds on the expected target axial error.

    ``n`` is |D^tgt| for bound2.  bound1 uses ``n_src_unlabeled`` and
    ``n_tgt_unlabeled`` (the unlabeled set sizes).  ``lambda_star`` cannot be
    computed from data; a practical estimate is the joint source + target
    error of a model trained on labeled data from both domains.  ``iota`` only
    documents the threshold used for the divergence and does not enter the
    formulas.
    """

    kind: str
    eps_hat: float = 0.0
    pdim: int = 1
    delta: float = 0.1
    S: float = 1.0
    n: int | None = None
    d_hat: float = 0.0
    n_src_unlabeled: int | None = None
    n_tgt_unlabeled: int | None = None
    lambda_star: float = 0.0
    iota: float = 0.5

    def __post_init__(self):
        if self.kind not in ("bound1", "bound2"):
            raise ConfigError(f"kind must be bound1 or bound2, got {self.kind!r}")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")
        if int(self.pdim) < 1:
            raise ConfigError("Pdim must be a positive integer")
        if self.S < 0 or self.d_hat < 0 or self.lambda_star < 0:
            raise ConfigError("S, d_hat and lambda_star must be non-negative")
        needed = ("n",) if self.kind == "bound2" else ("n_src_unlabeled", "n_tgt_unlabeled")
        for name in needed:
            v = getattr(self, name)
            if v is None or int(v) < 1:
                raise ConfigError(f"{self.kind} needs {name} >= 1")


def _radical(pdim, n, log_arg_offset, conf_coef, conf_arg):
    return math.sqrt((2 * pdim * math.log(2 * n + log_arg_offset) + conf_coef * math.log(conf_arg)) / n)


def lemma1_bound(inputs: BoundInputs) -> float:
    """Right-hand side of the chosen bound (metres, natural log)."""
    b = inputs
    if b.kind == "bound2":
        return b.eps_hat + 2 * b.S * _radical(b.pdim, b.n, 2, 2, 8 / b.delta)
    n_s, n_t = b.n_src_unlabeled, b.n_tgt_unlabeled
    return (b.eps_hat + b.S * b.d_hat
            + 2 * b.S * _radical(b.pdim, n_s, 2, 2, 8 / b.delta)
            + 4 * b.S * _radical(b.pdim, n_t, 0, 1, 2 / b.delta)
            + b.lambda_star)


# -- reports ---------------------------------------------------------------------

METRIC_COLUMNS = ("name", "n_samples", "mean", "std", "mae_x", "mae_y", "mae_z")


def emit_report(results: Mapping[str, TrackingResult], out_dir, extra: dict | None = None) -> list[Path]:
    """Write ``metrics.csv``, ``summary.json`` and one ``grid_<name>.csv`` per result."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "metrics.csv", out / "summary.json"]
    names = sorted(results)
    with open(paths[0], "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for name in names:
            w.writerow({"name": name, **results[name].to_dict()})
    summary = {"results": {n: results[n].to_dict() for n in names}}
    if extra:
        summary["extra"] = extra
    paths[1].write_text(json.dumps(summary, indent=2, sort_keys=True))
    for name in names:
        p = out / f"grid_{name}.csv"
        results[name].grid.write(p)
        paths.append(p)
    return paths


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in METRIC_COLUMNS[1:]:
            r[k] = int(r[k]) if k == "n_samples" else float(r[k])
    return rows
