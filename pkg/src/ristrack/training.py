"""Losses, two-step pre-training, cross-domain training and the DA baselines.

All optimisation is mini-batch Adam over whole tracking periods.  Losses are
in metres (axial MAE) and nats (domain CE).
"""

from __future__ import annotations

import csv
import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ConfigError
from .network import Batch, EncodedPeriod, Regressor, TrackingNetwork, make_batch
from .optim import Adam
from .protocol import LabeledExample

METHODS = ("x2track", "finetune", "uda", "sda", "semi_sda")


class TrainingError(RuntimeError):
    """Missing data for the requested phase or a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    epochs_frame: int = 4
    epochs_seq: int = 30
    epochs_da: int = 10
    batch_size: int = 16
    frame_batch_size: int = 64
    lr: float = 1e-3
    lr_finetune_h: float = 5e-5
    lr_da_h: float | None = 5e-5  # h rate of the non-finetune methods in cross-domain training; None -> lr
    S: float = 1.0
    seed: int = 0
    method: str = "x2track"
    patience: int = 6
    val_fraction: float = 0.1
    freeze_frame: bool = False
    eval_every: int = 1
    max_seconds: float | None = None

    def __post_init__(self):
        if self.S < 0:
            raise ConfigError("S must be non-negative")
        if self.lr <= 0 or self.lr_finetune_h <= 0 or (self.lr_da_h is not None and self.lr_da_h <= 0):
            raise ConfigError("learning rates must be positive")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.batch_size < 1 or self.frame_batch_size < 1:
            raise ConfigError("batch sizes must be positive")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must be in [0, 1)")

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    def to_dict(self):
        return asdict(self)


REPORT_COLUMNS = ("phase", "epoch", "loss", "ce", "divergence_proxy", "train_mae_src", "test_mae_src",
                  "train_mae_tgt", "test_mae_tgt", "seconds")


@dataclass
class TrainReport:
    rows: list[dict] = field(default_factory=list)
    checkpoint: str | None = None
    meta: dict = field(default_factory=dict)

    def add(self, **row) -> None:
        for k, v in row.items():
            if isinstance(v, float) and not math.isfinite(v):
                raise TrainingError(f"non-finite {k} in {row.get('phase')} epoch {row.get('epoch')}")
        last = [r["epoch"] for r in self.rows if r["phase"] == row.get("phase")]
        if last and row.get("epoch") is not None and row["epoch"] <= last[-1]:
            raise TrainingError(f"epochs must increase within phase {row.get('phase')}")
        self.rows.append({c: row.get(c) for c in REPORT_COLUMNS})

    def phase(self, name: str) -> list[dict]:
        return [r for r in self.rows if r["phase"] == name]

    def metric(self, name: str, phase: str | None = None) -> list:
        return [r[name] for r in self.rows if phase is None or r["phase"] == phase]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: ("" if v is None else v) for k, v in r.items()})

    def summary(self) -> dict:
        out = {"checkpoint": self.checkpoint, "meta": self.meta, "epochs": len(self.rows)}
        if self.rows:
            out["final"] = self.rows[-1]
        return out

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True))

    def extend(self, other: "TrainReport") -> "TrainReport":
        self.rows.extend(other.rows)
        return self


# -- losses -------------------------------------------------------------------------

def axial_mae(pred, truth, pred_times=None, truth_times=None) -> float:
    """Mean over samples of (1/3) * ||p - p_hat||_1 (metres).

    ``pred``/``truth`` are (n, 3) arrays or equal-length lists of them
    (one per period); the mean is taken over all samples.
    """
    if pred_times is not None and truth_times is not None:
        pt, tt = np.concatenate([np.ravel(a) for a in _as_list(pred_times)]), \
            np.concatenate([np.ravel(a) for a in _as_list(truth_times)])
        if pt.shape != tt.shape or not np.allclose(pt, tt, rtol=0, atol=1e-9):
            raise ValueError("axial_mae: estimated and true tracks have different time stamps")
    P = np.concatenate([np.reshape(a, (-1, 3)) for a in _as_list(pred)])
    T = np.concatenate([np.reshape(a, (-1, 3)) for a in _as_list(truth)])
    if P.shape != T.shape:
        raise ValueError(f"axial_mae: {P.shape} estimates vs {T.shape} truths")
    if len(P) == 0:
        raise ValueError("axial_mae: no samples")
    return float(np.mean(np.abs(P - T).sum(axis=1) / 3.0))


def _as_list(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


def mae_loss(P: Tensor, truth: np.ndarray, mask: np.ndarray) -> Tensor:
    """Differentiable axial MAE over the rows selected by ``mask`` (B, N)."""
    w = mask.astype(np.float32)[..., None]
    n = float(mask.sum())
    if n == 0:
        raise TrainingError("empty MAE term")
    return ad.tsum(ad.tabs(P - Tensor(truth)) * Tensor(w)) * (1.0 / (3.0 * n))


def ce_from_logits(logit_src: Tensor, mask_src: np.ndarray, logit_tgt: Tensor, mask_tgt: np.ndarray) -> Tensor:
    """-mean log zeta over source rows - mean log(1 - zeta) over target rows."""
    ns, nt = float(mask_src.sum()), float(mask_tgt.sum())
    if ns == 0 or nt == 0:
        raise TrainingError("CE needs non-empty source and target feature sets")
    ws = Tensor(mask_src.astype(np.float32)[..., None])
    wt = Tensor(mask_tgt.astype(np.float32)[..., None])
    # -log sigmoid(z) = softplus(-z); -log(1 - sigmoid(z)) = softplus(z)
    return (ad.tsum(ad.softplus(-logit_src) * ws) * (1.0 / ns)
            + ad.tsum(ad.softplus(logit_tgt) * wt) * (1.0 / nt))


def ce_loss(zeta: Callable, F_src, F_tgt) -> float:
    """CE of a soft domain classifier ``zeta`` (features -> probabilities)."""
    F_src, F_tgt = np.asarray(F_src), np.asarray(F_tgt)
    if len(F_src) == 0 or len(F_tgt) == 0:
        raise ValueError("ce_loss: empty feature set")
    ps = np.asarray(getattr(zeta(F_src), "data", zeta(F_src)), dtype=float).ravel()
    pt = np.asarray(getattr(zeta(F_tgt), "data", zeta(F_tgt)), dtype=float).ravel()
    with np.errstate(divide="ignore"):
        return float(-np.mean(np.log(ps)) - np.mean(np.log1p(-pt)))


# -- data plumbing ------------------------------------------------------------------

def encode_examples(net: TrackingNetwork, examples: Sequence[LabeledExample], *, with_truth: bool,
                    ) -> list[EncodedPeriod]:
    """Network-ready periods; empty sequences are skipped."""
    out = []
    for ex in examples:
        if with_truth and not ex.has_truth:
            raise TrainingError("labels requested from an unlabeled example")
        enc = net.encode(ex.sequence, ex.truth if with_truth else None)
        if len(enc):
            out.append(enc)
    return out


@dataclass
class DomainData:
    """Encoded views of one domain's dataset."""

    labeled: list[EncodedPeriod]
    unlabeled: list[EncodedPeriod]
    test: list[EncodedPeriod]


def domain_data(net: TrackingNetwork, dataset, *, use_labels: bool = True) -> DomainData:
    train = dataset.train
    labeled = encode_examples(net, [e for e in train if e.labeled], with_truth=True) if use_labels else []
    unlabeled = encode_examples(net, [e.unlabeled() for e in train], with_truth=False)
    test = encode_examples(net, [e for e in dataset.test if e.has_truth], with_truth=True)
    return DomainData(labeled, unlabeled, test)


def dataset_mae(net: TrackingNetwork, periods: list[EncodedPeriod], source_head: bool = False,
                batch_size: int = 64) -> float | None:
    if not periods:
        return None
    preds = net.predict(periods, source_head=source_head, batch_size=batch_size)
    return axial_mae(preds, [p.truth for p in periods])


def _chunks(rng, n, size):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _draw(rng, n, size):
    """``size`` indices from range(n), without replacement when possible."""
    return rng.permutation(n)[:size] if n >= size else rng.integers(0, n, size)


def _phase_rng(seed: int, phase: str):
    return np.random.default_rng([seed, sum(phase.encode()) + 7919 * len(phase)])


def _check(loss: Tensor, what: str) -> float:
    v = float(loss.data)
    if not math.isfinite(v):
        raise TrainingError(f"non-finite {what} loss")
    return v


# -- pre-training -----------------------------------------------------------------------

def _band_samples(periods: list[EncodedPeriod], band: int):
    dt, ris, truth = [], [], []
    for p in periods:
        if band in p.dt:
            dt.append(p.dt[band])
            ris.append(p.ris[band])
            truth.append(p.truth[p.bands == band])
    if not dt:
        return None
    return np.concatenate(dt), np.concatenate(ris), np.concatenate(truth).astype(np.float32)


def pretrain_frame_level(net: TrackingNetwork, periods: list[EncodedPeriod], cfg: TrainConfig,
                         bands: Sequence[int] | None = None) -> TrainReport:
    """First step: per-band frame encoders trained to position single samples.

    Each band has its own throwaway regressor and optimiser; the regressors
    are discarded afterwards.
    """
    if not periods:
        raise TrainingError("frame-level pre-training needs labeled source data")
    report = TrainReport()
    for band in (net.bands if bands is None else bands):
        data = _band_samples(periods, band)
        if data is None:
            continue
        dt, ris, truth = data
        rng = _phase_rng(cfg.seed, f"frame{band}")
        head = Regressor(np.random.default_rng([cfg.seed, 11, band]), net.cfg.L, 3)
        params = dict(net.frame_group(band))
        params.update(head.named_parameters(f"head{band}."))
        opt = Adam(params, lr=cfg.lr)
        for epoch in range(cfg.epochs_frame):
            t0, tot, cnt = time.time(), 0.0, 0
            for idx in _chunks(rng, len(dt), cfg.frame_batch_size):
                opt.zero_grad()
                x = net.frame_encode(band, Tensor(dt[idx]), Tensor(ris[idx]))
                P = net.to_position(head(x))
                loss = ad.tsum(ad.tabs(P - Tensor(truth[idx]))) * (1.0 / (3.0 * len(idx)))
                tot += _check(loss, "frame-level") * len(idx)
                cnt += len(idx)
                loss.backward()
                opt.step()
            report.add(phase=f"frame{band}", epoch=epoch + 1, loss=tot / cnt, train_mae_src=tot / cnt,
                       seconds=time.time() - t0)
    return report


def _split_val(rng, periods, frac):
    if frac <= 0 or len(periods) < 10:
        return periods, []
    n_val = max(1, int(round(frac * len(periods))))
    order = rng.permutation(len(periods))
    return [periods[i] for i in order[n_val:]], [periods[i] for i in order[:n_val]]


def pretrain_sequence_level(net: TrackingNetwork, periods: list[EncodedPeriod], cfg: TrainConfig,
                            test: list[EncodedPeriod] | None = None) -> TrainReport:
    """Second step: the complete f = xi o h trained on labeled source periods.

    Early stopping on a held-out part of the training periods; the best
    parameters are restored.  With ``cfg.freeze_frame`` the frame encoders
    keep their pre-trained values.
    """
    if not periods:
        raise TrainingError("sequence-level pre-training needs labeled source data")
    rng = _phase_rng(cfg.seed, "sequence")
    train, val = _split_val(rng, periods, cfg.val_fraction)
    params = {k: v for k, v in net.named_parameters().items()
              if k.startswith("h.") or k.startswith("xi.")}
    if cfg.freeze_frame:
        params = {k: v for k, v in params.items() if not k.startswith("h.frame")}
    opt = Adam(params, lr=cfg.lr)
    report = TrainReport()
    best, best_state, stale = math.inf, None, 0
    start = time.time()
    for epoch in range(cfg.epochs_seq):
        t0, tot, cnt = time.time(), 0.0, 0
        for idx in _chunks(rng, len(train), cfg.batch_size):
            batch = make_batch([train[i] for i in idx], net.bands, with_truth=True)
            opt.zero_grad()
            loss = mae_loss(net.regress(net.features(batch)), batch.truth, batch.mask)
            n = int(batch.mask.sum())
            tot += _check(loss, "sequence-level") * n
            cnt += n
            loss.backward()
            opt.step()
        val_mae = dataset_mae(net, val)
        test_mae = dataset_mae(net, test) if test and (epoch + 1) % cfg.eval_every == 0 else None
        report.add(phase="sequence", epoch=epoch + 1, loss=tot / cnt, train_mae_src=tot / cnt,
                   test_mae_src=test_mae, seconds=time.time() - t0)
        if val:
            if val_mae < best - 1e-6:
                best, best_state, stale = val_mae, net.state_dict(), 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
        if cfg.max_seconds is not None and time.time() - start > cfg.max_seconds:
            break
    if best_state is not None:
        net.load_state_dict(best_state)
    report.meta["best_val_mae"] = None if best_state is None else best
    return report


def pretrain(net: TrackingNetwork, source, cfg: TrainConfig) -> TrainReport:
    """Two-step pre-training on a source dataset."""
    data = domain_data(net, source)
    report = TrainReport()
    if cfg.epochs_frame > 0:
        report.extend(pretrain_frame_level(net, data.labeled, cfg))
    report.extend(pretrain_sequence_level(net, data.labeled, cfg, data.test))
    return report


# -- cross-domain training -----------------------------------------------------

@dataclass(frozen=True)
class Objective:
    """Which terms enter the cross-domain loss."""

    src_mae: bool
    tgt_mae: bool
    ce: bool
    separate_heads: bool
    uses_tgt_labels: bool
    uses_tgt_unlabeled: bool
    h_lr: float | None = None


def objective_for(method: str, cfg: TrainConfig) -> Objective:
    """Loss terms of each method.  Fine-tuning always trains h with
    ``lr_finetune_h``; the other methods use ``lr_da_h`` (``lr`` when None)."""
    S, h_lr = cfg.S, cfg.lr_da_h
    if method == "x2track":
        return Objective(True, True, S > 0, True, True, True, h_lr=h_lr)
    if method == "finetune":
        return Objective(False, True, False, False, True, False, h_lr=cfg.lr_finetune_h)
    if method == "uda":
        return Objective(True, False, S > 0, False, False, True, h_lr=h_lr)
    if method == "sda":
        return Objective(True, True, False, False, True, False, h_lr=h_lr)
    if method == "semi_sda":
        return Objective(True, True, S > 0, False, True, True, h_lr=h_lr)
    raise ConfigError(f"unknown method {method!r}")


@dataclass(eq=False)
class DomainBatch:
    """The periods of one cross-domain training step."""

    src: Batch | None
    tgt: Batch | None
    tgt_truth: np.ndarray | None = None
    tgt_labeled: np.ndarray | None = None  # (B, N) rows whose target labels may be used


def make_domain_batch(net: TrackingNetwork, obj: Objective, src_periods, tgt_labeled, tgt_unlabeled) -> DomainBatch:
    """Source periods (with truth when the source MAE is used) and target
    periods, labeled ones first; only labeled target rows carry truth."""
    src = make_batch(list(src_periods), net.bands, with_truth=obj.src_mae) if src_periods else None
    tgt_periods = list(tgt_labeled) + list(tgt_unlabeled)
    if not tgt_periods:
        return DomainBatch(src, None)
    tgt = make_batch(tgt_periods, net.bands)
    truth = np.zeros(tgt.mask.shape + (3,), dtype=np.float32)
    lmask = np.zeros_like(tgt.mask)
    for i, p in enumerate(tgt_labeled):
        truth[i, :len(p)] = p.truth
        lmask[i, :len(p)] = True
    return DomainBatch(src, tgt, truth, lmask)


def da_objective(net: TrackingNetwork, obj: Objective, S: float, db: DomainBatch) -> tuple[Tensor, dict]:
    """Cross-domain loss and its separately computed terms.

    Returns ``(total, terms)`` with ``terms`` among ``mae_src``, ``mae_tgt``
    and ``ce``; ``total = mae_src + mae_tgt + S * ce`` over the terms present.
    """
    terms = {}
    Ys = net.features(db.src) if db.src is not None else None
    Yt = net.features(db.tgt) if db.tgt is not None else None
    if obj.src_mae:
        terms["mae_src"] = mae_loss(net.regress(Ys, source_head=obj.separate_heads), db.src.truth, db.src.mask)
    if obj.tgt_mae:
        terms["mae_tgt"] = mae_loss(net.regress(Yt), db.tgt_truth, db.tgt_labeled)
    if obj.ce:
        ls = net.domain_logits(ad.gradient_reverse(Ys))
        lt = net.domain_logits(ad.gradient_reverse(Yt))
        terms["ce"] = ce_from_logits(ls, db.src.mask, lt, db.tgt.mask)
    total = Tensor(np.zeros((), dtype=np.float32))
    for name, term in terms.items():
        total = total + (term * S if name == "ce" else term)
    return total, terms


def cross_domain_train(net: TrackingNetwork, src: DomainData, tgt: DomainData, cfg: TrainConfig,
                       method: str | None = None) -> TrainReport:
    """Joint training of h, xi, xi' and zeta from a pre-trained network.

    x2track minimises  MAE_tgt(xi o h) + MAE_src(xi' o h) + S * CE(zeta, R(h));
    the baselines drop or merge terms (see ``objective_for``).  The
    gradient reverse function R makes h ascend the CE while zeta descends it.
    Labeled periods feed the MAE terms; the unlabeled views feed only the CE.
    """
    method = method or cfg.method
    obj = objective_for(method, cfg)
    if obj.tgt_mae and not tgt.labeled:
        if method == "x2track":
            warnings.warn("no labeled target data: x2track degenerates to UDA", RuntimeWarning)
            obj = replace(objective_for("uda", cfg), separate_heads=True)
        else:
            raise TrainingError(f"{method} needs labeled target data")
    if obj.src_mae and not src.labeled:
        raise TrainingError(f"{method} needs labeled source data")
    if obj.ce and (not src.unlabeled or not tgt.unlabeled):
        raise TrainingError("the CE term needs unlabeled data from both domains")

    if obj.separate_heads:
        net.load_state_dict({k.replace("xi.", "xi_src.", 1): v.data.copy()
                             for k, v in net.group("xi").items()}, strict=False)
    params = dict(net.group("h"))
    params.update(net.group("xi"))
    if obj.separate_heads:
        params.update(net.group("xi_src"))
    if obj.ce:
        params.update(net.group("zeta"))
    overrides = {k: obj.h_lr for k in net.group("h")} if obj.h_lr else None
    opt = Adam(params, lr=cfg.lr, lr_overrides=overrides)

    S = cfg.S
    rng = _phase_rng(cfg.seed, f"da-{method}")
    bs = cfg.batch_size
    # every method gets the same number of steps per epoch: one pass over
    # the source training periods
    n_steps = math.ceil(max(len(src.labeled), len(src.unlabeled), len(tgt.labeled)) / bs)
    report = TrainReport(meta={"method": method, "S": S})
    start = time.time()
    for epoch in range(cfg.epochs_da):
        t0 = time.time()
        sums = {"loss": 0.0, "ce": 0.0}
        src_pool = src.labeled if obj.src_mae else src.unlabeled
        src_order = _chunks(rng, len(src_pool), bs) if src_pool else []
        for step in range(n_steps):
            src_periods = ([src_pool[i] for i in src_order[step % len(src_order)]]
                           if obj.src_mae or obj.ce else [])
            lab = [tgt.labeled[i] for i in _draw(rng, len(tgt.labeled), bs)] if obj.tgt_mae else []
            unl = [tgt.unlabeled[i] for i in _draw(rng, len(tgt.unlabeled), bs)] if obj.ce else []
            opt.zero_grad()
            loss, terms = da_objective(net, obj, S, make_domain_batch(net, obj, src_periods, lab, unl))
            if "ce" in terms:
                sums["ce"] += _check(terms["ce"], "CE")
            sums["loss"] += _check(loss, method)
            loss.backward()
            opt.step()
        row = dict(phase=f"da-{method}", epoch=epoch + 1, loss=sums["loss"] / n_steps, seconds=time.time() - t0)
        if obj.ce:
            row["ce"] = sums["ce"] / n_steps
            row["divergence_proxy"] = max(0.0, 1.0 - row["ce"] / 2.0)
        if (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs_da:
            row["test_mae_tgt"] = dataset_mae(net, tgt.test)
            row["test_mae_src"] = dataset_mae(net, src.test, source_head=obj.separate_heads)
        report.add(**row)
        if cfg.max_seconds is not None and time.time() - start > cfg.max_seconds:
            break
    return report


def baseline_train(kind: str, net: TrackingNetwork, src: DomainData, tgt: DomainData,
                   cfg: TrainConfig) -> TrainReport:
    """Fine-tuning, UDA, SDA or Semi-SDA (see ``objective_for``)."""
    if kind not in METHODS or kind == "x2track":
        raise ConfigError(f"unknown baseline {kind!r}")
    return cross_domain_train(net, src, tgt, cfg, method=kind)


def prepare_domains(net: TrackingNetwork, source, target, method: str) -> tuple[DomainData, DomainData]:
    """Encode the datasets, exposing to the method only what it may use."""
    obj = objective_for(method, TrainConfig(method=method))
    src = domain_data(net, source)
    tgt = domain_data(net, target, use_labels=obj.uses_tgt_labels)
    if not obj.uses_tgt_unlabeled:
        tgt = DomainData(tgt.labeled, [], tgt.test)
    return src, tgt
