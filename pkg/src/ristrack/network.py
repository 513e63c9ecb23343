"""Hierarchical transformer tracking function and the soft domain classifier.

Per band, a frame-level encoder maps one CSI sample to a length-L feature
(DT branch: 2-D CNN blocks, RIS branch: 3-D CNN blocks, each followed by a
dense block; the two are concatenated and compressed by another dense
block).  The time stamp is encoded with trigonometric features and fused
back to length L.  The sequence encoder runs C blocks of multi-head
self-attention and feed-forward layers with residual normalisation over all
samples of a period, and a two-layer MLP regresses one position per sample.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ConfigError, ScenarioConfig
from .protocol import CsiSample, LabeledExample, MbCsiSequence


@dataclass(frozen=True)
class NetConfig:
    """Network sizes (repository defaults; see README)."""

    L: int = 64
    L_dt: int = 32
    L_ris: int = 64
    L_tm: int = 16
    C: int = 4
    A: int = 4
    K: int = 3
    conv_channels: int = 8
    dt_conv_depth: int = 1
    ris_conv_depth: int = 2
    use_dt: bool = True
    use_ris: bool = True
    bands: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.L % self.A:
            raise ConfigError(f"L={self.L} must be divisible by A={self.A}")
        if self.L_tm % 2:
            raise ConfigError("L_tm must be even")
        if self.K % 2 == 0:
            raise ConfigError("kernel side K must be odd")
        if self.C < 0 or self.L < 2:
            raise ConfigError("need C >= 0 and L >= 2")
        if not (self.use_dt or self.use_ris):
            raise ConfigError("at least one CSI modality must be used")
        if self.bands is not None:
            object.__setattr__(self, "bands", tuple(int(b) for b in self.bands))

    def to_dict(self):
        d = asdict(self)
        d["bands"] = list(self.bands) if self.bands is not None else None
        return d


@dataclass(frozen=True)
class BandDims:
    n_links: int
    n_subcarriers: int
    n_ris: int

    @classmethod
    def from_scenario(cls, sc: ScenarioConfig) -> list["BandDims"]:
        return [cls(b.n_links, b.n_subcarriers, b.n_ris) for b in sc.bands]


# -- input encoding (no trainable parameters) ------------------------------

def complex_channels(H) -> np.ndarray:
    """(|x|, cos angle x, sin angle x) on a new trailing axis; angle 0 := 0."""
    H = np.asarray(H)
    mag = np.abs(H)
    safe = np.where(mag > 0, mag, 1.0)
    cos = np.where(mag > 0, H.real / safe, 1.0)
    sin = np.where(mag > 0, H.imag / safe, 0.0)
    return np.stack([mag, cos, sin], axis=-1)


def encode_complex(H, sample_axes: int = 0) -> np.ndarray:
    """Complex value encoder with max-min normalisation to [-1, 1].

    Normalisation is per sample and per channel; the leading
    ``sample_axes`` axes index samples.  Constant channels map to 0.
    """
    X = complex_channels(H).astype(np.float64)
    red = tuple(range(sample_axes, X.ndim - 1))
    lo = X.min(axis=red, keepdims=True)
    hi = X.max(axis=red, keepdims=True)
    span = hi - lo
    out = np.where(span > 0, 2.0 * (X - lo) / np.where(span > 0, span, 1.0) - 1.0, 0.0)
    return out.astype(np.float32)


def time_encode(t, period_s: float, L_tm: int) -> np.ndarray:
    """Trigonometric time features, d = 1..L_tm (1-based, output column d-1).

    Even d: sin(t / T^(d/L_tm)); odd d: cos(t / T^((d-1)/L_tm)).
    """
    t = np.asarray(t, dtype=float)
    d = np.arange(1, L_tm + 1)
    expo = np.where(d % 2 == 0, d, d - 1) / L_tm
    arg = t[..., None] / period_s ** expo
    return np.where(d % 2 == 0, np.sin(arg), np.cos(arg)).astype(np.float32)


# -- modules ---------------------------------------------------------------------

class Module:
    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.children: dict[str, Module] = {}

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {f"{prefix}{k}": v for k, v in self.params.items()}
        for name, child in self.children.items():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return out

    def _param(self, name, data):
        t = Tensor(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)
        self.params[name] = t
        return t


class Dense(Module):
    """ReLU(W x + b) (``activation=None`` gives the linear layer)."""

    def __init__(self, rng, n_in, n_out, activation="relu"):
        super().__init__()
        std = np.sqrt(2.0 / n_in) if activation == "relu" else np.sqrt(1.0 / n_in)
        self.W = self._param("W", rng.normal(0, std, (n_in, n_out)))
        self.b = self._param("b", np.zeros(n_out))
        self.activation = activation

    def __call__(self, x):
        y = ad.dense(x, self.W, self.b)
        return ad.relu(y) if self.activation == "relu" else y


class ConvBlock(Module):
    """conv -> ReLU -> normalisation -> 2x average pooling (first two spatial axes)."""

    def __init__(self, rng, n_spatial, c_in, c_out, k):
        super().__init__()
        fan_in = k ** n_spatial * c_in
        self.kernel = self._param("kernel", rng.normal(0, np.sqrt(2.0 / fan_in), (k,) * n_spatial + (c_in, c_out)))
        self.bias = self._param("bias", np.zeros(c_out))
        self.n_spatial = n_spatial

    def __call__(self, x):
        y = ad.relu(ad.conv(x, self.kernel, self.bias))
        y = ad.layer_norm(y, axes=tuple(range(1, y.ndim)))
        return ad.avgpool(y, 2)


def _pooled(shape, depth):
    shape = list(shape)
    for _ in range(depth):
        for i in range(min(2, len(shape))):
            if shape[i] >= 2:
                shape[i] //= 2
    return shape


class FrameEncoder(Module):
    """psi_CSI(psi_DT(H_dt) ++ psi_RIS(H_ris)) for one band."""

    def __init__(self, rng, dims: BandDims, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.conv_channels
        width = 0
        if cfg.use_dt:
            self.dt_convs = []
            c = 3
            for i in range(cfg.dt_conv_depth):
                blk = ConvBlock(rng, 2, c, ch, cfg.K)
                self.children[f"dt_conv{i}"] = blk
                self.dt_convs.append(blk)
                c = ch
            flat = int(np.prod(_pooled((dims.n_links, dims.n_subcarriers), cfg.dt_conv_depth))) * c
            self.dt_dense = self.children.setdefault("dt_dense", Dense(rng, flat, cfg.L_dt))
            width += cfg.L_dt
        if cfg.use_ris:
            self.ris_convs = []
            c = 3
            for i in range(cfg.ris_conv_depth):
                blk = ConvBlock(rng, 3, c, ch, cfg.K)
                self.children[f"ris_conv{i}"] = blk
                self.ris_convs.append(blk)
                c = ch
            flat = int(np.prod(_pooled((dims.n_links, dims.n_subcarriers, dims.n_ris), cfg.ris_conv_depth))) * c
            self.ris_dense = self.children.setdefault("ris_dense", Dense(rng, flat, cfg.L_ris))
            width += cfg.L_ris
        self.csi_dense = self.children.setdefault("csi_dense", Dense(rng, width, cfg.L))

    def __call__(self, x_dt, x_ris) -> Tensor:
        parts = []
        if self.cfg.use_dt:
            y = x_dt
            for blk in self.dt_convs:
                y = blk(y)
            parts.append(self.dt_dense(ad.reshape(y, (y.shape[0], -1))))
        if self.cfg.use_ris:
            y = x_ris
            for blk in self.ris_convs:
                y = blk(y)
            parts.append(self.ris_dense(ad.reshape(y, (y.shape[0], -1))))
        z = parts[0] if len(parts) == 1 else ad.concat(parts, axis=-1)
        return self.csi_dense(z)


class MHSA(Module):
    """Columns split into A heads; each head is softmax(QK^T / sqrt(dh)) V."""

    def __init__(self, rng, L, A):
        super().__init__()
        dh = L // A
        self.A, self.dh = A, dh
        for name in ("Wq", "Wk", "Wv"):
            self._param(name, rng.normal(0, np.sqrt(1.0 / dh), (A, dh, dh)))

    def scores(self, X: Tensor, mask: np.ndarray) -> Tensor:
        B, N, _ = X.shape
        Xh = ad.transpose(ad.reshape(X, (B, N, self.A, self.dh)), (0, 2, 1, 3))
        Q = ad.matmul(Xh, self.params["Wq"])
        K = ad.matmul(Xh, self.params["Wk"])
        S = ad.matmul(Q, ad.transpose(K, (0, 1, 3, 2))) * (1.0 / np.sqrt(self.dh))
        return ad.softmax(S, axis=-1, mask=mask[:, None, None, :]), Xh

    def __call__(self, X: Tensor, mask: np.ndarray) -> Tensor:
        B, N, L = X.shape
        P, Xh = self.scores(X, mask)
        V = ad.matmul(Xh, self.params["Wv"])
        O = ad.matmul(P, V)
        return ad.reshape(ad.transpose(O, (0, 2, 1, 3)), (B, N, L))


class SequenceEncoder(Module):
    """C x [MHSA -> add & norm -> FF -> add & norm]."""

    def __init__(self, rng, L, A, C):
        super().__init__()
        self.blocks = []
        for c in range(C):
            att = MHSA(rng, L, A)
            ff = Dense(rng, L, L)
            self.children[f"mhsa{c}"] = att
            self.children[f"ff{c}"] = ff
            self.blocks.append((att, ff))

    def __call__(self, X: Tensor, mask: np.ndarray) -> Tensor:
        if X.shape[1] == 0:
            return X
        for att, ff in self.blocks:
            X = ad.layer_norm(X + att(X, mask), axes=-1)
            X = ad.layer_norm(X + ff(X), axes=-1)
        return X


class Regressor(Module):
    """Dense block L -> L/2, then a linear layer L/2 -> n_out."""

    def __init__(self, rng, L, n_out):
        super().__init__()
        self.hidden = self.children.setdefault("hidden", Dense(rng, L, L // 2))
        self.out = self.children.setdefault("out", Dense(rng, L // 2, n_out, activation=None))

    def __call__(self, y):
        return self.out(self.hidden(y))


# -- batching ----------------------------------------------------------------------

@dataclass(eq=False)
class EncodedPeriod:
    """Network-ready arrays for one period (only the bands the net uses)."""

    dt: dict[int, np.ndarray]
    ris: dict[int, np.ndarray]
    tm: dict[int, np.ndarray]
    times: np.ndarray
    bands: np.ndarray
    truth: np.ndarray | None
    has_truth_eval: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.times)


def encode_period(seq: MbCsiSequence, bands: tuple[int, ...], period_s: float, L_tm: int,
                  truth: np.ndarray | None = None) -> EncodedPeriod:
    keep = [i for i, s in enumerate(seq.samples) if s.band in bands]
    samples = [seq.samples[i] for i in keep]
    dt, ris, tm = {}, {}, {}
    for b in bands:
        sel = [s for s in samples if s.band == b]
        if sel:
            dt[b] = encode_complex(np.stack([s.dt_csi for s in sel]), sample_axes=1)
            ris[b] = encode_complex(np.stack([s.ris_csi for s in sel]), sample_axes=1)
            tm[b] = time_encode(np.array([s.t for s in sel]), period_s, L_tm)
    times = np.array([s.t for s in samples], dtype=float)
    tr = None if truth is None else np.asarray(truth, dtype=float)[keep]
    return EncodedPeriod(dt, ris, tm, times, np.array([s.band for s in samples], dtype=int), tr)


@dataclass(eq=False)
class Batch:
    dt: dict[int, np.ndarray]
    ris: dict[int, np.ndarray]
    tm: dict[int, np.ndarray]
    index: np.ndarray      # (B, N) rows into the band-concatenated feature matrix, -1 = pad
    mask: np.ndarray       # (B, N) valid rows
    truth: np.ndarray | None  # (B, N, 3), zeros on padding

    @property
    def n_periods(self):
        return self.mask.shape[0]


def make_batch(periods: list[EncodedPeriod], bands: tuple[int, ...], with_truth: bool = False) -> Batch:
    dt, ris, tm = {}, {}, {}
    offsets, start = {}, 0
    for b in bands:
        chunks = [p for p in periods if b in p.dt]
        if chunks:
            dt[b] = np.concatenate([p.dt[b] for p in chunks])
            ris[b] = np.concatenate([p.ris[b] for p in chunks])
            tm[b] = np.concatenate([p.tm[b] for p in chunks])
            offsets[b] = start
            start += len(dt[b])
    n_max = max(len(p) for p in periods)
    index = -np.ones((len(periods), n_max), dtype=np.int64)
    cursor = dict(offsets)
    for i, p in enumerate(periods):
        for j, b in enumerate(p.bands):
            index[i, j] = cursor[b]
            cursor[b] += 1
    mask = index >= 0
    truth = None
    if with_truth:
        truth = np.zeros((len(periods), n_max, 3), dtype=np.float32)
        for i, p in enumerate(periods):
            truth[i, :len(p)] = p.truth
    return Batch(dt, ris, tm, index, mask, truth)


# -- the full network --------------------------------------------------------------

class TrackingNetwork(Module):
    """Feature encoder h, regressors xi (target) / xi' (source) and classifier zeta."""

    def __init__(self, dims: list[BandDims], cfg: NetConfig, roi_low, roi_high, period_s: float, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.dims = list(dims)
        self.bands = tuple(range(len(dims))) if cfg.bands is None else tuple(cfg.bands)
        if not self.bands or any(b >= len(dims) or b < 0 for b in self.bands):
            raise ConfigError(f"invalid band selection {cfg.bands}")
        self.period_s = float(period_s)
        self.roi_low = np.asarray(roi_low, dtype=np.float32)
        self.roi_high = np.asarray(roi_high, dtype=np.float32)
        self.frame = {}
        self.fuse = {}
        for b in self.bands:
            self.frame[b] = self.children.setdefault(f"h.frame{b}", FrameEncoder(rng, dims[b], cfg))
            self.fuse[b] = self.children.setdefault(f"h.time{b}", Dense(rng, cfg.L + cfg.L_tm, cfg.L))
        self.chi = self.children.setdefault("h.chi", SequenceEncoder(rng, cfg.L, cfg.A, cfg.C))
        self.xi = self.children.setdefault("xi", Regressor(rng, cfg.L, 3))
        self.xi_src = self.children.setdefault("xi_src", Regressor(rng, cfg.L, 3))
        self.zeta = self.children.setdefault("zeta", Regressor(rng, cfg.L, 1))

    @classmethod
    def for_scenario(cls, sc: ScenarioConfig, cfg: NetConfig, seed: int = 0) -> "TrackingNetwork":
        return cls(BandDims.from_scenario(sc), cfg, sc.roi.low, sc.roi.high, sc.period_s, seed)

    # parameter groups
    def group(self, name: str) -> dict[str, Tensor]:
        allp = self.named_parameters()
        prefix = {"h": "h.", "xi": "xi.", "xi_src": "xi_src.", "zeta": "zeta."}[name]
        return {k: v for k, v in allp.items() if k.startswith(prefix)}

    def frame_group(self, band: int) -> dict[str, Tensor]:
        return self.children[f"h.frame{band}"].named_parameters(f"h.frame{band}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if strict and missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for k, v in state.items():
            if k in params:
                if params[k].shape != np.shape(v):
                    raise ad.ShapeError(f"load {k}", params[k].shape, np.shape(v))
                params[k].data = np.array(v, dtype=np.float32)

    def clone(self) -> "TrackingNetwork":
        return copy.deepcopy(self)

    # forward pieces
    def encode(self, ex_or_seq, truth=None) -> EncodedPeriod:
        if isinstance(ex_or_seq, LabeledExample):
            truth = ex_or_seq.truth if truth is None else truth
            ex_or_seq = ex_or_seq.sequence
        return encode_period(ex_or_seq, self.bands, self.period_s, self.cfg.L_tm, truth)

    def frame_encode(self, band: int, x_dt, x_ris) -> Tensor:
        """x_CSI for a stack of encoded samples of ``band``."""
        return self.frame[band](x_dt, x_ris)

    def fuse_time(self, band: int, x_csi: Tensor, x_tm) -> Tensor:
        return self.fuse[band](ad.concat([x_csi, Tensor(x_tm)], axis=-1))

    def features(self, batch: Batch, with_inputs: bool = False):
        """Positional feature vectors Y (B, N, L) for a batch."""
        xs = []
        for b in self.bands:
            if b in batch.dt:
                x_csi = self.frame_encode(b, Tensor(batch.dt[b]), Tensor(batch.ris[b]))
                xs.append(self.fuse_time(b, x_csi, batch.tm[b]))
        X = xs[0] if len(xs) == 1 else ad.concat(xs, axis=0)
        B, N = batch.index.shape
        Xp = ad.reshape(ad.take_rows(X, batch.index.reshape(-1)), (B, N, self.cfg.L))
        Y = self.chi(Xp, batch.mask)
        return (Y, Xp) if with_inputs else Y

    def to_position(self, out: Tensor) -> Tensor:
        """Map regressor outputs (roughly [-1, 1]) onto ROI coordinates."""
        half = (self.roi_high - self.roi_low) / 2.0
        return out * half + (self.roi_low + half)

    def regress(self, Y: Tensor, source_head: bool = False) -> Tensor:
        head = self.xi_src if source_head else self.xi
        return self.to_position(head(Y))

    def domain_logits(self, Y: Tensor) -> Tensor:
        return self.zeta(Y)

    def domain_classify(self, Y: Tensor) -> Tensor:
        return ad.sigmoid(self.zeta(Y))

    def predict(self, sequences, source_head: bool = False, batch_size: int = 64) -> list[np.ndarray]:
        """Estimated positions (|J| x 3) for each sequence, in input order."""
        encoded = [self.encode(s) if not isinstance(s, EncodedPeriod) else s for s in sequences]
        out: list[np.ndarray | None] = [None] * len(encoded)
        live = [i for i, e in enumerate(encoded) if len(e)]
        for i, e in enumerate(encoded):
            if not len(e):
                out[i] = np.zeros((0, 3))
        for s in range(0, len(live), batch_size):
            ids = live[s:s + batch_size]
            batch = make_batch([encoded[i] for i in ids], self.bands)
            P = self.regress(self.features(batch), source_head).data
            for k, i in enumerate(ids):
                out[i] = P[k, :len(encoded[i])].astype(float)
        return out


# -- checkpoints -----------------------------------------------------------------------

def save_network(net: TrackingNetwork, path, meta: dict | None = None) -> None:
    """Parameters plus everything needed to rebuild the network."""
    from .optim import save_checkpoint

    header = {
        "net_config": net.cfg.to_dict(),
        "band_dims": [asdict(d) for d in net.dims],
        "roi_low": net.roi_low.tolist(),
        "roi_high": net.roi_high.tolist(),
        "period_s": net.period_s,
        "user": meta or {},
    }
    save_checkpoint(path, net.state_dict(), header)


def load_network(path) -> tuple[TrackingNetwork, dict]:
    from .optim import CheckpointError, load_checkpoint

    arrays, header = load_checkpoint(path)
    try:
        cfg = NetConfig(**header["net_config"])
        dims = [BandDims(**d) for d in header["band_dims"]]
        net = TrackingNetwork(dims, cfg, header["roi_low"], header["roi_high"], header["period_s"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: not a tracking-network checkpoint ({exc})") from None
    net.load_state_dict(arrays)
    return net, header.get("user", {})
