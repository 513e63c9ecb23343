"""Versioned binary container for simulated datasets.

Layout (little-endian)::

    b"X2TK" | u32 version | u64 header_len | UTF-8 JSON header | records

Each record holds one tracking period: for every CSI sample (in sequence
order) its DT-CSI then RIS-CSI as interleaved f32 (re, im) in row-major
order, then the f64 time stamps, the f64 truth triples when present, and a
u8 flag byte (bit 0 labeled, bit 1 target domain, bit 2 truth present,
bit 3 track clipped to the ROI).  A u32 CRC-32 of the record payload
follows every record.  The header carries the scenario snapshot, band
dimensions, noise levels, seed, split and the record index (byte offset,
length, sample bands and frames).
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .config import ScenarioConfig
from .protocol import CsiSample, Dataset, LabeledExample, MbCsiSequence, NoiseLevels

MAGIC = b"X2TK"
VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")

FLAG_LABELED = 1
FLAG_TARGET = 2
FLAG_TRUTH = 4
FLAG_CLIPPED = 8


class ContainerError(IOError):
    """Malformed, truncated or corrupted dataset file."""


def _complex_bytes(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype=np.complex64)
    return a.view(np.float32).astype("<f4", copy=False).tobytes()


def _encode_record(ex: LabeledExample) -> bytes:
    parts = []
    for s in ex.sequence.samples:
        parts.append(_complex_bytes(s.dt_csi))
        parts.append(_complex_bytes(s.ris_csi))
    parts.append(np.asarray(ex.sequence.times, dtype="<f8").tobytes())
    flags = 0
    if ex.has_truth:
        parts.append(np.asarray(ex.truth, dtype="<f8").tobytes())
        flags |= FLAG_TRUTH
    if ex.labeled:
        flags |= FLAG_LABELED
    if ex.domain == "target":
        flags |= FLAG_TARGET
    if ex.clipped:
        flags |= FLAG_CLIPPED
    parts.append(bytes([flags]))
    return b"".join(parts)


def dumps(ds: Dataset) -> bytes:
    payloads = [_encode_record(ex) for ex in ds.examples]
    index, offset = [], 0
    for ex, payload in zip(ds.examples, payloads):
        index.append({
            "offset": offset,
            "length": len(payload),
            "bands": [s.band for s in ex.sequence.samples],
            "frames": [s.frame for s in ex.sequence.samples],
        })
        offset += len(payload) + 4
    sc = ds.scenario
    header = {
        "scenario": sc.to_dict(),
        "band_dims": [{"n_links": b.n_links, "n_subcarriers": b.n_subcarriers, "n_ris": b.n_ris,
                       "n_frames": b.n_frames(sc.period_s)} for b in sc.bands],
        "noise": ds.noise.to_dict(),
        "seed": ds.seed,
        "domain": ds.domain,
        "labeled_fraction": ds.labeled_fraction,
        "split": [ex.split for ex in ds.examples],
        "records": index,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [_PREAMBLE.pack(MAGIC, VERSION, len(hbytes)), hbytes]
    for payload in payloads:
        out.append(payload)
        out.append(struct.pack("<I", zlib.crc32(payload)))
    return b"".join(out)


def write_dataset(ds: Dataset, path: str | Path) -> None:
    path = Path(path)
    try:
        path.write_bytes(dumps(ds))
    except OSError as exc:
        raise ContainerError(f"cannot write dataset {path}: {exc}") from exc


def _read_complex(buf: memoryview, pos: int, shape) -> tuple[np.ndarray, int]:
    n = int(np.prod(shape))
    arr = np.frombuffer(buf, dtype="<f4", count=2 * n, offset=pos)
    return arr.view(np.complex64).reshape(shape).copy(), pos + 8 * n


def loads(data: bytes, source: str = "<bytes>") -> Dataset:
    try:
        return _loads(data, source)
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise ContainerError(f"{source}: malformed dataset ({type(exc).__name__}: {exc})") from None


def _loads(data: bytes, source: str) -> Dataset:
    if len(data) < _PREAMBLE.size:
        raise ContainerError(f"{source}: truncated preamble")
    magic, version, hlen = _PREAMBLE.unpack_from(data, 0)
    if magic != MAGIC:
        raise ContainerError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"{source}: unsupported version {version}")
    body = _PREAMBLE.size + hlen
    if len(data) < body:
        raise ContainerError(f"{source}: truncated header")
    try:
        header = json.loads(data[_PREAMBLE.size:body].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{source}: corrupt header ({exc})") from None
    scenario = ScenarioConfig.from_dict(header["scenario"])
    noise = NoiseLevels(tuple(header["noise"]["sigma_dt"]), tuple(header["noise"]["sigma_ris"]))
    buf = memoryview(data)
    n_frames = scenario.frames_per_band()
    examples = []
    for rec, split in zip(header["records"], header["split"]):
        start = body + rec["offset"]
        end = start + rec["length"]
        if end + 4 > len(data):
            raise ContainerError(f"{source}: truncated record at byte {start}")
        payload = data[start:end]
        (crc,) = struct.unpack_from("<I", data, end)
        if zlib.crc32(payload) != crc:
            raise ContainerError(f"{source}: checksum mismatch in record at byte {start}")
        pos = start
        shapes = []
        for band in rec["bands"]:
            b = scenario.bands[band]
            shapes.append(((b.n_links, b.n_subcarriers), (b.n_links, b.n_subcarriers, b.n_ris)))
        arrays = []
        for dt_shape, ris_shape in shapes:
            dt, pos = _read_complex(buf, pos, dt_shape)
            ris, pos = _read_complex(buf, pos, ris_shape)
            arrays.append((dt, ris))
        n = len(rec["bands"])
        times = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(float)
        pos += 8 * n
        flags = data[end - 1]
        truth = None
        if flags & FLAG_TRUTH:
            truth = np.frombuffer(buf, dtype="<f8", count=3 * n, offset=pos).reshape(n, 3).astype(float)
            pos += 24 * n
        if pos != end - 1:
            raise ContainerError(f"{source}: record length does not match its contents")
        samples = tuple(CsiSample(t=float(t), dt_csi=dt, ris_csi=ris, band=int(bd), frame=int(fr))
                        for t, (dt, ris), bd, fr in zip(times, arrays, rec["bands"], rec["frames"]))
        masks = []
        for bidx, nf in enumerate(n_frames):
            mask = np.zeros(nf, dtype=bool)
            mask[[fr for bd, fr in zip(rec["bands"], rec["frames"]) if bd == bidx]] = True
            masks.append(mask)
        examples.append(LabeledExample(
            MbCsiSequence(samples, tuple(masks)), truth,
            domain="target" if flags & FLAG_TARGET else "source",
            labeled=bool(flags & FLAG_LABELED), split=split, clipped=bool(flags & FLAG_CLIPPED)))
    return Dataset(scenario=scenario, examples=examples, seed=int(header["seed"]), noise=noise,
                   domain=header["domain"], labeled_fraction=float(header["labeled_fraction"]))


def read_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ContainerError(f"cannot read dataset {path}: {exc}") from exc
    return loads(data, source=str(path))
