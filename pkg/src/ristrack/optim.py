"""Adam optimiser and the binary parameter checkpoint format."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {"step": np.array([self.step], dtype=np.float32)}
        out.update({f"m/{k}": a for k, a in self.m.items()})
        out.update({f"v/{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "AdamState":
        st = cls(step=int(arrays["step"][0]))
        for key, a in arrays.items():
            if key.startswith("m/"):
                st.m[key[2:]] = np.array(a)
            elif key.startswith("v/"):
                st.v[key[2:]] = np.array(a)
        return st


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns the new parameter arrays.

    ``lr`` is a float or a per-name mapping.  Names without a gradient are
    returned unchanged.  ``state`` is updated in place.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        rate = lr[name] if isinstance(lr, Mapping) else lr
        out[name] = (p - rate * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return out


class Adam:
    """Adam over a name -> Tensor mapping, updating ``Tensor.data`` between steps."""

    def __init__(self, params: Mapping[str, Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 lr_overrides: Mapping[str, float] | None = None):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.lr_overrides = dict(lr_overrides or {})
        self.state = AdamState()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        rates = {k: self.lr_overrides.get(k, self.lr) for k in self.params}
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        new = adam_step({k: p.data for k, p in self.params.items()}, grads, self.state,
                        rates, self.beta1, self.beta2, self.eps)
        for k, p in self.params.items():
            p.data = new[k]


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"X2CK"
CKPT_VERSION = 1
_PRE = struct.Struct("<4sIQ")


class CheckpointError(IOError):
    pass


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``name -> f32 array`` plus a JSON ``meta`` block.

    Layout: magic | u32 version | u64 header_len | JSON header (meta and the
    name/shape/offset table) | f32 payload | u32 CRC-32 of the payload.
    """
    table, chunks, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f4")
        table.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    payload = b"".join(chunks)
    header = json.dumps({"meta": meta or {}, "tensors": table}, sort_keys=True).encode("utf-8")
    try:
        Path(path).write_bytes(_PRE.pack(CKPT_MAGIC, CKPT_VERSION, len(header)) + header + payload
                               + struct.pack("<I", zlib.crc32(payload)))
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < _PRE.size:
        raise CheckpointError(f"{path}: truncated")
    magic, version, hlen = _PRE.unpack_from(data)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise CheckpointError(f"{path}: not a version-{CKPT_VERSION} checkpoint")
    start = _PRE.size + hlen
    if len(data) < start + 4:
        raise CheckpointError(f"{path}: truncated")
    header = json.loads(data[_PRE.size:start].decode("utf-8"))
    payload = data[start:-4]
    if zlib.crc32(payload) != struct.unpack("<I", data[-4:])[0]:
        raise CheckpointError(f"{path}: checksum mismatch")
    arrays = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"]))
        if entry["offset"] + 4 * n > len(payload):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past the payload")
        arrays[entry["name"]] = np.frombuffer(payload, dtype="<f4", count=n,
                                              offset=entry["offset"]).reshape(entry["shape"]).astype(np.float32)
    return arrays, header["meta"]
