"""CHAMCKPT checkpoint files.

Layout, all little-endian::

    magic        8 bytes  b"CHAMCKPT"
    version      u32      (1)
    config       u32 x 12 grid, feature_channels, n_hidden, a_channels,
                          num_classes, seq_len, skip_stride, kernel_size,
                          head_hidden, g_activation (0 sigmoid, 1 tanh),
                          attention_mode (0 features, 1 hidden),
                          layer2_enabled (0/1)
                 f64      dropout_rate
    iteration    u64
    n_params     u32
    tensors      n_params x tensor, in ChamModel.parameters() order
    has_adam     u32      (0/1)
    [adam_step   u64
     moments     2*n_params x tensor named "adam.m.<param>" then "adam.v.<param>"]

    tensor := name_len u32, UTF-8 name, rank u32, dims u32 x rank, float32 data

Values are stored as float32; a float64 model is rounded on save.
"""

from __future__ import annotations

import io
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .model import ChamConfig, ChamModel
from .optim import AdamState

MAGIC = b"CHAMCKPT"
VERSION = 1
_G_ACT = ("sigmoid", "tanh")
_ATT_MODE = ("features", "hidden")
_CONFIG = struct.Struct("<12Id")


@dataclass
class Checkpoint:
    config: ChamConfig
    params: "OrderedDict[str, np.ndarray]"
    adam: Optional[AdamState] = None
    iteration: int = 0

    @classmethod
    def from_model(cls, model: ChamModel, adam: Optional[AdamState] = None,
                   iteration: int = 0) -> "Checkpoint":
        params = OrderedDict((k, v.copy()) for k, v in model.parameters().items())
        if adam is not None:
            adam = adam.copy()
        return cls(model.config, params, adam, iteration)

    def to_model(self) -> ChamModel:
        return ChamModel.from_parameters(self.config,
                                         OrderedDict((k, v.copy()) for k, v in self.params.items()))


def _pack_config(cfg: ChamConfig) -> bytes:
    return _CONFIG.pack(cfg.grid, cfg.feature_channels, cfg.n_hidden, cfg.a_channels,
                        cfg.num_classes, cfg.seq_len, cfg.skip_stride, cfg.kernel_size,
                        cfg.head_hidden, _G_ACT.index(cfg.g_activation),
                        _ATT_MODE.index(cfg.attention_mode), int(cfg.layer2_enabled),
                        float(cfg.dropout_rate))


def _unpack_config(vals) -> ChamConfig:
    (grid, d, n, a, c, t, s, k, hh, g, am, l2, drop) = vals
    if g >= len(_G_ACT) or am >= len(_ATT_MODE) or l2 > 1:
        raise ValueError(f"corrupt config block: g_activation={g} attention_mode={am} layer2={l2}")
    return ChamConfig(grid=grid, feature_channels=d, n_hidden=n, a_channels=a, num_classes=c,
                      seq_len=t, skip_stride=s, kernel_size=k, head_hidden=hh,
                      g_activation=_G_ACT[g], attention_mode=_ATT_MODE[am],
                      layer2_enabled=bool(l2), dropout_rate=drop)


def _write_tensor(buf, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise ValueError(f"{self.path}: truncated at byte offset {self.pos}: "
                             f"need {n} bytes, {len(self.raw) - self.pos} left")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def tensor(self):
        (n,) = self.unpack("<I")
        name = self.take(n).decode("utf-8")
        (rank,) = self.unpack("<I")
        dims = self.unpack(f"<{rank}I")
        count = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)
        return name, data.reshape(dims)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(_pack_config(ckpt.config))
    buf.write(struct.pack("<Q", ckpt.iteration))
    buf.write(struct.pack("<I", len(ckpt.params)))
    for name, arr in ckpt.params.items():
        _write_tensor(buf, name, arr)
    if ckpt.adam is None:
        buf.write(struct.pack("<I", 0))
    else:
        buf.write(struct.pack("<I", 1))
        buf.write(struct.pack("<Q", ckpt.adam.t))
        for name in ckpt.params:
            _write_tensor(buf, f"adam.m.{name}", ckpt.adam.m[name])
        for name in ckpt.params:
            _write_tensor(buf, f"adam.v.{name}", ckpt.adam.v[name])
    return buf.getvalue()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def parse_checkpoint(raw: bytes, path="<bytes>") -> Checkpoint:
    r = _Reader(raw, path)
    if r.take(8) != MAGIC:
        raise ValueError(f"{path}: bad magic at byte offset 0")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version} at byte offset 8")
    config = _unpack_config(r.unpack(_CONFIG.format))
    (iteration,) = r.unpack("<Q")
    (count,) = r.unpack("<I")
    params = OrderedDict(r.tensor() for _ in range(count))
    (has_adam,) = r.unpack("<I")
    adam = None
    if has_adam:
        (t,) = r.unpack("<Q")
        m = OrderedDict()
        v = OrderedDict()
        for name in params:
            key, arr = r.tensor()
            if key != f"adam.m.{name}":
                raise ValueError(f"{path}: expected adam.m.{name}, found {key}")
            m[name] = arr
        for name in params:
            key, arr = r.tensor()
            if key != f"adam.v.{name}":
                raise ValueError(f"{path}: expected adam.v.{name}, found {key}")
            v[name] = arr
        adam = AdamState(m, v, t)
    if r.pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - r.pos} trailing bytes at offset {r.pos}")
    ckpt = Checkpoint(config, params, adam, iteration)
    ckpt.to_model()  # validates parameter names and shapes
    return ckpt


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes(), path)
