"""Single-layer Conv-Attention and two-layer hierarchical CHAM models.

Layer 1 (attention cell) runs on every frame. Layer 2 is a plain ConvLSTM
that reads layer-1's hidden state every ``skip_stride`` frames. At each
aligned step the spatially pooled hidden states of both layers are
concatenated and passed through dropout. An affine head maps the result to a
class distribution, and sequence prediction averages those distributions.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field, fields
from typing import List, Optional

import numpy as np

from .cell import (
    ATTENTION_MODES,
    AttentionParams,
    CellState,
    ConvLSTMParams,
    StepCache,
    _attention_backward,
    _cell_backward_stacked,
    attention_cell_step,
    cell_step,
)
from .tensor import global_avg_pool, global_avg_pool_backward

PROB_CLIP = 1e-12


@dataclass
class ChamConfig:
    grid: int = 7
    feature_channels: int = 16
    n_hidden: int = 32
    a_channels: int = 32
    num_classes: int = 3
    seq_len: int = 12
    skip_stride: int = 2
    g_activation: str = "sigmoid"
    dropout_rate: float = 0.5
    layer2_enabled: bool = True
    kernel_size: int = 3
    attention_mode: str = "features"
    head_hidden: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("grid", "feature_channels", "n_hidden", "a_channels", "num_classes",
                     "seq_len", "skip_stride"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be a positive odd number, got {self.kernel_size}")
        if self.head_hidden < 0:
            raise ValueError(f"head_hidden must be >= 0, got {self.head_hidden}")
        if self.g_activation not in ("sigmoid", "tanh"):
            raise ValueError(f"g_activation must be 'sigmoid' or 'tanh', got {self.g_activation!r}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"attention_mode must be one of {ATTENTION_MODES}, "
                             f"got {self.attention_mode!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.layer2_enabled and self.seq_len < self.skip_stride:
            raise ValueError(
                f"seq_len {self.seq_len} shorter than skip_stride {self.skip_stride}: "
                "no aligned steps"
            )

    @property
    def aligned_steps(self) -> int:
        """Number of head evaluations per sequence."""
        if self.layer2_enabled:
            return self.seq_len // self.skip_stride
        return self.seq_len

    @property
    def head_in(self) -> int:
        return 2 * self.n_hidden if self.layer2_enabled else self.n_hidden

    def replace(self, **changes) -> "ChamConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return ChamConfig(**values)


@dataclass
class HeadParams:
    weight: np.ndarray  # (C, width of last hidden)
    bias: np.ndarray  # (C,)
    hidden_weight: Optional[np.ndarray] = None  # (head_hidden, head_in)
    hidden_bias: Optional[np.ndarray] = None

    def arrays(self):
        out = OrderedDict()
        if self.hidden_weight is not None:
            out["hidden_weight"] = self.hidden_weight
            out["hidden_bias"] = self.hidden_bias
        out["weight"] = self.weight
        out["bias"] = self.bias
        return out


def _dense_init(rng, n_out, n_in, dtype):
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_out, n_in)).astype(dtype)


class ChamModel:
    """Parameters of a (possibly single-layer) CHAM network."""

    def __init__(self, config: ChamConfig, layer1: ConvLSTMParams, attention: AttentionParams,
                 layer2: Optional[ConvLSTMParams], head: HeadParams):
        self.config = config
        self.layer1 = layer1
        self.attention = attention
        self.layer2 = layer2
        self.head = head
        self._check()

    def _check(self):
        cfg = self.config
        if self.layer1.in_channels != cfg.feature_channels or self.layer1.n_hidden != cfg.n_hidden:
            raise ValueError("layer1 kernels do not match config")
        if (self.layer2 is None) == cfg.layer2_enabled:
            raise ValueError("layer2 presence does not match config.layer2_enabled")
        if self.layer2 is not None and self.layer2.in_channels != cfg.n_hidden:
            raise ValueError("layer2 input channels must equal n_hidden")
        width = cfg.head_hidden or cfg.head_in
        if self.head.weight.shape != (cfg.num_classes, width):
            raise ValueError(f"head weight shape {self.head.weight.shape} != "
                             f"{(cfg.num_classes, width)}")
        if cfg.head_hidden and self.head.hidden_weight.shape != (cfg.head_hidden, cfg.head_in):
            raise ValueError("head hidden layer shape does not match config")

    @property
    def dtype(self):
        return self.layer1.w_xi.dtype

    @classmethod
    def init(cls, config: ChamConfig, seed: int = 0, dtype=np.float32) -> "ChamModel":
        rng = np.random.default_rng(seed)
        cfg = config
        layer1 = ConvLSTMParams.init(rng, cfg.feature_channels, cfg.n_hidden, cfg.kernel_size, dtype)
        attention = AttentionParams.init(rng, cfg.n_hidden, cfg.feature_channels, cfg.a_channels,
                                         dtype)
        layer2 = None
        if cfg.layer2_enabled:
            layer2 = ConvLSTMParams.init(rng, cfg.n_hidden, cfg.n_hidden, cfg.kernel_size, dtype)
        if cfg.head_hidden:
            head = HeadParams(
                weight=_dense_init(rng, cfg.num_classes, cfg.head_hidden, dtype),
                bias=np.zeros(cfg.num_classes, dtype=dtype),
                hidden_weight=_dense_init(rng, cfg.head_hidden, cfg.head_in, dtype),
                hidden_bias=np.zeros(cfg.head_hidden, dtype=dtype),
            )
        else:
            head = HeadParams(weight=_dense_init(rng, cfg.num_classes, cfg.head_in, dtype),
                              bias=np.zeros(cfg.num_classes, dtype=dtype))
        return cls(cfg, layer1, attention, layer2, head)

    @classmethod
    def zeros(cls, config: ChamConfig, dtype=np.float64) -> "ChamModel":
        model = cls.init(config, 0, dtype)
        for arr in model.parameters().values():
            arr[...] = 0
        return model

    def parameters(self) -> "OrderedDict[str, np.ndarray]":
        """Every parameter array, in the fixed order used by checkpoints."""
        out = OrderedDict()
        for k, v in self.layer1.arrays().items():
            out[f"layer1.{k}"] = v
        for k, v in self.attention.arrays().items():
            out[f"attention.{k}"] = v
        if self.layer2 is not None:
            for k, v in self.layer2.arrays().items():
                out[f"layer2.{k}"] = v
        for k, v in self.head.arrays().items():
            out[f"head.{k}"] = v
        return out

    def copy(self) -> "ChamModel":
        return ChamModel.from_parameters(self.config,
                                         {k: v.copy() for k, v in self.parameters().items()})

    @classmethod
    def from_parameters(cls, config: ChamConfig, params) -> "ChamModel":
        def group(prefix):
            return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}

        expected = list(cls.init(config, 0, np.float32).parameters())
        missing = [k for k in expected if k not in params]
        extra = [k for k in params if k not in expected]
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        layer2 = ConvLSTMParams(**group("layer2.")) if config.layer2_enabled else None
        return cls(config, ConvLSTMParams(**group("layer1.")), AttentionParams(**group("attention.")),
                   layer2, HeadParams(**group("head.")))


@dataclass
class HeadRecord:
    frame: int  # 1-based frame index whose layer-1 state feeds the head
    inputs: np.ndarray  # concatenated pooled features, before dropout
    mask: Optional[np.ndarray]  # inverted-dropout multiplier, None when inactive
    hidden: Optional[np.ndarray]
    logits: np.ndarray
    probs: np.ndarray


@dataclass
class ForwardTrace:
    layer1: List[StepCache] = field(default_factory=list)
    layer2: List[StepCache] = field(default_factory=list)
    head: List[HeadRecord] = field(default_factory=list)
    mode: str = "eval"

    @property
    def attention_maps(self) -> List[np.ndarray]:
        return [c.l for c in self.layer1]

    @property
    def probabilities(self) -> np.ndarray:
        return np.stack([r.probs for r in self.head])


def _softmax_vec(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def _frames_array(model: ChamModel, frames) -> np.ndarray:
    arr = np.asarray(getattr(frames, "frames", frames))
    cfg = model.config
    expected = (cfg.seq_len, cfg.grid, cfg.grid, cfg.feature_channels)
    if arr.shape != expected:
        raise ValueError(f"frame array shape {arr.shape} does not match config {expected}")
    return arr.astype(model.dtype, copy=False)


def _dropout_rng(mode: str, seed):
    if mode == "train":
        return np.random.default_rng(seed)
    if mode == "eval":
        return None
    raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def _head_forward(model: ChamModel, frame: int, inputs, rng) -> HeadRecord:
    rate = model.config.dropout_rate
    mask = None
    z = inputs
    if rng is not None and rate > 0:
        keep = 1.0 - rate
        mask = ((rng.random(inputs.shape) >= rate) / keep).astype(inputs.dtype)
        z = inputs * mask
    hidden = None
    if model.head.hidden_weight is not None:
        hidden = np.tanh(model.head.hidden_weight @ z + model.head.hidden_bias)
        z = hidden
    logits = model.head.weight @ z + model.head.bias
    return HeadRecord(frame, inputs, mask, hidden, logits, _softmax_vec(logits))


def forward_sequence(model: ChamModel, frames, mode: str = "eval",
                     seed: Optional[int] = None) -> ForwardTrace:
    """Unroll the model over a sequence. ``seed`` drives dropout in train mode."""
    cfg = model.config
    arr = _frames_array(model, frames)
    rng = _dropout_rng(mode, seed)
    trace = ForwardTrace(mode=mode)
    s1 = CellState.zeros(cfg.grid, cfg.n_hidden, model.dtype)
    s2 = CellState.zeros(cfg.grid, cfg.n_hidden, model.dtype)
    n_aligned = cfg.aligned_steps
    for t in range(1, cfg.seq_len + 1):
        s1, cache = attention_cell_step(arr[t - 1], s1, model.layer1, model.attention,
                                        cfg.g_activation, cfg.attention_mode)
        trace.layer1.append(cache)
        if not cfg.layer2_enabled:
            trace.head.append(_head_forward(model, t, global_avg_pool(s1.h), rng))
        elif t % cfg.skip_stride == 0 and t // cfg.skip_stride <= n_aligned:
            s2, cache2 = cell_step(s1.h, s2, model.layer2, cfg.g_activation)
            trace.layer2.append(cache2)
            inputs = np.concatenate([global_avg_pool(s1.h), global_avg_pool(s2.h)])
            trace.head.append(_head_forward(model, t, inputs, rng))
    return trace


def conv_attention_forward(model: ChamModel, frames, mode: str = "eval",
                           seed: Optional[int] = None) -> ForwardTrace:
    """Standalone single-layer Conv-Attention unroll (no hierarchy, head every frame)."""
    if model.layer2 is not None:
        raise ValueError("Conv-Attention path requires a model without layer 2")
    cfg = model.config
    arr = _frames_array(model, frames)
    rng = _dropout_rng(mode, seed)
    trace = ForwardTrace(mode=mode)
    state = CellState.zeros(cfg.grid, cfg.n_hidden, model.dtype)
    for t in range(cfg.seq_len):
        state, cache = attention_cell_step(arr[t], state, model.layer1, model.attention,
                                           cfg.g_activation, cfg.attention_mode)
        trace.layer1.append(cache)
        trace.head.append(_head_forward(model, t + 1, global_avg_pool(state.h), rng))
    return trace


def _check_label(trace: ForwardTrace, label: int) -> int:
    n_classes = trace.head[0].probs.shape[0]
    if not 0 <= int(label) < n_classes:
        raise ValueError(f"label {label} out of range for {n_classes} classes")
    return int(label)


def sequence_loss(trace: ForwardTrace, label: int) -> float:
    """Cross-entropy summed over the head's aligned steps."""
    label = _check_label(trace, label)
    return float(-sum(np.log(np.clip(r.probs[label], PROB_CLIP, 1.0)) for r in trace.head))


def predict(trace: ForwardTrace):
    """Temporal average of per-step probabilities; ties go to the lowest index."""
    if not trace.head:
        raise ValueError("trace has no head outputs")
    probs = trace.probabilities.mean(axis=0)
    return int(np.argmax(probs)), probs


def export_attention(trace: ForwardTrace, t: int) -> np.ndarray:
    """Attention map of frame ``t`` (1-based)."""
    if not 1 <= t <= len(trace.layer1):
        raise IndexError(f"step {t} out of range 1..{len(trace.layer1)}")
    return trace.layer1[t - 1].l


def backward_sequence(model: ChamModel, trace: ForwardTrace, label: int):
    """Gradient of :func:`sequence_loss` w.r.t. every parameter (BPTT).

    Returns an ordered dict keyed like :meth:`ChamModel.parameters`.
    """
    cfg = model.config
    label = _check_label(trace, label)
    if len(trace.layer1) != cfg.seq_len or len(trace.head) != cfg.aligned_steps \
            or len(trace.layer2) != (cfg.aligned_steps if cfg.layer2_enabled else 0):
        raise ValueError("trace does not match the model configuration")
    if trace.head[0].probs.shape[0] != cfg.num_classes:
        raise ValueError("trace class count does not match the model")
    dtype = model.dtype
    n = cfg.n_hidden
    shape = (cfg.grid, cfg.grid, n)
    head = model.head
    g_head = OrderedDict((k, np.zeros_like(v)) for k, v in head.arrays().items())

    # Gradients injected into hidden states by the head, keyed by 1-based frame.
    inject1 = {}
    inject2 = []
    for rec in trace.head:
        dlogits = rec.probs.copy()
        if rec.probs[label] >= PROB_CLIP:
            dlogits[label] -= 1.0
        else:
            dlogits[:] = 0
        z = rec.inputs if rec.mask is None else rec.inputs * rec.mask
        if rec.hidden is not None:
            g_head["weight"] += np.outer(dlogits, rec.hidden)
            g_head["bias"] += dlogits
            dz = (head.weight.T @ dlogits) * (1 - rec.hidden * rec.hidden)
            g_head["hidden_weight"] += np.outer(dz, z)
            g_head["hidden_bias"] += dz
            dz = head.hidden_weight.T @ dz
        else:
            g_head["weight"] += np.outer(dlogits, z)
            g_head["bias"] += dlogits
            dz = head.weight.T @ dlogits
        if rec.mask is not None:
            dz = dz * rec.mask
        inject1[rec.frame] = global_avg_pool_backward(dz[:n], shape)
        if cfg.layer2_enabled:
            inject2.append(global_avg_pool_backward(dz[n:], shape))

    out = OrderedDict()

    if cfg.layer2_enabled:
        wx2, wh2, _ = model.layer2.stacked()
        acc2 = [np.zeros_like(wx2), np.zeros_like(wh2), np.zeros(4 * n, dtype=dtype)]
        dh = np.zeros(shape, dtype=dtype)
        dc = np.zeros(shape, dtype=dtype)
        for k in range(len(trace.layer2) - 1, -1, -1):
            cache = trace.layer2[k]
            gwx, gwh, gb, gx, dh, dc = _cell_backward_stacked(cache, wx2, wh2,
                                                              dh + inject2[k], dc)
            acc2[0] += gwx
            acc2[1] += gwh
            acc2[2] += gb
            frame = trace.head[k].frame
            inject1[frame] = inject1[frame] + gx
        grads2 = ConvLSTMParams.from_stacked(*acc2).arrays()

    wx1, wh1, _ = model.layer1.stacked()
    acc1 = [np.zeros_like(wx1), np.zeros_like(wh1), np.zeros(4 * n, dtype=dtype)]
    g_att = OrderedDict((k, np.zeros_like(v)) for k, v in model.attention.arrays().items())
    dh = np.zeros(shape, dtype=dtype)
    dc = np.zeros(shape, dtype=dtype)
    for t in range(len(trace.layer1), 0, -1):
        cache = trace.layer1[t - 1]
        if t in inject1:
            dh = dh + inject1[t]
        gwx, gwh, gb, gx, dh_cell, dc = _cell_backward_stacked(cache, wx1, wh1, dh, dc)
        acc1[0] += gwx
        acc1[1] += gwh
        acc1[2] += gb
        ga, _, dh_att = _attention_backward(cache, model.attention, gx)
        for k, v in ga.arrays().items():
            g_att[k] += v
        dh = dh_cell + dh_att

    for k, v in ConvLSTMParams.from_stacked(*acc1).arrays().items():
        out[f"layer1.{k}"] = v
    for k, v in g_att.items():
        out[f"attention.{k}"] = v
    if cfg.layer2_enabled:
        for k, v in grads2.items():
            out[f"layer2.{k}"] = v
    for k, v in g_head.items():
        out[f"head.{k}"] = v
    return out
