"""Convolutional LSTM cell with a soft spatial attention input stage.

One step of the attention cell:

    a      = tanh(W_ha * h_prev + W_xa * F + b_a)        (1x1 convolutions)
    l      = softmax over the grid of (W_z * a)
    x      = l . F                                       (map broadcast over channels)
    i,f,o  = sigmoid(W_x? * x + W_h? * h_prev + b_?)
    g      = g_act(W_xc * x + W_hc * h_prev + b_c)
    c      = f . c_prev + i . g
    h      = o . tanh(c)

The raw frame features F feed the attention logits because x is only
defined after the map exists. ``attention_mode="hidden"`` drops the W_xa term.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .tensor import (
    ConvKernel,
    activation,
    activation_grad,
    as_tensor3,
    broadcast_mul,
    col2im,
    conv2d_backward,
    conv2d_same,
    im2col,
    sigmoid,
    softmax_grid,
    softmax_grid_backward,
)

GATES = ("i", "f", "o", "c")
ATTENTION_MODES = ("features", "hidden")


def glorot_uniform(rng: np.random.Generator, shape: tuple, dtype) -> np.ndarray:
    kh, kw, cin, cout = shape
    limit = np.sqrt(6.0 / (kh * kw * cin + kh * kw * cout))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class _ParamGroup:
    """Mixin giving a dataclass of arrays an ordered name -> array view."""

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((f.name, getattr(self, f.name)) for f in fields(self))

    def copy(self):
        return type(self)(**{k: v.copy() for k, v in self.arrays().items()})


@dataclass
class ConvLSTMParams(_ParamGroup):
    w_xi: np.ndarray
    w_hi: np.ndarray
    w_xf: np.ndarray
    w_hf: np.ndarray
    w_xo: np.ndarray
    w_ho: np.ndarray
    w_xc: np.ndarray
    w_hc: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_o: np.ndarray
    b_c: np.ndarray

    def __post_init__(self):
        n = self.n_hidden
        cin = self.w_xi.shape[2]
        for g in GATES:
            wx, wh, b = getattr(self, f"w_x{g}"), getattr(self, f"w_h{g}"), getattr(self, f"b_{g}")
            if wx.ndim != 4 or wx.shape[2:] != (cin, n):
                raise ValueError(f"w_x{g} has shape {wx.shape}, expected (kh, kw, {cin}, {n})")
            if wh.ndim != 4 or wh.shape[2:] != (n, n):
                raise ValueError(f"w_h{g} has shape {wh.shape}, expected (kh, kw, {n}, {n})")
            if b.shape != (n,):
                raise ValueError(f"b_{g} has shape {b.shape}, expected ({n},)")
            ConvKernel(wx)
            ConvKernel(wh)

    @property
    def n_hidden(self) -> int:
        return self.w_xi.shape[3]

    @property
    def in_channels(self) -> int:
        return self.w_xi.shape[2]

    @classmethod
    def init(cls, rng, in_channels, n_hidden, kernel_size=3, dtype=np.float32,
             forget_bias=1.0) -> "ConvLSTMParams":
        k = kernel_size
        kw = {}
        for g in GATES:
            kw[f"w_x{g}"] = glorot_uniform(rng, (k, k, in_channels, n_hidden), dtype)
            kw[f"w_h{g}"] = glorot_uniform(rng, (k, k, n_hidden, n_hidden), dtype)
        for g in GATES:
            kw[f"b_{g}"] = np.zeros(n_hidden, dtype=dtype)
        kw["b_f"][:] = forget_bias
        return cls(**kw)

    @classmethod
    def zeros(cls, in_channels, n_hidden, kernel_size=3, dtype=np.float64) -> "ConvLSTMParams":
        k = kernel_size
        kw = {}
        for g in GATES:
            kw[f"w_x{g}"] = np.zeros((k, k, in_channels, n_hidden), dtype=dtype)
            kw[f"w_h{g}"] = np.zeros((k, k, n_hidden, n_hidden), dtype=dtype)
        for g in GATES:
            kw[f"b_{g}"] = np.zeros(n_hidden, dtype=dtype)
        return cls(**kw)

    def stacked(self):
        """Gate kernels fused along out_channels in (i, f, o, c) order."""
        wx = np.concatenate([getattr(self, f"w_x{g}") for g in GATES], axis=3)
        wh = np.concatenate([getattr(self, f"w_h{g}") for g in GATES], axis=3)
        b = np.concatenate([getattr(self, f"b_{g}") for g in GATES])
        return wx, wh, b

    @classmethod
    def from_stacked(cls, wx, wh, b) -> "ConvLSTMParams":
        n = b.shape[0] // 4
        kw = {}
        for j, g in enumerate(GATES):
            sl = slice(j * n, (j + 1) * n)
            kw[f"w_x{g}"] = wx[..., sl].copy()
            kw[f"w_h{g}"] = wh[..., sl].copy()
            kw[f"b_{g}"] = b[sl].copy()
        return cls(**kw)


@dataclass
class AttentionParams(_ParamGroup):
    w_ha: np.ndarray  # (1, 1, n_hidden, a_channels)
    w_xa: np.ndarray  # (1, 1, feature_channels, a_channels)
    b_a: np.ndarray  # (a_channels,)
    w_z: np.ndarray  # (1, 1, a_channels, 1)

    def __post_init__(self):
        for name in ("w_ha", "w_xa", "w_z"):
            w = getattr(self, name)
            if w.ndim != 4 or w.shape[:2] != (1, 1):
                raise ValueError(f"{name} must be a 1x1 kernel, got shape {w.shape}")
        a = self.w_ha.shape[3]
        if self.w_xa.shape[3] != a or self.b_a.shape != (a,) or self.w_z.shape[2:] != (a, 1):
            raise ValueError(
                f"inconsistent attention shapes: w_ha {self.w_ha.shape}, w_xa {self.w_xa.shape}, "
                f"b_a {self.b_a.shape}, w_z {self.w_z.shape}"
            )

    @classmethod
    def init(cls, rng, n_hidden, feature_channels, a_channels, dtype=np.float32):
        return cls(
            w_ha=glorot_uniform(rng, (1, 1, n_hidden, a_channels), dtype),
            w_xa=glorot_uniform(rng, (1, 1, feature_channels, a_channels), dtype),
            b_a=np.zeros(a_channels, dtype=dtype),
            w_z=glorot_uniform(rng, (1, 1, a_channels, 1), dtype),
        )

    @classmethod
    def zeros(cls, n_hidden, feature_channels, a_channels, dtype=np.float64):
        return cls(
            w_ha=np.zeros((1, 1, n_hidden, a_channels), dtype=dtype),
            w_xa=np.zeros((1, 1, feature_channels, a_channels), dtype=dtype),
            b_a=np.zeros(a_channels, dtype=dtype),
            w_z=np.zeros((1, 1, a_channels, 1), dtype=dtype),
        )


@dataclass
class CellState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, grid: int, n_hidden: int, dtype=np.float64) -> "CellState":
        return cls(np.zeros((grid, grid, n_hidden), dtype=dtype),
                   np.zeros((grid, grid, n_hidden), dtype=dtype))


@dataclass
class StepCache:
    x: np.ndarray  # input actually fed to the gates
    h_prev: np.ndarray
    c_prev: np.ndarray
    gates_pre: np.ndarray  # (K, K, 4n) pre-activations in (i, f, o, c) order
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    g: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray
    g_activation: str
    # attention-only entries
    features: Optional[np.ndarray] = None
    att_hidden: Optional[np.ndarray] = None  # tanh(W_ha*h + W_xa*F + b_a)
    logits: Optional[np.ndarray] = None
    l: Optional[np.ndarray] = None
    attention_mode: str = "features"


def attention_map(f_t, h_prev, p: AttentionParams, attention_mode: str = "features"):
    """Return ``(l_t, logits, att_hidden)``; ``l_t`` is a (K, K, 1) distribution."""
    f_t = as_tensor3(f_t, "features")
    h_prev = as_tensor3(h_prev, "h_prev")
    if f_t.shape[:2] != h_prev.shape[:2]:
        raise ValueError(f"spatial mismatch: features {f_t.shape} vs h_prev {h_prev.shape}")
    if attention_mode not in ATTENTION_MODES:
        raise ValueError(f"unknown attention_mode {attention_mode!r}")
    pre = conv2d_same(h_prev, ConvKernel(p.w_ha, p.b_a))
    if attention_mode == "features":
        pre = pre + conv2d_same(f_t, ConvKernel(p.w_xa), add_bias=False)
    att_hidden = np.tanh(pre)
    logits = conv2d_same(att_hidden, ConvKernel(p.w_z), add_bias=False)
    return softmax_grid(logits), logits, att_hidden


def apply_attention(f_t, l_t):
    return broadcast_mul(l_t, f_t)


def cell_step(x_t, prev: CellState, p: ConvLSTMParams, g_activation: str = "sigmoid"):
    """Advance the cell one step. Returns ``(next_state, cache)``."""
    x_t = as_tensor3(x_t, "x_t")
    n = p.n_hidden
    if x_t.shape[2] != p.in_channels:
        raise ValueError(
            f"x_t shape {x_t.shape} does not match input-to-state kernels {p.w_xi.shape}"
        )
    if prev.h.shape != x_t.shape[:2] + (n,) or prev.c.shape != prev.h.shape:
        raise ValueError(
            f"state shapes h {prev.h.shape}, c {prev.c.shape} do not match "
            f"{x_t.shape[:2] + (n,)}"
        )
    wx, wh, b = p.stacked()
    pre = conv2d_same(x_t, ConvKernel(wx, b)) + conv2d_same(prev.h, ConvKernel(wh), add_bias=False)
    ifo = sigmoid(pre[..., : 3 * n])
    i, f, o = ifo[..., :n], ifo[..., n:2 * n], ifo[..., 2 * n:]
    g = activation(pre[..., 3 * n:], g_activation)
    c = f * prev.c + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    cache = StepCache(x=x_t, h_prev=prev.h, c_prev=prev.c, gates_pre=pre,
                      i=i, f=f, o=o, g=g, c=c, tanh_c=tanh_c, g_activation=g_activation)
    return CellState(h, c), cache


def attention_cell_step(f_t, prev: CellState, p: ConvLSTMParams, ap: AttentionParams,
                        g_activation: str = "sigmoid", attention_mode: str = "features"):
    """Attention stage followed by :func:`cell_step` on the weighted features."""
    l_t, logits, att_hidden = attention_map(f_t, prev.h, ap, attention_mode)
    x_t = apply_attention(f_t, l_t)
    state, cache = cell_step(x_t, prev, p, g_activation)
    cache.features = f_t
    cache.att_hidden = att_hidden
    cache.logits = logits
    cache.l = l_t
    cache.attention_mode = attention_mode
    return state, cache


def _cell_backward_stacked(cache: StepCache, wx, wh, grad_h, grad_c):
    """Adjoint of the gate/state update with fused gate kernels.

    Returns ``(grad_wx, grad_wh, grad_b, grad_x, grad_h_prev, grad_c_prev)``.
    """
    kh, kw = wx.shape[:2]
    dc = grad_c + grad_h * cache.o * (1 - cache.tanh_c * cache.tanh_c)
    do = grad_h * cache.tanh_c
    di = dc * cache.g
    df = dc * cache.c_prev
    dg = dc * cache.i
    grad_c_prev = dc * cache.f
    dpre = np.concatenate([
        di * cache.i * (1 - cache.i),
        df * cache.f * (1 - cache.f),
        do * cache.o * (1 - cache.o),
        dg * activation_grad(cache.g, cache.g_activation),
    ], axis=2)
    hh, ww, c4 = dpre.shape
    d2 = dpre.reshape(hh * ww, c4)
    cols_x = im2col(cache.x, kh, kw)
    cols_h = im2col(cache.h_prev, kh, kw)
    grad_wx = (cols_x.T @ d2).reshape(wx.shape)
    grad_wh = (cols_h.T @ d2).reshape(wh.shape)
    grad_b = d2.sum(axis=0)
    grad_x = col2im(d2 @ wx.reshape(-1, c4).T, cache.x.shape, kh, kw)
    grad_h_prev = col2im(d2 @ wh.reshape(-1, c4).T, cache.h_prev.shape, kh, kw)
    return grad_wx, grad_wh, grad_b, grad_x, grad_h_prev, grad_c_prev


def _attention_backward(cache: StepCache, ap: AttentionParams, grad_x):
    """Adjoint of attention + weighting. Returns ``(grads dict, grad_F, grad_h_prev)``."""
    feats, l_t = cache.features, cache.l
    grad_f = grad_x * l_t
    grad_l = np.sum(grad_x * feats, axis=2, keepdims=True)
    grad_logits = softmax_grid_backward(l_t, grad_l)
    grad_a, grad_wz, _ = conv2d_backward(cache.att_hidden, ConvKernel(ap.w_z), grad_logits)
    grad_pre = grad_a * (1 - cache.att_hidden * cache.att_hidden)
    grad_h, grad_wha, grad_ba = conv2d_backward(cache.h_prev, ConvKernel(ap.w_ha), grad_pre)
    if cache.attention_mode == "features":
        gf, grad_wxa, _ = conv2d_backward(feats, ConvKernel(ap.w_xa), grad_pre)
        grad_f = grad_f + gf
    else:
        grad_wxa = np.zeros_like(ap.w_xa)
    grads = AttentionParams(w_ha=grad_wha, w_xa=grad_wxa, b_a=grad_ba, w_z=grad_wz)
    return grads, grad_f, grad_h


def step_backward(cache: StepCache, p: ConvLSTMParams, ap: Optional[AttentionParams],
                  grad_h, grad_c):
    """Reverse-mode pass through one step.

    Returns ``(grad_params, grad_attention_params, grad_input, grad_h_prev,
    grad_c_prev)``. ``grad_input`` is taken w.r.t. the raw frame features when
    the step ran attention, otherwise w.r.t. the gate input ``x``;
    ``grad_attention_params`` is None for plain steps.
    """
    if grad_h.shape != cache.c.shape or grad_c.shape != cache.c.shape:
        raise ValueError(
            f"gradient shapes {grad_h.shape}, {grad_c.shape} do not match state {cache.c.shape}"
        )
    wx, wh, _ = p.stacked()
    gwx, gwh, gb, gx, gh, gc = _cell_backward_stacked(cache, wx, wh, grad_h, grad_c)
    grad_params = ConvLSTMParams.from_stacked(gwx, gwh, gb)
    if cache.l is None:
        return grad_params, None, gx, gh, gc
    if ap is None:
        raise ValueError("cache holds an attention step but no AttentionParams were given")
    grad_ap, grad_f, gh_att = _attention_backward(cache, ap, gx)
    return grad_params, grad_ap, grad_f, gh + gh_att, gc
