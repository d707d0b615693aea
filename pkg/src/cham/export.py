"""Attention map export: plain CSV grids and 8-bit binary PGM (P5)."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _grid(att: np.ndarray) -> np.ndarray:
    att = np.asarray(att, dtype=np.float64)
    if att.ndim == 3:
        if att.shape[2] != 1:
            raise ValueError(f"attention map must have one channel, got shape {att.shape}")
        att = att[..., 0]
    if att.ndim != 2:
        raise ValueError(f"attention map must be 2-D, got shape {att.shape}")
    return att


def write_attention_csv(path, att) -> None:
    """One row per grid row, values comma-separated at full precision."""
    grid = _grid(att)
    text = "".join(",".join(repr(float(v)) for v in row) + "\n" for row in grid)
    Path(path).write_text(text, encoding="utf-8")


def read_attention_csv(path) -> np.ndarray:
    rows = Path(path).read_text(encoding="utf-8").strip().splitlines()
    return np.array([[float(v) for v in row.split(",")] for row in rows])


def quantize(att, scale: str = "minmax") -> np.ndarray:
    """Map an attention grid to uint8.

    ``minmax`` stretches each map to [0, 255] (a constant map becomes 0);
    ``relative`` multiplies by K*K*255 so the uniform level maps to 255 and
    clamps, which keeps maps from different steps comparable.
    """
    grid = _grid(att)
    if scale == "minmax":
        lo, hi = grid.min(), grid.max()
        if hi <= lo:
            return np.zeros(grid.shape, dtype=np.uint8)
        scaled = (grid - lo) / (hi - lo) * 255.0
    elif scale == "relative":
        scaled = grid * grid.size * 255.0
    else:
        raise ValueError(f"unknown scale {scale!r}; expected 'minmax' or 'relative'")
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def write_pgm(path, att, scale: str = "minmax") -> None:
    pixels = quantize(att, scale)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary 8-bit PGM written by :func:`write_pgm`."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported, maxval {maxval}")
    pos += 1  # single whitespace after maxval
    data = raw[pos:]
    if len(data) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes at offset {pos}, got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)
