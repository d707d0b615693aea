"""``key = value`` run configuration files.

Every field of :class:`ChamConfig` and :class:`TrainConfig` may appear once;
``#`` starts a comment; blank lines and surrounding whitespace are ignored.
Unknown keys are errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import ChamConfig
from .optim import TrainConfig


@dataclass
class RunConfig:
    model: ChamConfig = field(default_factory=ChamConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def _field_types(cls):
    defaults = cls()
    return {f.name: type(getattr(defaults, f.name)) for f in fields(cls)}


_MODEL_KEYS = _field_types(ChamConfig)
_TRAIN_KEYS = _field_types(TrainConfig)


def _coerce(key: str, raw: str, kind):
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if kind is int:
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"{key}: expected an integer, got {raw!r}") from None
    if kind is float:
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"{key}: expected a number, got {raw!r}") from None
    return raw


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    model_kw, train_kw = {}, {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in _MODEL_KEYS:
            target, kind = model_kw, _MODEL_KEYS[key]
        elif key in _TRAIN_KEYS:
            target, kind = train_kw, _TRAIN_KEYS[key]
        else:
            raise ValueError(f"{source}:{lineno}: unknown key {key!r}")
        if key in target:
            raise ValueError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            target[key] = _coerce(key, raw, kind)
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: {exc}") from None
    try:
        return RunConfig(ChamConfig(**model_kw), TrainConfig(**train_kw))
    except ValueError as exc:
        raise ValueError(f"{source}: {exc}") from None


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def format_config(cfg: RunConfig) -> str:
    lines = ["# model"]
    lines += [f"{f.name} = {_fmt(getattr(cfg.model, f.name))}" for f in fields(ChamConfig)]
    lines.append("# training")
    lines += [f"{f.name} = {_fmt(getattr(cfg.train, f.name))}" for f in fields(TrainConfig)]
    return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)
