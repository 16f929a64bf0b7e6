"""Plain-text configuration: ``[section]`` headers and ``key = value`` lines."""

from __future__ import annotations

import configparser
import dataclasses
import io
from pathlib import Path

from .arch import DepthRegressorConfig, FanConfig
from .errors import ConfigurationError
from .training import TRAIN_KINDS, TrainConfig, depth_preset, fan_preset, guided_preset


def _parse_value(raw: str, kind: type, key: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(int(v) for v in raw.replace(",", " ").split())
        return raw
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_TYPES = {"int": int, "float": float, "str": str, "bool": bool}


def _field_type(f: dataclasses.Field) -> type:
    t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if t.startswith("tuple"):
        return tuple
    return _TYPES.get(t.split("|")[0].strip(), str)


def _apply(section, cls, base):
    names = {f.name: f for f in dataclasses.fields(cls)}
    changes = {}
    for key, raw in section.items():
        if key not in names or key == "model":
            raise ConfigurationError(f"unknown key {key!r} in [{section.name}]")
        changes[key] = _parse_value(raw, _field_type(names[key]), key)
    return dataclasses.replace(base, **changes)


def parse_config(text: str) -> TrainConfig:
    """Build a TrainConfig from ``[train]`` and ``[model]`` sections.

    Omitted keys take the preset values for the given ``kind``.
    """
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed configuration: {exc}") from None
    unknown = set(cp.sections()) - {"train", "model", "checkpoint"}
    if unknown:
        raise ConfigurationError(f"unknown section(s) {sorted(unknown)}")
    train_sec = cp["train"] if cp.has_section("train") else {}
    kind = train_sec.get("kind", "fan2d").strip() if train_sec else "fan2d"
    if kind not in TRAIN_KINDS:
        raise ConfigurationError(f"unknown training kind {kind!r}")
    base = {"fan2d": fan_preset, "fan3d": fan_preset, "guided": guided_preset, "depth": depth_preset}[kind]()
    model = base.model
    model_sec = cp["model"] if cp.has_section("model") else {}
    if model_sec:
        model = _apply(model_sec, type(model), model)
    if isinstance(model, FanConfig) and "in_channels" not in model_sec:
        # RGB, plus one guide channel per landmark for the guided network
        channels = 3 + model.num_landmarks if kind == "guided" else 3
        model = dataclasses.replace(model, in_channels=channels)
    cfg = dataclasses.replace(base, model=model)
    if cp.has_section("train"):
        cfg = _apply(cp["train"], TrainConfig, cfg)
    cfg.validate()
    return cfg


def load_config(path) -> TrainConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def config_to_text(cfg: TrainConfig, extra: dict[str, dict] | None = None) -> str:
    """Deterministic text form; ``parse_config`` of it returns ``cfg``."""
    cp = configparser.ConfigParser(interpolation=None)
    cp["train"] = {f.name: _format_value(getattr(cfg, f.name))
                   for f in dataclasses.fields(cfg) if f.name != "model"}
    cp["model"] = {f.name: _format_value(getattr(cfg.model, f.name)) for f in dataclasses.fields(cfg.model)}
    for name, values in (extra or {}).items():
        cp[name] = {k: _format_value(v) for k, v in values.items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def section_values(text: str, section: str) -> dict[str, str]:
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(text)
    return dict(cp[section]) if cp.has_section(section) else {}


def model_kind(cfg: TrainConfig) -> str:
    return "depth" if isinstance(cfg.model, DepthRegressorConfig) else "fan"
