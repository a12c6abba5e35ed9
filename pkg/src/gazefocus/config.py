"""Flat key=value session configuration files.

Keys are dotted paths into :class:`~gazefocus.model.SessionConfig`
(``linking.theta_high=0.6``).  Blank lines and ``#`` comments are ignored.
CLI ``--set`` overrides use the same syntax and win over the file.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Iterable, Mapping

from .model import (AttentionConfig, ClassifierConfig, ConfigError, FixationConfig,
                    LinkingConfig, MotionConfig, SessionConfig, ValidationError)


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_optional_float(raw: str) -> float | None:
    if raw.strip().lower() in ("none", ""):
        return None
    return float(raw)


# key -> (section attr or None, field name, parser)
_KEYS: dict[str, tuple[str | None, str, object]] = {
    "num_students": (None, "num_students", int),
    "embedding_dim": (None, "embedding_dim", int),
    "fps": (None, "fps", float),
    "frame_width": (None, "frame_width", int),
    "frame_height": (None, "frame_height", int),
    "gaze_offset_us": (None, "gaze_offset_us", int),
    "linking.theta_high": ("linking", "theta_high", float),
    "linking.theta_margin": ("linking", "theta_margin", float),
    "linking.max_gap": ("linking", "max_gap", int),
    "linking.sigma_loc": ("linking", "sigma_loc", float),
    "classifier.strategy": ("classifier", "strategy", str),
    "classifier.svm_c": ("classifier", "svm_c", float),
    "classifier.svm_gamma": ("classifier", "svm_gamma", _parse_optional_float),
    "classifier.svm_tol": ("classifier", "svm_tol", float),
    "fixation.dispersion_px": ("fixation", "dispersion_px", float),
    "fixation.min_duration_ms": ("fixation", "min_duration_ms", float),
    "attention.body_widen": ("attention", "body_widen", float),
    "attention.body_extend": ("attention", "body_extend", float),
    "attention.r_max_px": ("attention", "r_max_px", float),
    "motion.block_size": ("motion", "block_size", int),
    "motion.search_radius": ("motion", "search_radius", int),
    "motion.min_variance": ("motion", "min_variance", float),
    "motion.shift_magnitude_px": ("motion", "shift_magnitude_px", float),
}

_SECTIONS = {
    "linking": LinkingConfig,
    "classifier": ClassifierConfig,
    "fixation": FixationConfig,
    "attention": AttentionConfig,
    "motion": MotionConfig,
}


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines into a raw string mapping."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def build_config(values: Mapping[str, str]) -> SessionConfig:
    """Build a validated SessionConfig from raw string values over defaults."""
    plain: dict[str, object] = {}
    sections: dict[str, dict[str, object]] = {name: {} for name in _SECTIONS}
    for key, raw in values.items():
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        section, fname, parser = _KEYS[key]
        try:
            value = parser(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
        if section is None:
            plain[fname] = value
        else:
            sections[section][fname] = value
    try:
        for name, cls in _SECTIONS.items():
            if sections[name]:
                plain[name] = cls(**sections[name])
        return SessionConfig(**plain)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: Path | None, overrides: Iterable[str] = ()) -> SessionConfig:
    """Load a config file (optional) and apply ``key=value`` overrides."""
    values: dict[str, str] = {}
    if path is not None:
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_config_text(path.read_text()))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, _, value = item.partition("=")
        values[key.strip()] = value.strip()
    return build_config(values)


def config_to_flat(cfg: SessionConfig) -> dict[str, object]:
    """Flatten a SessionConfig to the dotted-key mapping, sorted by key."""
    flat: dict[str, object] = {}
    for key, (section, fname, _) in _KEYS.items():
        obj = cfg if section is None else getattr(cfg, section)
        flat[key] = getattr(obj, fname)
    return dict(sorted(flat.items()))


def serialize_config(cfg: SessionConfig) -> str:
    """Render a fully resolved config as deterministic key=value text."""
    lines = []
    for key, value in config_to_flat(cfg).items():
        if value is None:
            value = "none"
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
