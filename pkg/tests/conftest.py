"""Shared test fixtures and small data builders."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gazefocus.model import GazeSample

settings.register_profile(
    "ci", deadline=None, derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ci")


def unit(vec) -> np.ndarray:
    arr = np.asarray(vec, dtype=np.float64)
    return arr / np.linalg.norm(arr)


def random_units(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    raw = rng.normal(size=(n, dim))
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def walk_gaze(rng: np.random.Generator, length: int, step_px: float = 12.0,
              dt_us: int = 20000, p_invalid: float = 0.0) -> list[GazeSample]:
    """Random-walk gaze stream, optionally salted with invalid samples."""
    xs = np.cumsum(rng.normal(scale=step_px, size=length)) + 640.0
    ys = np.cumsum(rng.normal(scale=step_px, size=length)) + 480.0
    invalid = rng.random(length) < p_invalid
    return [GazeSample(ts_us=i * dt_us, x=float(xs[i]), y=float(ys[i]),
                       valid=not bool(invalid[i]))
            for i in range(length)]


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)
