"""Dispersion-threshold fixation detection over gaze sample streams.

A window grows from a start sample while its dispersion, defined as
(max_x - min_x) + (max_y - min_y), stays within the threshold.  When growth
stops the window becomes a fixation if it lasted at least the minimum
duration, otherwise the start slides forward one sample.  Invalid samples
terminate windows and never join a fixation.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator

from .model import (FixationConfig, FixationEvent, GazeSample, ValidationError,
                    _require, timestamp_frame)


def detect_fixations(samples, dispersion_px: float = 30.0,
                     min_duration_ms: float = 100.0) -> list[FixationEvent]:
    """Detect fixations in a time-ordered gaze stream.

    Events are disjoint and time-ordered; each spans at least the minimum
    duration and keeps the window centroid and final dispersion.
    """
    _require(dispersion_px > 0, "dispersion_px must be > 0")
    _require(min_duration_ms > 0, "min_duration_ms must be > 0")
    min_dur_us = int(round(min_duration_ms * 1000.0))
    samples = list(samples)
    for a, b in zip(samples, samples[1:]):
        _require(b.ts_us > a.ts_us, "gaze samples must be strictly time-ordered")

    events: list[FixationEvent] = []
    ts = [s.ts_us for s in samples]
    xs = [s.x for s in samples]
    ys = [s.y for s in samples]

    # maximal runs of valid samples; windows never bridge invalid gaps
    runs: list[tuple[int, int]] = []
    start = None
    for idx, s in enumerate(samples):
        if s.valid and start is None:
            start = idx
        elif not s.valid and start is not None:
            runs.append((start, idx - 1))
            start = None
    if start is not None:
        runs.append((start, len(samples) - 1))

    for run_start, run_end in runs:
        i = run_start
        while i <= run_end:
            min_x = max_x = xs[i]
            min_y = max_y = ys[i]
            sum_x, sum_y = xs[i], ys[i]
            j = i
            while j < run_end:
                nx, ny = xs[j + 1], ys[j + 1]
                n_min_x, n_max_x = min(min_x, nx), max(max_x, nx)
                n_min_y, n_max_y = min(min_y, ny), max(max_y, ny)
                if (n_max_x - n_min_x) + (n_max_y - n_min_y) > dispersion_px:
                    break
                min_x, max_x, min_y, max_y = n_min_x, n_max_x, n_min_y, n_max_y
                sum_x += nx
                sum_y += ny
                j += 1
            if ts[j] - ts[i] >= min_dur_us:
                count = j - i + 1
                events.append(FixationEvent(
                    start_us=ts[i],
                    end_us=ts[j],
                    cx=sum_x / count,
                    cy=sum_y / count,
                    dispersion=(max_x - min_x) + (max_y - min_y),
                    sample_count=count,
                ))
                i = j + 1
            else:
                i += 1
    return events


class FixationDetector(BaseEstimator):
    """Estimator wrapper around :func:`detect_fixations`."""

    def __init__(self, dispersion_px: float = 30.0, min_duration_ms: float = 100.0):
        self.dispersion_px = dispersion_px
        self.min_duration_ms = min_duration_ms

    @classmethod
    def from_config(cls, cfg: FixationConfig) -> "FixationDetector":
        return cls(dispersion_px=cfg.dispersion_px, min_duration_ms=cfg.min_duration_ms)

    def fit(self, X, y=None) -> "FixationDetector":
        return self

    def transform(self, samples) -> list[FixationEvent]:
        return detect_fixations(samples, self.dispersion_px, self.min_duration_ms)


def fixation_frame_span(event: FixationEvent, fps: float, offset_us: int = 0,
                        frame_count: int | None = None) -> tuple[int, int, int]:
    """Map a fixation to (first, last, mid) video frame indices.

    The mid frame holds the fixation's temporal midpoint.  Frames clamp to
    [0, frame_count); a fixation that ends before the stream offset has no
    frame image and is rejected.
    """
    if event.end_us < offset_us:
        raise ValidationError("fixation lies entirely before the video start offset")
    first = timestamp_frame(event.start_us, fps, offset_us, frame_count)
    last = timestamp_frame(event.end_us, fps, offset_us, frame_count)
    mid = timestamp_frame((event.start_us + event.end_us) // 2, fps, offset_us, frame_count)
    return first, last, mid
