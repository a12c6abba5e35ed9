"""Ego-motion estimation from frame pairs and motion validation of fixations.

Flow between consecutive frames is estimated by exhaustive block matching:
the frame interior is tiled with non-overlapping square blocks and each
block's displacement is the SAD-minimizing integer offset within the search
radius.  Low-variance blocks are skipped.  Runs of high-magnitude flow mark
gaze shifts (head turns); fixations whose frame span overlaps a shift are
flagged as motion-invalid.
"""

from __future__ import annotations

import math

import numpy as np

from .model import FixationEvent, FlowSummary, MotionConfig, ValidationError, _require
from .fixation import fixation_frame_span


def _as_gray(frame) -> np.ndarray:
    """Frame as a 2-D array; integer frames keep an exact integer dtype so
    SAD comparisons and ties are free of rounding."""
    arr = np.asarray(frame)
    _require(arr.ndim == 2, "frames must be 2-D grayscale arrays")
    if arr.dtype.kind in "iub":
        return arr.astype(np.int64, copy=False)
    return arr.astype(np.float64, copy=False)


def block_flow(frame_a, frame_b, cfg: MotionConfig = MotionConfig(),
               frame_index: int = 0) -> FlowSummary:
    """Mean block-matching displacement from ``frame_a`` to ``frame_b``.

    Blocks tile the interior so every candidate window stays in bounds;
    SAD ties break on (distance to zero, dy, dx).  Blocks with intensity
    variance below ``cfg.min_variance`` are skipped; if every block is
    skipped the summary reports zero magnitude and orientation.
    """
    a = _as_gray(frame_a)
    b = _as_gray(frame_b)
    _require(a.shape == b.shape, "frame pair must share a shape")
    bs, r = cfg.block_size, cfg.search_radius
    h, w = a.shape
    n_by = (h - 2 * r) // bs
    n_bx = (w - 2 * r) // bs
    _require(n_by >= 1 and n_bx >= 1,
             f"frame {w}x{h} too small for block_size {bs} with search radius {r}")
    y0 = r + ((h - 2 * r) - n_by * bs) // 2
    x0 = r + ((w - 2 * r) - n_bx * bs) // 2

    blocks_a = a[y0:y0 + n_by * bs, x0:x0 + n_bx * bs]
    tiles = blocks_a.reshape(n_by, bs, n_bx, bs)
    variance = tiles.var(axis=(1, 3))
    keep = variance >= cfg.min_variance
    kept = int(keep.sum())
    if kept == 0:
        return FlowSummary(frame=frame_index, mean_magnitude=0.0,
                           mean_orientation=0.0, kept_blocks=0)

    # candidates in tie-break order: nearer displacements first, then dy, dx
    candidates = sorted(((dy, dx) for dy in range(-r, r + 1)
                         for dx in range(-r, r + 1)),
                        key=lambda d: (d[0] * d[0] + d[1] * d[1], d[0], d[1]))
    best_sad = np.full((n_by, n_bx), np.inf)
    best_dy = np.zeros((n_by, n_bx), dtype=np.int64)
    best_dx = np.zeros((n_by, n_bx), dtype=np.int64)
    for dy, dx in candidates:
        shifted = b[y0 + dy:y0 + dy + n_by * bs, x0 + dx:x0 + dx + n_bx * bs]
        sad = np.abs(blocks_a - shifted).reshape(n_by, bs, n_bx, bs).sum(axis=(1, 3))
        better = sad < best_sad
        best_sad[better] = sad[better]
        best_dy[better] = dy
        best_dx[better] = dx

    dys = best_dy[keep].astype(np.float64)
    dxs = best_dx[keep].astype(np.float64)
    if bool(np.all(dys == dys[0])) and bool(np.all(dxs == dxs[0])):
        # uniform field (a pure camera pan): skip the float mean so the
        # magnitude is exactly the per-block magnitude
        magnitude = float(np.hypot(dxs[0], dys[0]))
    else:
        magnitude = float(np.mean(np.hypot(dxs, dys)))
    sum_dy, sum_dx = float(dys.sum()), float(dxs.sum())
    if sum_dy == 0.0 and sum_dx == 0.0:
        orientation = 0.0
    else:
        orientation = math.atan2(sum_dy, sum_dx)
        if orientation == -math.pi:
            orientation = math.pi
    return FlowSummary(frame=frame_index, mean_magnitude=magnitude,
                       mean_orientation=orientation, kept_blocks=kept)


def flow_sequence(frames, cfg: MotionConfig = MotionConfig(), jobs: int = 1) -> list[FlowSummary]:
    """Flow summaries for every consecutive frame pair, in frame order."""
    frames = list(frames)
    _require(len(frames) >= 2, "flow_sequence needs at least 2 frames")
    pairs = list(enumerate(zip(frames, frames[1:])))
    if jobs <= 1:
        return [block_flow(a, b, cfg, idx) for idx, (a, b) in pairs]
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda p: block_flow(p[1][0], p[1][1], cfg, p[0]), pairs))


def detect_gaze_shifts(flows, threshold_px: float = 4.0) -> list[tuple[int, int]]:
    """Maximal runs of consecutive flow frames at or above the threshold.

    Returns inclusive (first, last) flow-frame intervals.
    """
    _require(threshold_px > 0, "threshold_px must be > 0")
    intervals: list[tuple[int, int]] = []
    run_start: int | None = None
    prev_frame: int | None = None
    for flow in flows:
        if prev_frame is not None:
            _require(flow.frame > prev_frame, "flows must be frame-ordered")
        moving = flow.mean_magnitude >= threshold_px
        contiguous = prev_frame is not None and flow.frame == prev_frame + 1
        if moving:
            if run_start is None or not contiguous:
                if run_start is not None:
                    intervals.append((run_start, prev_frame))
                run_start = flow.frame
        else:
            if run_start is not None:
                intervals.append((run_start, prev_frame))
                run_start = None
        prev_frame = flow.frame
    if run_start is not None:
        intervals.append((run_start, prev_frame))
    return intervals


def validate_fixations(fixations, shift_intervals, fps: float, offset_us: int = 0,
                       frame_count: int | None = None) -> list[FixationEvent]:
    """Mark each fixation motion-valid iff its frame span overlaps no shift.

    A shift interval [s, e] covers frame pairs (s, s+1) .. (e, e+1), so a
    fixation overlaps it when its span touches any frame in [s, e + 1].
    """
    out = []
    for event in fixations:
        first, last, _ = fixation_frame_span(event, fps, offset_us, frame_count)
        valid = True
        for s, e in shift_intervals:
            if first <= e + 1 and last >= s:
                valid = False
                break
        out.append(FixationEvent(
            start_us=event.start_us, end_us=event.end_us, cx=event.cx, cy=event.cy,
            dispersion=event.dispersion, sample_count=event.sample_count,
            target=event.target, motion_valid=valid))
    return out
