"""Fixation-to-identity attribution and session attention summaries.

A fixation is attributed by looking at the labeled detections of its mid
frame: first a containing face box, then a containing body region
extrapolated below the face, then the nearest face center within a radius.
Ties always break toward the lower identity label.
"""

from __future__ import annotations

import math
from collections import defaultdict
from typing import Iterable, Mapping, Sequence

from .model import (AttentionConfig, AttentionReport, BBox, Detection, FixationEvent,
                    GenderAttention, IdentityAttention, TimelineRow, ValidationError,
                    _require)
from .fixation import fixation_frame_span


def body_region(face: BBox, widen: float = 1.5, extend: float = 4.0) -> BBox:
    """Torso region implied by a face box: widened and extended downward.

    The region keeps the face's top edge and center, spans ``widen`` times
    the face width and ``1 + extend`` times the face height.
    """
    cx = face.x + face.w / 2.0
    w = face.w * widen
    h = face.h * (1.0 + extend)
    return BBox(x=cx - w / 2.0, y=face.y, w=w, h=h)


def assign_fixation(event: FixationEvent,
                    candidates: Sequence[tuple[BBox, int]],
                    cfg: AttentionConfig = AttentionConfig()) -> int | None:
    """Identity label for a fixation given (face box, label) pairs at its
    mid frame, or None when nothing plausible is in view."""
    px, py = event.cx, event.cy

    def nearest(matching: list[tuple[BBox, int]]) -> int | None:
        best = None
        for box, label in matching:
            bx, by = box.center
            key = (math.hypot(px - bx, py - by), label)
            if best is None or key < best:
                best = key
        return best[1] if best is not None else None

    hit = nearest([(box, label) for box, label in candidates if box.contains(px, py)])
    if hit is not None:
        return hit
    bodies = [(body_region(box, cfg.body_widen, cfg.body_extend), label)
              for box, label in candidates]
    hit = nearest([(body, label) for body, label in bodies if body.contains(px, py)])
    if hit is not None:
        return hit
    best = None
    for box, label in candidates:
        bx, by = box.center
        dist = math.hypot(px - bx, py - by)
        if dist <= cfg.r_max_px and (best is None or (dist, label) < best):
            best = (dist, label)
    return best[1] if best is not None else None


def attribute_fixations(fixations: Sequence[FixationEvent],
                        detections: Sequence[Detection],
                        labels: Sequence[int],
                        fps: float,
                        offset_us: int = 0,
                        frame_count: int | None = None,
                        cfg: AttentionConfig = AttentionConfig()) -> list[FixationEvent]:
    """Return fixations with ``target`` filled from mid-frame detections."""
    _require(len(detections) == len(labels), "detections and labels must align")
    by_frame: dict[int, list[tuple[BBox, int]]] = defaultdict(list)
    for det, label in zip(detections, labels):
        by_frame[det.frame].append((det.bbox, int(label)))
    out = []
    for event in fixations:
        _, _, mid = fixation_frame_span(event, fps, offset_us, frame_count)
        target = assign_fixation(event, by_frame.get(mid, ()), cfg)
        out.append(FixationEvent(
            start_us=event.start_us, end_us=event.end_us, cx=event.cx, cy=event.cy,
            dispersion=event.dispersion, sample_count=event.sample_count,
            target=target, motion_valid=event.motion_valid))
    return out


def gender_majority(score_pairs: Iterable[tuple[float, float] | None]) -> tuple[str, int, int]:
    """Majority gender over per-detection (male, female) score votes.

    Each scored detection votes for its larger score; exact ties abstain.
    Returns (gender, male_votes, female_votes) with gender ``unknown`` when
    the votes tie or nothing voted.
    """
    male = female = 0
    for pair in score_pairs:
        if pair is None:
            continue
        m, f = pair
        if m > f:
            male += 1
        elif f > m:
            female += 1
    if male > female:
        return "male", male, female
    if female > male:
        return "female", male, female
    return "unknown", male, female


def gender_attention(identity_counts: Sequence[tuple[str, int]]) -> list[GenderAttention]:
    """Aggregate assigned fixation counts into male/female/unknown buckets.

    Shares are fractions of the assigned total and are None when no
    fixation was assigned to any identity.
    """
    totals = {"male": 0, "female": 0, "unknown": 0}
    for gender, count in identity_counts:
        _require(gender in totals, f"unknown gender {gender!r}")
        totals[gender] += count
    assigned = sum(totals.values())
    return [GenderAttention(gender=g, fixation_count=totals[g],
                            share=(totals[g] / assigned) if assigned > 0 else None)
            for g in ("male", "female", "unknown")]


def build_attention_map(fixations: Sequence[FixationEvent],
                        detections: Sequence[Detection],
                        labels: Sequence[int],
                        genders: Mapping[int, str],
                        num_students: int,
                        frame_count: int,
                        fps: float,
                        offset_us: int = 0,
                        meta: Mapping[str, object] | None = None) -> AttentionReport:
    """Fold attributed fixations and labeled detections into a session report.

    ``fixations`` must already carry targets; counts, durations and shares
    are per identity, plus an unassigned bucket and per-gender aggregates.
    """
    _require(len(detections) == len(labels), "detections and labels must align")
    visible_frames: dict[int, set[int]] = {k: set() for k in range(num_students)}
    for det, label in zip(detections, labels):
        _require(0 <= int(label) < num_students, f"label {label} out of range")
        visible_frames[int(label)].add(det.frame)

    counts = [0] * num_students
    durations = [0] * num_students
    unassigned = 0
    total = len(fixations)
    total_duration = sum(f.duration_us for f in fixations)
    frame_target: dict[int, tuple[bool, int | None]] = {}
    for event in fixations:
        if event.target is None:
            unassigned += 1
        else:
            _require(event.target < num_students, f"target {event.target} out of range")
            counts[event.target] += 1
            durations[event.target] += event.duration_us
        first, last, _ = fixation_frame_span(event, fps, offset_us, frame_count)
        for frame in range(first, last + 1):
            frame_target.setdefault(frame, (True, event.target))

    identities = []
    for label in range(num_students):
        share = counts[label] / total if total > 0 else None
        dshare = (durations[label] / total_duration) if total_duration > 0 else None
        identities.append(IdentityAttention(
            label=label,
            gender=genders.get(label, "unknown"),
            frames_visible=len(visible_frames[label]),
            fixation_count=counts[label],
            fixation_duration_us=durations[label],
            fixation_share=share,
            duration_share=dshare,
        ))

    timeline = []
    for frame in range(frame_count):
        visible = tuple(sorted(k for k in range(num_students)
                               if frame in visible_frames[k]))
        has_fix, target = frame_target.get(frame, (False, None))
        timeline.append(TimelineRow(frame=frame, visible=visible,
                                    has_fixation=has_fix, target=target))

    return AttentionReport(
        frame_count=frame_count,
        total_fixations=total,
        identities=tuple(identities),
        genders=tuple(gender_attention([(genders.get(k, "unknown"), counts[k])
                                        for k in range(num_students)])),
        unassigned_count=unassigned,
        unassigned_share=(unassigned / total) if total > 0 else None,
        timeline=tuple(timeline),
        meta=dict(meta or {}),
    )


def rank_sessions(reports: Sequence[AttentionReport]) -> list[tuple[str, list[float]]]:
    """Per-session identity shares sorted descending (ties keep lower label).

    Returns (session id from report meta, ranked shares) per report, in the
    order given.  Sessions without fixations rank as all-zero shares.
    """
    _require(len(reports) >= 1, "rank_sessions needs at least one report")
    rows = []
    for idx, report in enumerate(reports):
        session = str(report.meta.get("session", f"session-{idx}"))
        shares = report.identity_shares()
        ranked = [s for s, _ in sorted(((s, i.label) for s, i in
                                        zip(shares, report.identities)),
                                       key=lambda t: (-t[0], t[1]))]
        rows.append((session, ranked))
    return rows
