"""Deterministic synthetic session generator.

Sessions are generated from a script by a counter-based SplitMix64 stream,
so equal scripts give byte-identical bundles on any platform.  A classroom
is K seated identities with well-separated unit appearance vectors; the
teacher's gaze alternates between student faces and a board area following
a segment schedule, and per-frame face detections appear with scripted
visibility probabilities, bounded appearance noise and box jitter.

Head-turn scripts additionally emit small textured frames whose integer
camera pan during each turn is recorded as ground truth for the motion
stage.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import serialize_config
from .ingest import DetectionSet, render_detections, render_gaze, render_pgm
from .model import (BBox, Detection, GazeSample, SessionConfig, ValidationError,
                    _require, detection_sort_key, frame_timestamp_us, timestamp_frame)

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


class SplitMix64:
    """Counter-based SplitMix64 stream.

    Output k (1-based) is ``mix(seed + k * golden)`` with the standard
    SplitMix64 finalizer; uniform doubles take the top 53 bits.  Being a
    pure function of (seed, counter), draws can be produced in vectorized
    batches without changing the stream.
    """

    def __init__(self, seed: int):
        self.seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self.counter = 0

    def u64(self, n: int) -> np.ndarray:
        ks = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        z = self.seed + ks * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))

    def floats(self, n: int) -> np.ndarray:
        """n uniforms in [0, 1)."""
        return (self.u64(n) >> np.uint64(11)) * 2.0 ** -53

    def f01(self) -> float:
        return float(self.floats(1)[0])

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.f01()

    def weighted_choice(self, weights: Sequence[float]) -> int:
        """Index drawn proportionally to non-negative weights (one draw)."""
        total = float(sum(weights))
        _require(total > 0, "weights must have positive mass")
        u = self.f01() * total
        acc = 0.0
        for idx, w in enumerate(weights):
            acc += w
            if u < acc:
                return idx
        return len(weights) - 1


@dataclass(frozen=True)
class ScheduleSpec:
    """Gaze segment schedule parameters.

    ``alternate`` strictly alternates weighted student plateaus with stable
    board holds; ``counts`` plays a shuffled multiset of student targets
    with no board and no adjacent repeats; ``turns`` alternates two student
    plateaus with fixed gaze holds during which the camera pans.
    """

    mode: str = "alternate"
    student_min_s: float = 5.0
    student_max_s: float = 10.0
    board_min_s: float = 3.0
    board_max_s: float = 8.0
    target_weights: tuple[float, ...] | None = None
    target_counts: tuple[int, ...] | None = None
    plateau_s: float = 3.0
    turn_hold_s: float = 0.72
    turn_pad_frames: int = 3
    turn_step: tuple[int, int] = (6, -2)

    def __post_init__(self):
        _require(self.mode in ("alternate", "counts", "turns"),
                 f"unknown schedule mode {self.mode!r}")


@dataclass(frozen=True)
class SynthScript:
    """Full specification of one synthetic session."""

    seed: int
    duration_s: float
    fps: float = 25.0
    gaze_rate_hz: float = 50.0
    num_students: int = 4
    embedding_dim: int = 32
    frame_width: int = 1280
    frame_height: int = 960
    seats: tuple[BBox, ...] = ()
    genders: tuple[str, ...] = ()
    min_pair_angle_deg: float = 60.0
    embedding_noise_deg: float = 15.0
    bbox_jitter_px: float = 3.0
    gaze_jitter_px: float = 4.0
    p_attended: float = 1.0
    p_other: float = 0.02
    p_board: float = 0.02
    gender_flip_p: float = 0.2
    invalid_p: float = 0.0
    ramp_ms: float = 30.0
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    blur: tuple[tuple[float, float, float], ...] = ()
    emit_frames: bool = False

    def __post_init__(self):
        _require(self.duration_s > 0, "duration_s must be > 0")
        _require(len(self.seats) == self.num_students,
                 "need one seat box per student")
        _require(len(self.genders) == self.num_students,
                 "need one gender per student")
        _require(0 < self.min_pair_angle_deg < 180, "min_pair_angle_deg out of range")
        _require(0 <= self.embedding_noise_deg < 90, "embedding_noise_deg out of range")
        for p in (self.p_attended, self.p_other, self.p_board,
                  self.gender_flip_p, self.invalid_p):
            _require(0.0 <= p <= 1.0, "probabilities must lie in [0, 1]")


@dataclass(frozen=True)
class Segment:
    """One schedule segment.  ``target`` is an identity for student
    segments, None for board and turn segments."""

    start_us: int
    end_us: int
    kind: str                      # student | board | turn
    target: int | None
    anchor: tuple[float, float]
    fixation_expected: bool


@dataclass
class GroundTruth:
    """Everything the generator knows that the pipeline must recover."""

    identities: tuple[int, ...]
    genders: tuple[str, ...]
    identity_vectors: np.ndarray
    segments: tuple[Segment, ...]
    expected_shares: dict[str, float] | None
    shift_frames: tuple[tuple[int, int], ...]


@dataclass
class GeneratedSession:
    script: SynthScript
    config: SessionConfig
    detections: DetectionSet
    gaze: tuple[GazeSample, ...]
    truth: GroundTruth
    frames: list[np.ndarray] | None


def _round6(v: float) -> float:
    return round(float(v), 6)


def _draw_identity_vectors(rng: SplitMix64, k: int, dim: int,
                           min_angle_deg: float) -> np.ndarray:
    """Rejection-sample k unit vectors with pairwise angle >= min_angle_deg."""
    min_cos = math.cos(math.radians(min_angle_deg))
    vectors: list[np.ndarray] = []
    attempts = 0
    while len(vectors) < k:
        attempts += 1
        if attempts > 10_000:
            raise ValidationError(
                f"could not place {k} identity vectors with pairwise angle "
                f">= {min_angle_deg} degrees in {dim} dimensions")
        v = 2.0 * rng.floats(dim) - 1.0
        norm = float(np.linalg.norm(v))
        if norm < 1e-9:
            continue
        v = v / norm
        if all(float(np.dot(v, u)) <= min_cos for u in vectors):
            vectors.append(v)
    return np.stack(vectors)


def _noisy_embedding(rng: SplitMix64, base: np.ndarray, max_angle_rad: float) -> np.ndarray:
    """Rotate ``base`` by a uniform angle in [0, max_angle_rad] toward a
    uniformly drawn tangent direction."""
    if max_angle_rad <= 0:
        return base.copy()
    dim = base.size
    while True:
        raw = 2.0 * rng.floats(dim) - 1.0
        tangent = raw - float(np.dot(raw, base)) * base
        norm = float(np.linalg.norm(tangent))
        if norm >= 1e-9:
            tangent = tangent / norm
            break
    angle = rng.f01() * max_angle_rad
    out = math.cos(angle) * base + math.sin(angle) * tangent
    return out / float(np.linalg.norm(out))


def _build_schedule(rng: SplitMix64, script: SynthScript) -> tuple[list[dict], float]:
    """Draw the segment plan: list of {kind, dur_s, target, anchor} plus the
    final session duration (counts mode derives it from the drawn segments)."""
    spec = script.schedule
    seats = script.seats
    centers = [s.center for s in seats]
    board_region = (0.2 * script.frame_width, 0.8 * script.frame_width,
                    0.05 * script.frame_height, 0.15 * script.frame_height)
    plan: list[dict] = []

    if spec.mode == "alternate":
        if spec.target_weights is not None:
            weights = list(spec.target_weights)
        else:
            ws = rng.floats(script.num_students)
            weights = [float(w) * float(w) + 0.05 for w in ws]
        t = 0.0
        kind = "student"
        while t < script.duration_s - 1.0:
            if kind == "student":
                dur = rng.uniform(spec.student_min_s, spec.student_max_s)
                target = rng.weighted_choice(weights)
                plan.append({"kind": "student", "dur": dur, "target": target,
                             "anchor": centers[target]})
                kind = "board"
            else:
                dur = rng.uniform(spec.board_min_s, spec.board_max_s)
                bx = rng.uniform(board_region[0], board_region[1])
                by = rng.uniform(board_region[2], board_region[3])
                plan.append({"kind": "board", "dur": dur, "target": None,
                             "anchor": (bx, by)})
                kind = "student"
            t += plan[-1]["dur"]
        # clamp the final segment to the session end; the loop bound keeps
        # it longer than 1 s, so it still carries a fixation
        plan[-1]["dur"] -= t - script.duration_s
        return plan, script.duration_s

    if spec.mode == "counts":
        _require(spec.target_counts is not None
                 and len(spec.target_counts) == script.num_students,
                 "counts mode needs target_counts per student")
        remaining = list(spec.target_counts)
        prev = None

        def playable(idx: int) -> bool:
            # choosing idx must leave a multiset that still admits some
            # no-adjacent-repeat arrangement whose first element is not idx:
            # max(rest) <= ceil(n/2) and rest[idx] <= floor(n/2)
            if idx == prev or remaining[idx] == 0:
                return False
            rest = remaining.copy()
            rest[idx] -= 1
            n = sum(rest)
            return max(rest) <= (n + 1) // 2 and rest[idx] <= n // 2

        while sum(remaining) > 0:
            weights = [c if playable(k) else 0 for k, c in enumerate(remaining)]
            if sum(weights) == 0:
                weights = remaining[:]   # multiset admits no repeat-free order
            target = rng.weighted_choice(weights)
            remaining[target] -= 1
            dur = rng.uniform(3.0, 6.0)
            plan.append({"kind": "student", "dur": dur, "target": target,
                         "anchor": centers[target]})
            prev = target
        return plan, sum(p["dur"] for p in plan)

    # turns: plateau A, hold, plateau B, hold, ...
    _require(script.num_students >= 2, "turns mode needs at least 2 students")
    hold_anchor = ((centers[0][0] + centers[1][0]) / 2.0,
                   min(centers[0][1], centers[1][1]) - 28.0)
    t = 0.0
    which = 0
    while True:
        plan.append({"kind": "student", "dur": spec.plateau_s, "target": which,
                     "anchor": centers[which]})
        t += spec.plateau_s
        if t + spec.turn_hold_s + spec.plateau_s > script.duration_s:
            break
        plan.append({"kind": "turn", "dur": spec.turn_hold_s, "target": None,
                     "anchor": hold_anchor})
        t += spec.turn_hold_s
        which = 1 - which
    plan[-1]["dur"] += max(0.0, script.duration_s - t)
    return plan, script.duration_s


def _finalize_segments(plan: list[dict], duration_s: float) -> tuple[Segment, ...]:
    segments = []
    t = 0.0
    for item in plan:
        start_us = int(round(t * 1e6))
        t += item["dur"]
        end_us = int(round(t * 1e6))
        segments.append(Segment(
            start_us=start_us, end_us=end_us, kind=item["kind"],
            target=item["target"], anchor=item["anchor"],
            fixation_expected=item["kind"] != "turn",
        ))
    return tuple(segments)


def _camera_offsets(script: SynthScript, segments: tuple[Segment, ...],
                    frame_count: int) -> tuple[np.ndarray, tuple[tuple[int, int], ...]]:
    """Per-frame integer camera offsets and the flow-frame shift intervals."""
    spec = script.schedule
    offsets = np.zeros((frame_count, 2), dtype=np.int64)
    step = np.array(spec.turn_step, dtype=np.int64)
    intervals: list[tuple[int, int]] = []
    delta = np.zeros((frame_count, 2), dtype=np.int64)
    direction = 1
    for seg in segments:
        if seg.kind != "turn":
            continue
        f_start = timestamp_frame(seg.start_us, script.fps, 0, frame_count)
        f_end = timestamp_frame(seg.end_us - 1, script.fps, 0, frame_count)
        p0 = f_start + spec.turn_pad_frames
        p1 = f_end - spec.turn_pad_frames          # pan over flow frames [p0, p1)
        if p1 <= p0:
            continue
        delta[p0:p1] += direction * step
        intervals.append((p0, p1 - 1))
        direction = -direction
    offsets[1:] = np.cumsum(delta[:-1], axis=0)
    return offsets, tuple(intervals)


def generate_session(script: SynthScript) -> GeneratedSession:
    """Generate a full session bundle from a script, deterministically."""
    rng = SplitMix64(script.seed)
    fps = script.fps
    k = script.num_students
    dim = script.embedding_dim

    identity_vectors = _draw_identity_vectors(rng, k, dim, script.min_pair_angle_deg)
    plan, duration_s = _build_schedule(rng, script)
    segments = _finalize_segments(plan, duration_s)
    frame_count = int(round(duration_s * fps))
    noise_rad = math.radians(script.embedding_noise_deg)

    seg_starts = np.asarray([s.start_us for s in segments], dtype=np.int64)

    def segment_at(ts: int) -> int:
        idx = int(np.searchsorted(seg_starts, ts, side="right")) - 1
        return max(0, min(idx, len(segments) - 1))

    blur = [(int(round(a * 1e6)), int(round(b * 1e6)), p) for a, b, p in script.blur]

    # detections, frame order then seat order; draw counts per frame are fixed
    records: list[tuple[Detection, int]] = []
    for frame in range(frame_count):
        ts = frame_timestamp_us(frame, fps)
        seg = segments[segment_at(ts)]
        coins = rng.floats(k)
        for label in range(k):
            if seg.kind == "student":
                p = script.p_attended if label == seg.target else script.p_other
            else:
                p = script.p_board
            if coins[label] >= p:
                continue
            in_blur = any(a <= ts < b for a, b, _ in blur)
            if in_blur:
                dropout = next(p_drop for a, b, p_drop in blur if a <= ts < b)
                if rng.f01() < dropout:
                    continue
            seat = script.seats[label]
            jx, jy = 2.0 * rng.floats(2) - 1.0
            bbox = BBox(x=_round6(seat.x + jx * script.bbox_jitter_px),
                        y=_round6(seat.y + jy * script.bbox_jitter_px),
                        w=seat.w, h=seat.h)
            emb = _noisy_embedding(rng, identity_vectors[label], noise_rad)
            flip, strength = rng.floats(2)
            is_male = script.genders[label] == "male"
            if flip < script.gender_flip_p:
                is_male = not is_male
            hi, lo = _round6(0.5 + strength / 2.0), _round6(0.5 - strength / 2.0)
            gender_scores = (hi, lo) if is_male else (lo, hi)
            records.append((Detection(frame=frame, ts_us=ts, bbox=bbox,
                                      embedding=emb, gender_scores=gender_scores),
                            label))
    records.sort(key=lambda r: detection_sort_key(r[0]))
    detections = DetectionSet(
        embedding_dim=dim, frame_count=frame_count,
        width=script.frame_width, height=script.frame_height,
        detections=tuple(det for det, _ in records))

    # gaze stream: plateau anchors with linear ramps and uniform jitter
    ramp_us = script.ramp_ms * 1000.0
    n_samples = int(math.floor(duration_s * script.gaze_rate_hz))
    jitters = (2.0 * rng.floats(2 * n_samples) - 1.0) * script.gaze_jitter_px
    invalid_coins = rng.floats(n_samples)
    gaze: list[GazeSample] = []
    for i in range(n_samples):
        ts = int(math.floor(i * 1e6 / script.gaze_rate_hz))
        seg_idx = segment_at(ts)
        seg = segments[seg_idx]
        ax, ay = seg.anchor
        if seg_idx > 0 and ramp_us > 0 and ts < seg.start_us + ramp_us:
            px, py = segments[seg_idx - 1].anchor
            alpha = (ts - seg.start_us) / ramp_us
            ax = px + alpha * (ax - px)
            ay = py + alpha * (ay - py)
        x = _round6(ax + jitters[2 * i])
        y = _round6(ay + jitters[2 * i + 1])
        valid = not (script.invalid_p > 0 and invalid_coins[i] < script.invalid_p)
        gaze.append(GazeSample(ts_us=ts, x=x, y=y, valid=valid))

    # frames with scripted integer camera pan during turns
    frames = None
    shift_frames: tuple[tuple[int, int], ...] = ()
    if script.emit_frames:
        offsets, shift_frames = _camera_offsets(script, segments, frame_count)
        max_off = int(np.abs(offsets).max()) if frame_count else 0
        margin = max_off + 8
        mh, mw = script.frame_height + 2 * margin, script.frame_width + 2 * margin
        master = (rng.u64(mh * mw) & np.uint64(0xFF)).astype(np.uint8).reshape(mh, mw)
        frames = []
        for f in range(frame_count):
            ox, oy = int(offsets[f, 0]), int(offsets[f, 1])
            frames.append(master[margin + oy:margin + oy + script.frame_height,
                                 margin + ox:margin + ox + script.frame_width].copy())

    expected = _expected_shares(segments) if script.schedule.mode != "turns" else None
    truth = GroundTruth(
        identities=tuple(label for _, label in records),
        genders=script.genders,
        identity_vectors=identity_vectors,
        segments=segments,
        expected_shares=expected,
        shift_frames=shift_frames,
    )
    config = SessionConfig(
        num_students=k, embedding_dim=dim, fps=fps,
        frame_width=script.frame_width, frame_height=script.frame_height)
    return GeneratedSession(script=script, config=config, detections=detections,
                            gaze=tuple(gaze), truth=truth, frames=frames)


def _expected_shares(segments: tuple[Segment, ...]) -> dict[str, float]:
    counts: dict[str, int] = {}
    total = 0
    for seg in segments:
        if not seg.fixation_expected:
            continue
        key = str(seg.target) if seg.target is not None else "unassigned"
        counts[key] = counts.get(key, 0) + 1
        total += 1
    return {key: count / total for key, count in sorted(counts.items())}


def oracle_identity(embedding: np.ndarray, identity_vectors: np.ndarray) -> int:
    """True identity of an embedding: nearest identity vector by dot product."""
    sims = identity_vectors @ np.asarray(embedding, dtype=np.float64)
    return int(np.argmax(sims))


# --- preset scripts ----------------------------------------------------------

_DEFAULT_SEATS = (BBox(125.0, 420.0, 110.0, 140.0),
                  BBox(445.0, 420.0, 110.0, 140.0),
                  BBox(765.0, 420.0, 110.0, 140.0),
                  BBox(1085.0, 420.0, 110.0, 140.0))
_DEFAULT_GENDERS = ("male", "female", "male", "female")


def classroom_scale_script(seed: int) -> SynthScript:
    """A classroom session at recording scale: 4 students, 15 minutes at
    25 fps, roughly 14k detections, weighted attention with board breaks."""
    duration = 900.0
    return SynthScript(
        seed=seed, duration_s=duration,
        seats=_DEFAULT_SEATS, genders=_DEFAULT_GENDERS,
        schedule=ScheduleSpec(mode="alternate"),
        blur=((0.25 * duration, 0.25 * duration + 1.5, 0.9),
              (0.50 * duration, 0.50 * duration + 1.5, 0.9),
              (0.75 * duration, 0.75 * duration + 1.5, 0.9)),
    )


def share_recovery_script(seed: int,
                          counts: tuple[int, ...] = (16, 12, 8, 4)) -> SynthScript:
    """Scripted fixation-share session: target counts fix the share vector.

    Gaze jumps between plateaus instantly (no ramp) so each scheduled
    segment yields exactly one fixation and the share vector is exact.
    """
    return SynthScript(
        seed=seed, duration_s=float(sum(counts)) * 4.5,
        seats=_DEFAULT_SEATS[:len(counts)], genders=_DEFAULT_GENDERS[:len(counts)],
        num_students=len(counts), ramp_ms=0.0,
        schedule=ScheduleSpec(mode="counts", target_counts=tuple(counts)),
    )


def head_turn_script(seed: int, duration_s: float = 16.0) -> SynthScript:
    """Two-student session with textured frames and camera pans during the
    scripted head turns between plateaus."""
    return SynthScript(
        seed=seed, duration_s=duration_s, fps=25.0,
        num_students=2, embedding_dim=16,
        frame_width=128, frame_height=96,
        seats=(BBox(16.0, 28.0, 24.0, 30.0), BBox(88.0, 28.0, 24.0, 30.0)),
        genders=("male", "female"),
        p_other=0.0, p_board=0.0,
        schedule=ScheduleSpec(mode="turns"),
        emit_frames=True,
    )


PRESETS = {
    "classroom": classroom_scale_script,
    "shares": share_recovery_script,
    "turns": head_turn_script,
}


# --- script and ground truth serialization -----------------------------------


def script_to_json(script: SynthScript) -> str:
    payload = dataclasses.asdict(script)
    payload["seats"] = [[s.x, s.y, s.w, s.h] for s in script.seats]
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def script_from_json(text: str) -> SynthScript:
    payload = json.loads(text)
    payload["seats"] = tuple(BBox(*[float(v) for v in row]) for row in payload["seats"])
    payload["genders"] = tuple(payload["genders"])
    payload["blur"] = tuple(tuple(row) for row in payload.get("blur", ()))
    sched = payload.get("schedule", {})
    for key in ("target_weights", "target_counts", "turn_step"):
        if sched.get(key) is not None:
            sched[key] = tuple(sched[key])
    payload["schedule"] = ScheduleSpec(**sched)
    return SynthScript(**payload)


def truth_to_json(truth: GroundTruth) -> str:
    payload = {
        "identities": list(truth.identities),
        "genders": list(truth.genders),
        "identity_vectors": [[float(v) for v in row] for row in truth.identity_vectors],
        "segments": [{
            "start_us": s.start_us, "end_us": s.end_us, "kind": s.kind,
            "target": s.target, "anchor": [s.anchor[0], s.anchor[1]],
            "fixation_expected": s.fixation_expected,
        } for s in truth.segments],
        "expected_shares": truth.expected_shares,
        "shift_frames": [list(iv) for iv in truth.shift_frames],
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"


def truth_from_json(text: str) -> GroundTruth:
    payload = json.loads(text)
    return GroundTruth(
        identities=tuple(int(v) for v in payload["identities"]),
        genders=tuple(payload["genders"]),
        identity_vectors=np.asarray(payload["identity_vectors"], dtype=np.float64),
        segments=tuple(Segment(
            start_us=int(s["start_us"]), end_us=int(s["end_us"]), kind=s["kind"],
            target=s["target"], anchor=(float(s["anchor"][0]), float(s["anchor"][1])),
            fixation_expected=bool(s["fixation_expected"]),
        ) for s in payload["segments"]),
        expected_shares=payload.get("expected_shares"),
        shift_frames=tuple((int(a), int(b)) for a, b in payload["shift_frames"]),
    )


def write_bundle(session: GeneratedSession, out_dir: Path) -> None:
    """Write detections.jsonl, gaze.csv, config.cfg, ground_truth.json and
    (when present) frames/ under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "detections.jsonl").write_text(render_detections(session.detections))
    (out_dir / "gaze.csv").write_text(render_gaze(session.gaze))
    (out_dir / "config.cfg").write_text(serialize_config(session.config))
    (out_dir / "ground_truth.json").write_text(truth_to_json(session.truth))
    (out_dir / "script.json").write_text(script_to_json(session.script))
    if session.frames is not None:
        frames_dir = out_dir / "frames"
        frames_dir.mkdir(exist_ok=True)
        for idx, frame in enumerate(session.frames):
            (frames_dir / f"frame_{idx:05d}.pgm").write_bytes(render_pgm(frame))
