"""Core session model: detections, gaze samples, tracklets, clusters, fixations.

Every type validates its own invariants on construction so that downstream
stages can assume well-formed data.  Angles are radians, pixel coordinates
are floats in frame space, timestamps are integer microseconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np


class ValidationError(ValueError):
    """A value violates a model invariant."""


class ParseError(ValueError):
    """An input file could not be parsed.  Carries a line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(ValueError):
    """A configuration file or override is invalid."""


class PipelineError(RuntimeError):
    """A pipeline stage violated an internal invariant."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"{stage}: {message}")


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ValidationError(message)


def _require_finite(value: float, name: str) -> None:
    _require(math.isfinite(value), f"{name} must be finite")


def normalize_embedding(vec: Sequence[float] | np.ndarray) -> np.ndarray:
    """Return a unit-norm float64 copy of ``vec``.

    Vectors already within 1e-9 of unit norm are returned bit-exact so that
    serialization round-trips do not drift.  Zero or non-finite vectors are
    rejected.
    """
    arr = np.asarray(vec, dtype=np.float64)
    _require(arr.ndim == 1, "embedding must be a 1-D vector")
    _require(arr.size > 0, "embedding must be non-empty")
    _require(bool(np.isfinite(arr).all()), "embedding must be finite")
    norm = float(np.linalg.norm(arr))
    _require(norm > 1e-12, "embedding has zero norm")
    if abs(norm - 1.0) > 1e-9:
        arr = arr / norm
    out = arr.copy()
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class BBox:
    """Axis-aligned face box, (x, y) top-left corner, w/h strictly positive."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            _require_finite(getattr(self, name), f"bbox.{name}")
        _require(self.w > 0, "bbox.w must be > 0")
        _require(self.h > 0, "bbox.h must be > 0")

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    @property
    def diagonal(self) -> float:
        return math.hypot(self.w, self.h)

    def contains(self, px: float, py: float) -> bool:
        return self.x <= px <= self.x + self.w and self.y <= py <= self.y + self.h


@dataclass(frozen=True, eq=False)
class Detection:
    """One face detection in one video frame.

    ``embedding`` is a unit-norm appearance vector; ``gender_scores`` is an
    optional (male, female) non-negative score pair from an upstream model.
    """

    frame: int
    ts_us: int
    bbox: BBox
    embedding: np.ndarray
    gender_scores: tuple[float, float] | None = None

    def __post_init__(self):
        _require(isinstance(self.frame, int) and self.frame >= 0,
                 "detection.frame must be a non-negative integer")
        _require(isinstance(self.ts_us, int), "detection.ts_us must be an integer")
        emb = np.asarray(self.embedding, dtype=np.float64)
        _require(emb.ndim == 1 and emb.size > 0, "detection.embedding must be a 1-D vector")
        _require(bool(np.isfinite(emb).all()), "detection.embedding must be finite")
        _require(abs(float(np.linalg.norm(emb)) - 1.0) <= 1e-6,
                 "detection.embedding must be unit norm")
        emb = emb.copy()
        emb.setflags(write=False)
        object.__setattr__(self, "embedding", emb)
        if self.gender_scores is not None:
            m, f = self.gender_scores
            _require_finite(m, "gender_scores.male")
            _require_finite(f, "gender_scores.female")
            _require(m >= 0 and f >= 0, "gender scores must be non-negative")
            object.__setattr__(self, "gender_scores", (float(m), float(f)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Detection):
            return NotImplemented
        return (self.frame == other.frame
                and self.ts_us == other.ts_us
                and self.bbox == other.bbox
                and np.array_equal(self.embedding, other.embedding)
                and self.gender_scores == other.gender_scores)


def detection_sort_key(det: Detection) -> tuple[int, float, float]:
    """Canonical detection order: (frame, bbox.x, bbox.y)."""
    return (det.frame, det.bbox.x, det.bbox.y)


@dataclass(frozen=True)
class GazeSample:
    """One gaze sample in frame pixel coordinates.

    Invalid samples (blinks, tracking loss) keep their raw coordinates but
    carry no positional meaning.
    """

    ts_us: int
    x: float
    y: float
    valid: bool = True

    def __post_init__(self):
        _require(isinstance(self.ts_us, int), "gaze.ts_us must be an integer")
        if self.valid:
            _require_finite(self.x, "gaze.x")
            _require_finite(self.y, "gaze.y")


@dataclass(frozen=True, eq=False)
class Tracklet:
    """A short single-identity chain of detections.

    ``members`` holds indices into the session's canonical detection list;
    ``frames`` are the matching frame numbers, strictly increasing.  The
    aggregated ``feature`` is unit norm.
    """

    id: int
    members: tuple[int, ...]
    frames: tuple[int, ...]
    feature: np.ndarray
    max_gap: int | None = None

    def __post_init__(self):
        _require(len(self.members) >= 2, "tracklet needs at least 2 members")
        _require(len(self.members) == len(self.frames),
                 "tracklet members and frames must align")
        for a, b in zip(self.frames, self.frames[1:]):
            _require(b > a, "tracklet frames must be strictly increasing")
            if self.max_gap is not None:
                _require(b - a <= self.max_gap,
                         f"tracklet frame gap {b - a} exceeds max_gap {self.max_gap}")
        feat = normalize_embedding(self.feature)
        object.__setattr__(self, "feature", feat)

    def __len__(self) -> int:
        return len(self.members)


class Merge(tuple):
    """One agglomeration step: (left, right, cost, size), node ids scipy-style."""

    __slots__ = ()

    def __new__(cls, left: int, right: int, cost: float, size: int):
        return super().__new__(cls, (int(left), int(right), float(cost), int(size)))

    @property
    def left(self) -> int:
        return self[0]

    @property
    def right(self) -> int:
        return self[1]

    @property
    def cost(self) -> float:
        return self[2]

    @property
    def size(self) -> int:
        return self[3]


@dataclass(frozen=True)
class Dendrogram:
    """Full agglomeration history over ``n_leaves`` observations.

    Leaves are nodes ``0..n-1``; merge ``t`` creates node ``n + t``.  Costs
    are non-decreasing (within float tolerance) and every node is consumed
    at most once.
    """

    n_leaves: int
    merges: tuple[Merge, ...]

    def __post_init__(self):
        n = self.n_leaves
        _require(n >= 1, "dendrogram needs at least one leaf")
        _require(len(self.merges) == n - 1,
                 f"expected {n - 1} merges for {n} leaves, got {len(self.merges)}")
        consumed: set[int] = set()
        prev_cost = -math.inf
        for t, m in enumerate(self.merges):
            node = n + t
            _require(m.left < m.right, "merge children must be ordered (left < right)")
            for child in (m.left, m.right):
                _require(0 <= child < node, f"merge {t} references invalid node {child}")
                _require(child not in consumed, f"node {child} consumed twice")
                consumed.add(child)
            _require(m.cost >= prev_cost - 1e-9 * max(1.0, abs(prev_cost)),
                     f"merge costs must be non-decreasing (step {t})")
            _require(m.size >= 2, "merged cluster size must be >= 2")
            prev_cost = max(prev_cost, m.cost)


GENDERS = ("male", "female", "unknown")


@dataclass(frozen=True, eq=False)
class IdentityCluster:
    """One student identity: its tracklets, singleton detections and centroid."""

    label: int
    tracklet_ids: frozenset[int]
    singleton_members: frozenset[int]
    centroid: np.ndarray
    gender: str = "unknown"
    gender_votes: tuple[int, int] = (0, 0)

    def __post_init__(self):
        _require(self.label >= 0, "cluster label must be non-negative")
        cen = normalize_embedding(self.centroid)
        object.__setattr__(self, "centroid", cen)
        _require(self.gender in GENDERS, f"unknown gender {self.gender!r}")
        m, f = self.gender_votes
        _require(m >= 0 and f >= 0, "gender votes must be non-negative")


@dataclass(frozen=True)
class FixationEvent:
    """A dispersion-bounded gaze event.  ``target`` is an identity label or
    None when the fixation could not be attributed to a student."""

    start_us: int
    end_us: int
    cx: float
    cy: float
    dispersion: float
    sample_count: int
    target: int | None = None
    motion_valid: bool = True

    def __post_init__(self):
        _require(isinstance(self.start_us, int) and isinstance(self.end_us, int),
                 "fixation timestamps must be integers")
        _require(self.end_us >= self.start_us, "fixation end must not precede start")
        _require_finite(self.cx, "fixation.cx")
        _require_finite(self.cy, "fixation.cy")
        _require(self.dispersion >= 0, "fixation dispersion must be >= 0")
        _require(self.sample_count >= 1, "fixation needs at least one sample")
        if self.target is not None:
            _require(self.target >= 0, "fixation target must be a label or None")

    @property
    def duration_us(self) -> int:
        return self.end_us - self.start_us


@dataclass(frozen=True)
class FlowSummary:
    """Mean block-matching flow between frame ``frame`` and ``frame + 1``.

    ``kept_blocks`` counts blocks that passed the texture gate; when it is
    zero the magnitude and orientation are reported as 0.
    """

    frame: int
    mean_magnitude: float
    mean_orientation: float
    kept_blocks: int

    def __post_init__(self):
        _require(self.frame >= 0, "flow frame must be non-negative")
        _require(self.mean_magnitude >= 0, "flow magnitude must be >= 0")
        _require(-math.pi < self.mean_orientation <= math.pi,
                 "flow orientation must lie in (-pi, pi]")
        _require(self.kept_blocks >= 0, "kept_blocks must be >= 0")
        if self.kept_blocks == 0:
            _require(self.mean_magnitude == 0.0 and self.mean_orientation == 0.0,
                     "flow with no kept blocks must report zero magnitude and orientation")


# --- configuration -----------------------------------------------------------


def _positive(value: float, name: str) -> None:
    _require_finite(value, name)
    _require(value > 0, f"{name} must be > 0")


@dataclass(frozen=True)
class LinkingConfig:
    """Two-threshold tracklet linking parameters."""

    theta_high: float = 0.6
    theta_margin: float = 0.05
    max_gap: int = 10
    sigma_loc: float = 1.0

    def __post_init__(self):
        _positive(self.theta_high, "linking.theta_high")
        _require(self.theta_high <= 1.0, "linking.theta_high must be in (0, 1]")
        _positive(self.theta_margin, "linking.theta_margin")
        _require(isinstance(self.max_gap, int) and self.max_gap >= 1,
                 "linking.max_gap must be an integer >= 1")
        _positive(self.sigma_loc, "linking.sigma_loc")


@dataclass(frozen=True)
class ClassifierConfig:
    """Singleton assignment strategy and SVM hyper-parameters."""

    strategy: str = "nearest_centroid"
    svm_c: float = 10.0
    svm_gamma: float | None = None
    svm_tol: float = 1e-3

    def __post_init__(self):
        _require(self.strategy in ("nearest_centroid", "svm"),
                 f"classifier.strategy must be nearest_centroid or svm, got {self.strategy!r}")
        _positive(self.svm_c, "classifier.svm_c")
        if self.svm_gamma is not None:
            _positive(self.svm_gamma, "classifier.svm_gamma")
        _positive(self.svm_tol, "classifier.svm_tol")


@dataclass(frozen=True)
class FixationConfig:
    """Dispersion-window fixation detection parameters."""

    dispersion_px: float = 30.0
    min_duration_ms: float = 100.0

    def __post_init__(self):
        _positive(self.dispersion_px, "fixation.dispersion_px")
        _positive(self.min_duration_ms, "fixation.min_duration_ms")

    @property
    def min_duration_us(self) -> int:
        return int(round(self.min_duration_ms * 1000.0))


@dataclass(frozen=True)
class AttentionConfig:
    """Fixation-to-identity assignment parameters."""

    body_widen: float = 1.5
    body_extend: float = 4.0
    r_max_px: float = 100.0

    def __post_init__(self):
        _positive(self.body_widen, "attention.body_widen")
        _positive(self.body_extend, "attention.body_extend")
        _positive(self.r_max_px, "attention.r_max_px")


@dataclass(frozen=True)
class MotionConfig:
    """Block-matching flow and gaze-shift validation parameters."""

    block_size: int = 16
    search_radius: int = 8
    min_variance: float = 1.0
    shift_magnitude_px: float = 4.0

    def __post_init__(self):
        _require(isinstance(self.block_size, int) and self.block_size >= 4,
                 "motion.block_size must be an integer >= 4")
        _require(isinstance(self.search_radius, int) and self.search_radius >= 1,
                 "motion.search_radius must be an integer >= 1")
        _positive(self.min_variance, "motion.min_variance")
        _positive(self.shift_magnitude_px, "motion.shift_magnitude_px")


@dataclass(frozen=True)
class SessionConfig:
    """Resolved configuration for one session."""

    num_students: int = 4
    embedding_dim: int = 32
    fps: float = 25.0
    frame_width: int = 1280
    frame_height: int = 960
    gaze_offset_us: int = 0
    linking: LinkingConfig = field(default_factory=LinkingConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    fixation: FixationConfig = field(default_factory=FixationConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    motion: MotionConfig = field(default_factory=MotionConfig)

    def __post_init__(self):
        _require(isinstance(self.num_students, int) and self.num_students >= 1,
                 "num_students must be an integer >= 1")
        _require(isinstance(self.embedding_dim, int) and self.embedding_dim >= 2,
                 "embedding_dim must be an integer >= 2")
        _positive(self.fps, "fps")
        _require(isinstance(self.frame_width, int) and self.frame_width >= 1,
                 "frame_width must be an integer >= 1")
        _require(isinstance(self.frame_height, int) and self.frame_height >= 1,
                 "frame_height must be an integer >= 1")
        _require(isinstance(self.gaze_offset_us, int), "gaze_offset_us must be an integer")


# --- attention report --------------------------------------------------------


@dataclass(frozen=True)
class IdentityAttention:
    """Per-identity visibility and fixation aggregates."""

    label: int
    gender: str
    frames_visible: int
    fixation_count: int
    fixation_duration_us: int
    fixation_share: float | None
    duration_share: float | None

    def __post_init__(self):
        _require(self.gender in GENDERS, f"unknown gender {self.gender!r}")
        _require(self.frames_visible >= 0, "frames_visible must be >= 0")
        _require(self.fixation_count >= 0, "fixation_count must be >= 0")
        _require(self.fixation_duration_us >= 0, "fixation_duration_us must be >= 0")


@dataclass(frozen=True)
class GenderAttention:
    """Assigned-fixation aggregate for one gender bucket."""

    gender: str
    fixation_count: int
    share: float | None

    def __post_init__(self):
        _require(self.gender in GENDERS, f"unknown gender {self.gender!r}")
        _require(self.fixation_count >= 0, "fixation_count must be >= 0")


@dataclass(frozen=True)
class TimelineRow:
    """Per-frame attention state: visible identities and the fixation target.

    ``has_fixation`` distinguishes a frame with no fixation from a frame
    covered by an unassigned fixation (``target`` is None in both cases).
    """

    frame: int
    visible: tuple[int, ...]
    has_fixation: bool
    target: int | None

    def __post_init__(self):
        _require(self.frame >= 0, "timeline frame must be >= 0")
        _require(tuple(sorted(self.visible)) == self.visible,
                 "timeline visible labels must be sorted")
        if not self.has_fixation:
            _require(self.target is None, "frame without fixation cannot carry a target")


@dataclass(frozen=True)
class AttentionReport:
    """Session-level attention summary.

    Shares are fractions of the total fixation count (or total duration for
    ``duration_share``) and are None when the session has no fixations.
    Identity, unassigned and gender shares each sum to 1 when defined.
    """

    frame_count: int
    total_fixations: int
    identities: tuple[IdentityAttention, ...]
    genders: tuple[GenderAttention, ...]
    unassigned_count: int
    unassigned_share: float | None
    timeline: tuple[TimelineRow, ...]
    meta: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        _require(self.frame_count >= 0, "frame_count must be >= 0")
        labels = [i.label for i in self.identities]
        _require(labels == sorted(labels), "identities must be ordered by label")
        counts = sum(i.fixation_count for i in self.identities) + self.unassigned_count
        _require(counts == self.total_fixations,
                 "identity and unassigned fixation counts must sum to the total")
        if self.total_fixations > 0:
            shares = [i.fixation_share for i in self.identities] + [self.unassigned_share]
            _require(all(s is not None for s in shares),
                     "shares must be present when the session has fixations")
            # fresh reports sum to 1 within 1e-9; reports reloaded from disk
            # carry 6-decimal rounding, hence the per-bucket slack
            _require(abs(sum(shares) - 1.0) <= 1e-9 + 1e-6 * len(shares),
                     "fixation shares must sum to 1")
        else:
            _require(self.unassigned_share is None, "empty session has no shares")

    def identity_shares(self) -> list[float]:
        return [i.fixation_share if i.fixation_share is not None else 0.0
                for i in self.identities]


def frame_timestamp_us(frame: int, fps: float) -> int:
    """Timestamp of a frame's start, integer microseconds.

    Rounds up so the result always maps back into the same frame.
    """
    if float(fps).is_integer():
        return -((-frame * 1_000_000) // int(fps))
    return int(math.ceil(frame * 1_000_000 / fps))


def timestamp_frame(ts_us: int, fps: float, offset_us: int = 0,
                    frame_count: int | None = None) -> int:
    """Frame index containing timestamp ``ts_us``, clamped into the video."""
    rel = ts_us - offset_us
    if float(fps).is_integer():
        frame = (rel * int(fps)) // 1_000_000
    else:
        frame = math.floor(rel * fps / 1_000_000)
    frame = max(0, int(frame))
    if frame_count is not None:
        frame = min(frame, frame_count - 1)
    return frame
