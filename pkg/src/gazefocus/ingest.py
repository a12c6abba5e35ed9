"""Session file formats: detections.jsonl, gaze.csv, PGM frames, and the
artifact files written by the pipeline stages.

All writers are deterministic: fixed key order, fixed float formatting
(6 decimals for pixel/score scalars, full precision for embedding vectors),
LF line endings.  Parsers report 1-based line numbers on malformed input.
"""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .config import load_config, serialize_config
from .model import (AttentionReport, BBox, ConfigError, Detection, FixationEvent,
                    FlowSummary, GazeSample, GenderAttention, IdentityAttention,
                    ParseError, SessionConfig, TimelineRow, Tracklet, ValidationError,
                    detection_sort_key, frame_timestamp_us)

log = logging.getLogger(__name__)

_JSON_KW = dict(sort_keys=True, separators=(",", ":"))


def _round6(value: float) -> float:
    return round(float(value), 6)


def _vector_list(vec) -> list[float]:
    return [float(v) for v in np.asarray(vec, dtype=np.float64)]


# --- detections.jsonl --------------------------------------------------------


@dataclass(frozen=True)
class DetectionSet:
    """Parsed detection stream plus its session header."""

    embedding_dim: int
    frame_count: int
    width: int
    height: int
    detections: tuple[Detection, ...]

    def __post_init__(self):
        if self.embedding_dim < 2 or self.frame_count < 1:
            raise ValidationError("detection header must have embedding_dim >= 2 "
                                  "and frame_count >= 1")
        if self.width < 1 or self.height < 1:
            raise ValidationError("frame dimensions must be >= 1")


def parse_detections(stream: Iterable[str]) -> DetectionSet:
    """Parse a detections.jsonl stream.

    Line 1 is the header; each further line is one detection.  Output is
    sorted by (frame, bbox.x, bbox.y) regardless of input order, and
    embeddings are renormalized unless already unit norm.
    """
    lines = iter(stream)
    try:
        header_line = next(lines)
    except StopIteration:
        raise ParseError("empty detections file", line=1)
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad header JSON: {exc.msg}", line=1)
    for key in ("embedding_dim", "frame_count", "width", "height"):
        if key not in header:
            raise ParseError(f"header missing {key!r}", line=1)
    dim = int(header["embedding_dim"])
    frame_count = int(header["frame_count"])

    detections: list[Detection] = []
    for lineno, raw in enumerate(lines, start=2):
        if not raw.strip():
            continue
        try:
            row = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ParseError(f"bad JSON: {exc.msg}", line=lineno)
        try:
            bbox_vals = row["bbox"]
            if len(bbox_vals) != 4:
                raise ParseError("bbox must be [x, y, w, h]", line=lineno)
            emb = np.asarray(row["embedding"], dtype=np.float64)
            if emb.shape != (dim,):
                raise ParseError(
                    f"embedding dimension mismatch: expected {dim}, got {emb.size}",
                    line=lineno)
            if not np.isfinite(emb).all():
                raise ParseError("non-finite embedding value", line=lineno)
            norm = float(np.linalg.norm(emb))
            if norm <= 1e-12:
                raise ParseError("zero-norm embedding", line=lineno)
            if abs(norm - 1.0) > 1e-9:
                emb = emb / norm
            gender = row.get("gender")
            det = Detection(
                frame=int(row["frame"]),
                ts_us=int(row["ts_us"]),
                bbox=BBox(*[float(v) for v in bbox_vals]),
                embedding=emb,
                gender_scores=(float(gender[0]), float(gender[1])) if gender else None,
            )
        except ParseError:
            raise
        except KeyError as exc:
            raise ParseError(f"missing field {exc.args[0]!r}", line=lineno)
        except (TypeError, ValueError, OverflowError) as exc:
            raise ParseError(str(exc), line=lineno)
        if det.frame >= frame_count:
            raise ParseError(f"frame {det.frame} outside frame_count {frame_count}",
                             line=lineno)
        detections.append(det)

    detections.sort(key=detection_sort_key)
    prev_frame, prev_max_ts = None, None
    for det in detections:
        if prev_frame is not None and det.frame > prev_frame:
            if det.ts_us < prev_max_ts:
                raise ParseError(
                    f"timestamps decrease from frame {prev_frame} to {det.frame}")
            prev_frame, prev_max_ts = det.frame, det.ts_us
        elif prev_frame is None:
            prev_frame, prev_max_ts = det.frame, det.ts_us
        else:
            prev_max_ts = max(prev_max_ts, det.ts_us)
    return DetectionSet(embedding_dim=dim, frame_count=frame_count,
                        width=int(header["width"]), height=int(header["height"]),
                        detections=tuple(detections))


def render_detections(ds: DetectionSet) -> str:
    """Serialize a DetectionSet to detections.jsonl text.

    Pixel and score scalars are rounded to 6 decimals; embedding components
    keep full precision so unit vectors round-trip exactly.
    """
    out = io.StringIO()
    header = {"embedding_dim": ds.embedding_dim, "frame_count": ds.frame_count,
              "width": ds.width, "height": ds.height}
    out.write(json.dumps(header, **_JSON_KW) + "\n")
    for det in sorted(ds.detections, key=detection_sort_key):
        row: dict[str, object] = {
            "frame": det.frame,
            "ts_us": det.ts_us,
            "bbox": [_round6(det.bbox.x), _round6(det.bbox.y),
                     _round6(det.bbox.w), _round6(det.bbox.h)],
            "embedding": _vector_list(det.embedding),
        }
        if det.gender_scores is not None:
            row["gender"] = [_round6(det.gender_scores[0]), _round6(det.gender_scores[1])]
        out.write(json.dumps(row, **_JSON_KW) + "\n")
    return out.getvalue()


# --- gaze.csv ----------------------------------------------------------------


def parse_gaze(stream: Iterable[str], width: int, height: int) -> tuple[GazeSample, ...]:
    """Parse gaze.csv rows ``ts_us,x,y,valid`` (no header).

    Rows are sorted by timestamp; duplicate timestamps are rejected.  Valid
    samples whose coordinates fall outside the frame rectangle scaled 2x
    about its center are force-marked invalid, with one warning logged.
    """
    rows: list[tuple[GazeSample, int]] = []
    for lineno, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise ParseError(f"expected 4 fields, got {len(parts)}", line=lineno)
        try:
            ts = int(parts[0])
            x = float(parts[1])
            y = float(parts[2])
            valid_raw = int(parts[3])
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno)
        if valid_raw not in (0, 1):
            raise ParseError(f"valid flag must be 0 or 1, got {parts[3]}", line=lineno)
        if not (math.isfinite(x) and math.isfinite(y)):
            raise ParseError("non-finite gaze coordinate", line=lineno)
        rows.append((GazeSample(ts_us=ts, x=x, y=y, valid=bool(valid_raw)), lineno))

    rows.sort(key=lambda r: (r[0].ts_us, r[1]))
    out_of_range = 0
    samples: list[GazeSample] = []
    prev_ts = None
    for sample, lineno in rows:
        if prev_ts is not None and sample.ts_us == prev_ts:
            raise ParseError(f"duplicate timestamp {sample.ts_us}", line=lineno)
        prev_ts = sample.ts_us
        if sample.valid and not (-0.5 * width <= sample.x <= 1.5 * width
                                 and -0.5 * height <= sample.y <= 1.5 * height):
            sample = GazeSample(ts_us=sample.ts_us, x=sample.x, y=sample.y, valid=False)
            out_of_range += 1
        samples.append(sample)
    if out_of_range:
        log.warning("marked %d gaze samples invalid: coordinates beyond 2x frame bounds",
                    out_of_range)
    return tuple(samples)


def render_gaze(samples: Sequence[GazeSample]) -> str:
    """Serialize gaze samples to gaze.csv text (ts_us,x,y,valid; no header)."""
    lines = [f"{s.ts_us},{s.x:.6f},{s.y:.6f},{int(s.valid)}" for s in samples]
    return "\n".join(lines) + ("\n" if lines else "")


# --- PGM frames --------------------------------------------------------------


def render_pgm(frame: np.ndarray) -> bytes:
    """Encode a uint8 grayscale image as binary PGM (P5, maxval 255)."""
    arr = np.asarray(frame)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ValidationError("PGM frames must be 2-D uint8 arrays")
    h, w = arr.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes()


def parse_pgm(data: bytes) -> np.ndarray:
    """Decode a binary PGM (P5) image."""
    tokens: list[int] = []
    pos = 0
    if not data.startswith(b"P5"):
        raise ParseError("not a P5 PGM file")
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        try:
            tokens.append(int(data[start:pos]))
        except ValueError:
            raise ParseError(f"bad PGM header token {data[start:pos]!r}")
    pos += 1          # single whitespace byte after maxval
    w, h, maxval = tokens
    if maxval != 255:
        raise ParseError(f"unsupported PGM maxval {maxval}")
    raw = data[pos:pos + w * h]
    if len(raw) != w * h:
        raise ParseError("truncated PGM pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w)


# --- pipeline artifacts ------------------------------------------------------


def render_tracklets(tracklets: Sequence[Tracklet], n_detections: int) -> str:
    """Serialize tracklets to tracklets.jsonl (header line, one row each)."""
    out = io.StringIO()
    out.write(json.dumps({"n_detections": int(n_detections),
                          "n_tracklets": len(tracklets)}, **_JSON_KW) + "\n")
    for t in tracklets:
        row = {"id": t.id, "frames": list(t.frames), "members": list(t.members),
               "feature": _vector_list(t.feature)}
        out.write(json.dumps(row, **_JSON_KW) + "\n")
    return out.getvalue()


def parse_tracklets(stream: Iterable[str]) -> tuple[list[Tracklet], int]:
    """Parse tracklets.jsonl back into (tracklets, n_detections)."""
    lines = iter(stream)
    try:
        header = json.loads(next(lines))
    except StopIteration:
        raise ParseError("empty tracklets file", line=1)
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad header JSON: {exc.msg}", line=1)
    tracklets = []
    for lineno, raw in enumerate(lines, start=2):
        if not raw.strip():
            continue
        try:
            row = json.loads(raw)
            tracklets.append(Tracklet(
                id=int(row["id"]),
                members=tuple(int(v) for v in row["members"]),
                frames=tuple(int(v) for v in row["frames"]),
                feature=np.asarray(row["feature"], dtype=np.float64),
            ))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad tracklet row: {exc}", line=lineno)
    return tracklets, int(header["n_detections"])


def render_clusters(tracklet_labels: Sequence[int], singleton_members: Sequence[int],
                    singleton_labels: Sequence[int], centroids,
                    singleton_margins: Sequence[float] | None = None) -> str:
    """Serialize clustering output to clusters.json."""
    payload: dict[str, object] = {
        "labels": [int(v) for v in tracklet_labels],
        "singleton_members": [int(v) for v in singleton_members],
        "singleton_labels": [int(v) for v in singleton_labels],
        "centroids": [_vector_list(c) for c in centroids],
    }
    if singleton_margins is not None:
        payload["singleton_margins"] = [_round6(v) for v in singleton_margins]
    return json.dumps(payload, **_JSON_KW) + "\n"


def parse_clusters(text: str) -> dict[str, object]:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad clusters JSON: {exc.msg}")
    for key in ("labels", "singleton_members", "singleton_labels", "centroids"):
        if key not in payload:
            raise ParseError(f"clusters file missing {key!r}")
    return payload


def render_fixations(fixations: Sequence[FixationEvent], fps: float,
                     offset_us: int = 0, frame_count: int | None = None) -> str:
    """Serialize fixations.csv with a header row."""
    from .fixation import fixation_frame_span
    lines = ["start_us,end_us,cx,cy,dispersion,sample_count,mid_frame"]
    for f in fixations:
        _, _, mid = fixation_frame_span(f, fps, offset_us, frame_count)
        lines.append(f"{f.start_us},{f.end_us},{f.cx:.6f},{f.cy:.6f},"
                     f"{f.dispersion:.6f},{f.sample_count},{mid}")
    return "\n".join(lines) + "\n"


def render_flow(flows: Sequence[FlowSummary]) -> str:
    """Serialize flow.csv with a header row."""
    lines = ["frame,mean_magnitude,mean_orientation,kept_blocks"]
    for f in flows:
        lines.append(f"{f.frame},{f.mean_magnitude:.6f},"
                     f"{f.mean_orientation:.6f},{f.kept_blocks}")
    return "\n".join(lines) + "\n"


# --- attention report --------------------------------------------------------


def _share(value: float | None) -> float | None:
    return None if value is None else _round6(value)


def render_report_json(report: AttentionReport) -> str:
    """Serialize an AttentionReport to report.json.

    Share keys are omitted entirely when the session has no fixations.
    Timeline targets encode as an identity label, the string "unassigned",
    or null when no fixation covers the frame.
    """
    identities = []
    for ident in report.identities:
        row: dict[str, object] = {
            "label": ident.label,
            "gender": ident.gender,
            "frames_visible": ident.frames_visible,
            "fixation_count": ident.fixation_count,
            "fixation_duration_us": ident.fixation_duration_us,
        }
        if ident.fixation_share is not None:
            row["fixation_share"] = _round6(ident.fixation_share)
        if ident.duration_share is not None:
            row["duration_share"] = _round6(ident.duration_share)
        identities.append(row)
    genders = []
    for g in report.genders:
        row = {"gender": g.gender, "fixation_count": g.fixation_count}
        if g.share is not None:
            row["share"] = _round6(g.share)
        genders.append(row)
    unassigned: dict[str, object] = {"fixation_count": report.unassigned_count}
    if report.unassigned_share is not None:
        unassigned["share"] = _round6(report.unassigned_share)
    timeline = []
    for row_t in report.timeline:
        target: object
        if not row_t.has_fixation:
            target = None
        elif row_t.target is None:
            target = "unassigned"
        else:
            target = row_t.target
        timeline.append([row_t.frame, list(row_t.visible), target])
    payload = {
        "meta": dict(report.meta),
        "frame_count": report.frame_count,
        "total_fixations": report.total_fixations,
        "identities": identities,
        "genders": genders,
        "unassigned": unassigned,
        "timeline": timeline,
    }
    return json.dumps(payload, **_JSON_KW) + "\n"


def parse_report(text: str) -> AttentionReport:
    """Reconstruct an AttentionReport from report.json text."""
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad report JSON: {exc.msg}")
    try:
        identities = tuple(IdentityAttention(
            label=int(row["label"]), gender=row["gender"],
            frames_visible=int(row["frames_visible"]),
            fixation_count=int(row["fixation_count"]),
            fixation_duration_us=int(row["fixation_duration_us"]),
            fixation_share=row.get("fixation_share"),
            duration_share=row.get("duration_share"),
        ) for row in payload["identities"])
        genders = tuple(GenderAttention(
            gender=row["gender"], fixation_count=int(row["fixation_count"]),
            share=row.get("share"),
        ) for row in payload["genders"])
        timeline = []
        for frame, visible, target in payload["timeline"]:
            has_fix = target is not None
            label = None if (target is None or target == "unassigned") else int(target)
            timeline.append(TimelineRow(frame=int(frame),
                                        visible=tuple(int(v) for v in visible),
                                        has_fixation=has_fix, target=label))
        return AttentionReport(
            frame_count=int(payload["frame_count"]),
            total_fixations=int(payload["total_fixations"]),
            identities=identities,
            genders=genders,
            unassigned_count=int(payload["unassigned"]["fixation_count"]),
            unassigned_share=payload["unassigned"].get("share"),
            timeline=tuple(timeline),
            meta=payload.get("meta", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise ParseError(f"inconsistent report: {exc}")
        raise ParseError(f"bad report structure: {exc}")


def _fmt_share(value: float | None) -> str:
    return "" if value is None else f"{value:.6f}"


def render_report_csv(report: AttentionReport) -> str:
    """Flat CSV view of a report: identity, unassigned and gender rows."""
    lines = ["kind,label,gender,frames_visible,fixation_count,"
             "fixation_duration_us,fixation_share,duration_share"]
    for ident in report.identities:
        lines.append(f"identity,{ident.label},{ident.gender},{ident.frames_visible},"
                     f"{ident.fixation_count},{ident.fixation_duration_us},"
                     f"{_fmt_share(ident.fixation_share)},{_fmt_share(ident.duration_share)}")
    lines.append(f"unassigned,,,,{report.unassigned_count},,"
                 f"{_fmt_share(report.unassigned_share)},")
    for g in report.genders:
        lines.append(f"gender,,{g.gender},,{g.fixation_count},,{_fmt_share(g.share)},")
    return "\n".join(lines) + "\n"


def render_timeline_csv(report: AttentionReport) -> str:
    """Per-frame CSV: frame, visible labels joined by '|', fixation target."""
    lines = ["frame,visible_labels,fixation_label"]
    for row in report.timeline:
        visible = "|".join(str(v) for v in row.visible)
        if not row.has_fixation:
            target = ""
        elif row.target is None:
            target = "unassigned"
        else:
            target = str(row.target)
        lines.append(f"{row.frame},{visible},{target}")
    return "\n".join(lines) + "\n"


_PALETTE = ("#4e79a7", "#f28e2b", "#59a14f", "#b07aa1", "#e15759",
            "#76b7b2", "#edc948", "#9c755f")


def render_timeline_svg(report: AttentionReport) -> str:
    """Deterministic SVG strip chart: one row per identity plus unassigned.

    Gray spans mark frames where the identity is visible; colored spans mark
    fixations attributed to it.
    """
    rows = [*(i.label for i in report.identities), None]
    row_h, left, width = 24, 70, 960
    height = row_h * len(rows) + 30
    frames = max(1, report.frame_count)
    scale = width / frames

    def x(frame: int) -> float:
        return left + frame * scale

    def spans(frame_flags: list[bool]) -> list[tuple[int, int]]:
        out = []
        start = None
        for idx, flag in enumerate(frame_flags):
            if flag and start is None:
                start = idx
            elif not flag and start is not None:
                out.append((start, idx))
                start = None
        if start is not None:
            out.append((start, len(frame_flags)))
        return out

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{left + width + 10}" '
             f'height="{height}" font-family="monospace" font-size="11">']
    for row_idx, label in enumerate(rows):
        y = 20 + row_idx * row_h
        name = f"id {label}" if label is not None else "unassigned"
        parts.append(f'<text x="4" y="{y + 15}">{name}</text>')
        if label is not None:
            visible = [label in row.visible for row in report.timeline]
            for s, e in spans(visible):
                parts.append(f'<rect x="{x(s):.2f}" y="{y + 8}" '
                             f'width="{max(0.5, (e - s) * scale):.2f}" height="6" '
                             f'fill="#d0d0d0"/>')
        fixated = [row.has_fixation and row.target == label for row in report.timeline]
        color = _PALETTE[label % len(_PALETTE)] if label is not None else "#808080"
        for s, e in spans(fixated):
            parts.append(f'<rect x="{x(s):.2f}" y="{y + 2}" '
                         f'width="{max(0.5, (e - s) * scale):.2f}" height="6" '
                         f'fill="{color}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# --- session bundles ---------------------------------------------------------


@dataclass(frozen=True)
class SessionBundle:
    """One loaded session: config, detections, gaze, optional frame files."""

    config: SessionConfig
    detections: DetectionSet
    gaze: tuple[GazeSample, ...]
    frame_paths: tuple[Path, ...] = ()

    def __post_init__(self):
        duration = frame_timestamp_us(self.detections.frame_count, self.config.fps)
        slack = 1_000_000
        for s in self.gaze:
            if not (-slack <= s.ts_us - self.config.gaze_offset_us <= duration + slack):
                raise ValidationError(
                    f"gaze timestamp {s.ts_us} outside session duration "
                    f"{duration}us (+/- 1s)")


def load_bundle(bundle_dir: Path, config: SessionConfig | None = None,
                overrides: Iterable[str] = ()) -> SessionBundle:
    """Load a session bundle directory.

    The config resolves from ``config.cfg`` in the bundle (if present) plus
    overrides, unless an explicit config object is given.  Header dimensions
    must agree with the config.
    """
    bundle_dir = Path(bundle_dir)
    det_path = bundle_dir / "detections.jsonl"
    gaze_path = bundle_dir / "gaze.csv"
    for path in (det_path, gaze_path):
        if not path.is_file():
            raise ParseError(f"missing input file: {path}")
    if config is None:
        cfg_path = bundle_dir / "config.cfg"
        config = load_config(cfg_path if cfg_path.is_file() else None, overrides)
    with det_path.open() as fh:
        detections = parse_detections(fh)
    if detections.embedding_dim != config.embedding_dim:
        raise ConfigError(f"embedding_dim mismatch: config {config.embedding_dim}, "
                          f"detections header {detections.embedding_dim}")
    if (detections.width, detections.height) != (config.frame_width, config.frame_height):
        raise ConfigError(
            f"frame size mismatch: config {config.frame_width}x{config.frame_height}, "
            f"detections header {detections.width}x{detections.height}")
    with gaze_path.open() as fh:
        gaze = parse_gaze(fh, detections.width, detections.height)
    frames_dir = bundle_dir / "frames"
    frame_paths: tuple[Path, ...] = ()
    if frames_dir.is_dir():
        frame_paths = tuple(sorted(frames_dir.glob("*.pgm")))
    return SessionBundle(config=config, detections=detections, gaze=gaze,
                         frame_paths=frame_paths)


def load_frames(bundle: SessionBundle) -> list[np.ndarray]:
    return [parse_pgm(path.read_bytes()) for path in bundle.frame_paths]
