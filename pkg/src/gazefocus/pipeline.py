"""End-to-end session processing: link, cluster, fixate, attribute, report.

``run_session`` works on an in-memory bundle and returns every intermediate
product plus rendered artifact texts; ``run_pipeline`` wraps it for a bundle
directory on disk.  Artifact bytes are deterministic for a given bundle and
config, independent of the worker count.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ingest
from .attention import attribute_fixations, build_attention_map, gender_majority
from .config import config_to_flat
from .cluster import (NearestCentroidClassifier, assign_singletons, cut_dendrogram,
                      train_singleton_classifier, ward_linkage)
from .fixation import detect_fixations
from .ingest import SessionBundle, load_bundle, load_frames
from .model import (AttentionReport, FixationEvent, FlowSummary, IdentityCluster,
                    PipelineError, SessionConfig, Tracklet, ValidationError)
from .motion import detect_gaze_shifts, flow_sequence, validate_fixations
from .tracklink import TrackletLinker


@dataclass
class SessionResult:
    """All products of one pipeline run."""

    bundle: SessionBundle
    tracklets: list[Tracklet]
    singletons: list[int]
    tracklet_labels: np.ndarray
    singleton_labels: np.ndarray
    detection_labels: np.ndarray
    clusters: list[IdentityCluster]
    fixations: list[FixationEvent]
    flows: list[FlowSummary] | None
    shift_intervals: list[tuple[int, int]]
    report: AttentionReport
    artifacts: dict[str, bytes] = field(default_factory=dict)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _input_hashes(bundle_dir: Path, bundle: SessionBundle) -> dict[str, str]:
    hashes = {}
    for name in ("detections.jsonl", "gaze.csv", "config.cfg", "ground_truth.json"):
        path = bundle_dir / name
        if path.is_file():
            hashes[name] = _sha256(path.read_bytes())
    if bundle.frame_paths:
        digest = hashlib.sha256()
        for path in bundle.frame_paths:
            digest.update(_sha256(path.read_bytes()).encode("ascii"))
        hashes["frames"] = digest.hexdigest()
    return hashes


def build_clusters(tracklets: list[Tracklet], tracklet_labels, singletons: list[int],
                   singleton_labels, detections, num_students: int) -> list[IdentityCluster]:
    """Assemble per-identity clusters with centroids and gender majorities."""
    clusters = []
    for label in range(num_students):
        t_ids = [t.id for t, lab in zip(tracklets, tracklet_labels) if lab == label]
        features = [t.feature for t, lab in zip(tracklets, tracklet_labels)
                    if lab == label]
        if not features:
            raise PipelineError("cluster", f"identity {label} has no tracklets")
        centroid = np.mean(features, axis=0)
        member_dets: list[int] = []
        for t, lab in zip(tracklets, tracklet_labels):
            if lab == label:
                member_dets.extend(t.members)
        singles = [det for det, lab in zip(singletons, singleton_labels)
                   if lab == label]
        votes = gender_majority(detections[i].gender_scores
                                for i in sorted(member_dets + singles))
        clusters.append(IdentityCluster(
            label=label,
            tracklet_ids=frozenset(t_ids),
            singleton_members=frozenset(singles),
            centroid=centroid,
            gender=votes[0],
            gender_votes=(votes[1], votes[2]),
        ))
    return clusters


def run_session(bundle: SessionBundle, jobs: int = 1, motion_valid_only: bool = False,
                session_id: str | None = None,
                input_hashes: dict[str, str] | None = None) -> SessionResult:
    """Run every stage over a loaded bundle and render the artifacts."""
    cfg = bundle.config
    detections = list(bundle.detections.detections)
    frame_count = bundle.detections.frame_count

    try:
        linker = TrackletLinker.from_config(cfg.linking).fit(detections)
    except ValidationError as exc:
        raise PipelineError("link", str(exc))
    tracklets, singletons = linker.tracklets_, linker.singletons_

    if len(tracklets) < cfg.num_students:
        raise PipelineError(
            "cluster", f"only {len(tracklets)} tracklets for {cfg.num_students} "
            "identities; session too sparse to cluster")
    try:
        features = np.stack([t.feature for t in tracklets])
        dendrogram = ward_linkage(features)
        tracklet_labels = cut_dendrogram(dendrogram, cfg.num_students)
        model = train_singleton_classifier(features, tracklet_labels, cfg.classifier,
                                           num_classes=cfg.num_students)
        single_emb = (np.stack([detections[i].embedding for i in singletons])
                      if singletons else np.zeros((0, cfg.embedding_dim)))
        singleton_labels = assign_singletons(model, single_emb)
    except ValidationError as exc:
        raise PipelineError("cluster", str(exc))

    detection_labels = np.full(len(detections), -1, dtype=np.int64)
    for t, label in zip(tracklets, tracklet_labels):
        detection_labels[list(t.members)] = label
    detection_labels[singletons] = singleton_labels
    if (detection_labels < 0).any():
        raise PipelineError("cluster", "some detections received no identity")
    clusters = build_clusters(tracklets, tracklet_labels, singletons,
                              singleton_labels, detections, cfg.num_students)

    try:
        fixations = detect_fixations(bundle.gaze, cfg.fixation.dispersion_px,
                                     cfg.fixation.min_duration_ms)
        fixations = attribute_fixations(
            fixations, detections, detection_labels, cfg.fps,
            cfg.gaze_offset_us, frame_count, cfg.attention)
    except ValidationError as exc:
        raise PipelineError("fixation", str(exc))

    flows = None
    shift_intervals: list[tuple[int, int]] = []
    if bundle.frame_paths:
        try:
            frames = load_frames(bundle)
            flows = flow_sequence(frames, cfg.motion, jobs=jobs)
            shift_intervals = detect_gaze_shifts(flows, cfg.motion.shift_magnitude_px)
            fixations = validate_fixations(fixations, shift_intervals, cfg.fps,
                                           cfg.gaze_offset_us, frame_count)
        except ValidationError as exc:
            raise PipelineError("motion", str(exc))

    report_fixations = [f for f in fixations if f.motion_valid] if motion_valid_only \
        else fixations
    meta: dict[str, object] = {
        "config": config_to_flat(cfg),
        "inputs": dict(input_hashes or {}),
        "motion_validated": bool(bundle.frame_paths) and motion_valid_only,
        "n_motion_invalid": sum(1 for f in fixations if not f.motion_valid),
    }
    if session_id is not None:
        meta["session"] = session_id
    genders = {c.label: c.gender for c in clusters}
    try:
        report = build_attention_map(
            report_fixations, detections, detection_labels, genders,
            cfg.num_students, frame_count, cfg.fps, cfg.gaze_offset_us, meta)
    except ValidationError as exc:
        raise PipelineError("attention", str(exc))

    margins = None
    if isinstance(model, NearestCentroidClassifier) and len(singletons) > 0:
        margins = model.confidence_margin(single_emb)
    artifacts = {
        "tracklets.jsonl": ingest.render_tracklets(tracklets, len(detections)),
        "clusters.json": ingest.render_clusters(
            tracklet_labels, singletons, singleton_labels,
            [c.centroid for c in clusters], margins),
        "fixations.csv": ingest.render_fixations(fixations, cfg.fps,
                                                 cfg.gaze_offset_us, frame_count),
        "report.json": ingest.render_report_json(report),
        "report.csv": ingest.render_report_csv(report),
        "timeline.csv": ingest.render_timeline_csv(report),
        "timeline.svg": ingest.render_timeline_svg(report),
    }
    if flows is not None:
        artifacts["flow.csv"] = ingest.render_flow(flows)
    return SessionResult(
        bundle=bundle, tracklets=tracklets, singletons=singletons,
        tracklet_labels=tracklet_labels, singleton_labels=singleton_labels,
        detection_labels=detection_labels, clusters=clusters, fixations=fixations,
        flows=flows, shift_intervals=shift_intervals, report=report,
        artifacts={k: v.encode("utf-8") for k, v in artifacts.items()})


def run_pipeline(bundle_dir: Path, out_dir: Path, config: SessionConfig | None = None,
                 overrides=(), jobs: int = 1, motion_valid_only: bool = False,
                 session_id: str | None = None) -> SessionResult:
    """Load a bundle directory, run all stages, write artifacts to out_dir."""
    bundle_dir = Path(bundle_dir)
    bundle = load_bundle(bundle_dir, config, overrides)
    result = run_session(
        bundle, jobs=jobs, motion_valid_only=motion_valid_only,
        session_id=session_id if session_id is not None else bundle_dir.name,
        input_hashes=_input_hashes(bundle_dir, bundle))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, data in result.artifacts.items():
        (out_dir / name).write_bytes(data)
    return result
