"""Command line interface.

Each pipeline stage is a subcommand over a session bundle directory
(detections.jsonl + gaze.csv + optional config.cfg and frames/), plus
``run`` for the full pipeline, ``synth`` for generating test bundles,
``evaluate`` for scoring against ground truth and ``rank`` for the
multi-session attention table.

Exit codes: 0 success, 1 input parse error, 2 configuration error,
3 pipeline invariant violation.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__, ingest, synth
from .cluster import confusion_matrix
from .attention import rank_sessions
from .config import load_config
from .model import ConfigError, ParseError, PipelineError, ValidationError
from .motion import detect_gaze_shifts, flow_sequence
from .pipeline import run_pipeline, run_session


def _bundle_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("bundle", type=Path, help="session bundle directory")
    parser.add_argument("--out", type=Path, default=None,
                        help="artifact directory (default: BUNDLE/artifacts)")
    parser.add_argument("--config", type=Path, default=None,
                        help="config file (default: BUNDLE/config.cfg)")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="config override, repeatable")


def _resolve(args) -> tuple[Path, Path, object]:
    out_dir = args.out if args.out is not None else args.bundle / "artifacts"
    config = None
    if args.config is not None or args.overrides:
        cfg_path = args.config
        if cfg_path is None and (args.bundle / "config.cfg").is_file():
            cfg_path = args.bundle / "config.cfg"
        config = load_config(cfg_path, args.overrides)
    return args.bundle, out_dir, config


def cmd_synth(args) -> int:
    if args.script is not None:
        script = synth.script_from_json(args.script.read_text())
    else:
        script = synth.PRESETS[args.preset](args.seed)
    session = synth.generate_session(script)
    synth.write_bundle(session, args.out)
    n_frames = len(session.frames) if session.frames is not None else 0
    print(f"wrote bundle to {args.out}: {len(session.detections.detections)} "
          f"detections, {len(session.gaze)} gaze samples, {n_frames} frames")
    return 0


def cmd_run(args) -> int:
    bundle_dir, out_dir, config = _resolve(args)
    result = run_pipeline(bundle_dir, out_dir, config, (), jobs=args.jobs,
                          motion_valid_only=args.validate_fixations)
    report = result.report
    print(f"linked {len(result.tracklets)} tracklets "
          f"(+{len(result.singletons)} singletons), "
          f"{report.total_fixations} fixations")
    for ident in report.identities:
        share = "-" if ident.fixation_share is None else f"{ident.fixation_share:.3f}"
        print(f"  id {ident.label} ({ident.gender}): share {share}, "
              f"{ident.frames_visible} frames visible")
    print(f"wrote artifacts to {out_dir}")
    return 0


def cmd_link(args) -> int:
    bundle_dir, out_dir, config = _resolve(args)
    bundle = ingest.load_bundle(bundle_dir, config)
    from .tracklink import TrackletLinker
    linker = TrackletLinker.from_config(bundle.config.linking)
    linker.fit(list(bundle.detections.detections))
    out_dir.mkdir(parents=True, exist_ok=True)
    text = ingest.render_tracklets(linker.tracklets_, len(bundle.detections.detections))
    (out_dir / "tracklets.jsonl").write_text(text)
    print(f"linked {len(linker.tracklets_)} tracklets, "
          f"{len(linker.singletons_)} singletons -> {out_dir / 'tracklets.jsonl'}")
    return 0


def cmd_cluster(args) -> int:
    bundle_dir, out_dir, config = _resolve(args)
    bundle = ingest.load_bundle(bundle_dir, config)
    cfg = bundle.config
    tracklets_path = out_dir / "tracklets.jsonl"
    if not tracklets_path.is_file():
        raise ParseError(f"missing input file: {tracklets_path} (run link first)")
    tracklets, n_detections = ingest.parse_tracklets(
        tracklets_path.read_text().splitlines())
    from .cluster import (NearestCentroidClassifier, assign_singletons,
                          cut_dendrogram, train_singleton_classifier, ward_linkage)
    try:
        features = np.stack([t.feature for t in tracklets])
        labels = cut_dendrogram(ward_linkage(features), cfg.num_students)
        model = train_singleton_classifier(features, labels, cfg.classifier,
                                           num_classes=cfg.num_students)
        in_tracklets = {i for t in tracklets for i in t.members}
        singletons = [i for i in range(n_detections) if i not in in_tracklets]
        detections = bundle.detections.detections
        single_emb = (np.stack([detections[i].embedding for i in singletons])
                      if singletons else np.zeros((0, cfg.embedding_dim)))
        singleton_labels = assign_singletons(model, single_emb)
    except ValidationError as exc:
        raise PipelineError("cluster", str(exc))
    centroids = []
    for label in range(cfg.num_students):
        members = features[labels == label]
        if members.shape[0] == 0:
            raise PipelineError("cluster", f"identity {label} has no tracklets")
        mean = members.mean(axis=0)
        centroids.append(mean / np.linalg.norm(mean))
    margins = (model.confidence_margin(single_emb)
               if isinstance(model, NearestCentroidClassifier) and singletons else None)
    (out_dir / "clusters.json").write_text(ingest.render_clusters(
        labels, singletons, singleton_labels, centroids, margins))
    print(f"clustered {len(tracklets)} tracklets into {cfg.num_students} identities "
          f"-> {out_dir / 'clusters.json'}")
    return 0


def cmd_fixations(args) -> int:
    bundle_dir, out_dir, config = _resolve(args)
    bundle = ingest.load_bundle(bundle_dir, config)
    cfg = bundle.config
    from .fixation import detect_fixations
    events = detect_fixations(bundle.gaze, cfg.fixation.dispersion_px,
                              cfg.fixation.min_duration_ms)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "fixations.csv").write_text(ingest.render_fixations(
        events, cfg.fps, cfg.gaze_offset_us, bundle.detections.frame_count))
    print(f"detected {len(events)} fixations -> {out_dir / 'fixations.csv'}")
    return 0


def cmd_attention(args) -> int:
    bundle_dir, out_dir, config = _resolve(args)
    result = run_pipeline(bundle_dir, out_dir, config, (), jobs=args.jobs,
                          motion_valid_only=args.validate_fixations)
    report = result.report
    print(f"attention report over {report.total_fixations} fixations "
          f"-> {out_dir / 'report.json'}")
    return 0


def cmd_motion(args) -> int:
    bundle_dir, out_dir, config = _resolve(args)
    bundle = ingest.load_bundle(bundle_dir, config)
    if not bundle.frame_paths:
        raise ParseError(f"bundle has no frames/ directory: {bundle_dir}")
    frames = ingest.load_frames(bundle)
    flows = flow_sequence(frames, bundle.config.motion, jobs=args.jobs)
    shifts = detect_gaze_shifts(flows, bundle.config.motion.shift_magnitude_px)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "flow.csv").write_text(ingest.render_flow(flows))
    print(f"computed flow for {len(flows)} frame pairs, "
          f"{len(shifts)} gaze shifts -> {out_dir / 'flow.csv'}")
    for s, e in shifts:
        print(f"  shift frames [{s}, {e}]")
    return 0


def cmd_report(args) -> int:
    report_path = args.artifacts / "report.json"
    if not report_path.is_file():
        raise ParseError(f"missing input file: {report_path} (run attention first)")
    report = ingest.parse_report(report_path.read_text())
    renderers = {"csv": ("report.csv", ingest.render_report_csv),
                 "timeline": ("timeline.csv", ingest.render_timeline_csv),
                 "svg": ("timeline.svg", ingest.render_timeline_svg)}
    name, render = renderers[args.format]
    (args.artifacts / name).write_text(render(report))
    print(f"rendered {args.artifacts / name}")
    return 0


def cmd_evaluate(args) -> int:
    bundle_dir = args.bundle
    out_dir = args.out if args.out is not None else bundle_dir / "artifacts"
    truth_path = bundle_dir / "ground_truth.json"
    if not truth_path.is_file():
        raise ParseError(f"missing input file: {truth_path}")
    truth = synth.truth_from_json(truth_path.read_text())
    tracklets_path = out_dir / "tracklets.jsonl"
    clusters_path = out_dir / "clusters.json"
    for path in (tracklets_path, clusters_path):
        if not path.is_file():
            raise ParseError(f"missing input file: {path} (run the pipeline first)")
    tracklets, n_detections = ingest.parse_tracklets(
        tracklets_path.read_text().splitlines())
    clusters = ingest.parse_clusters(clusters_path.read_text())
    if n_detections != len(truth.identities):
        raise PipelineError("evaluate", f"ground truth covers {len(truth.identities)} "
                                        f"detections, artifacts {n_detections}")
    predicted = np.full(n_detections, -1, dtype=np.int64)
    for t, label in zip(tracklets, clusters["labels"]):
        predicted[list(t.members)] = int(label)
    for det, label in zip(clusters["singleton_members"], clusters["singleton_labels"]):
        predicted[int(det)] = int(label)
    if (predicted < 0).any():
        raise PipelineError("evaluate", "artifacts do not label every detection")
    matrix, accuracy = confusion_matrix(predicted, np.asarray(truth.identities))
    print("confusion matrix (rows: truth, columns: aligned prediction):")
    for row in matrix:
        print("  " + " ".join(f"{v:6d}" for v in row))
    print(f"accuracy={accuracy:.6f}")
    payload = {"matrix": matrix.tolist(), "accuracy": round(accuracy, 6),
               "n": int(n_detections)}
    import json
    (out_dir / "evaluation.json").write_text(
        json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n")
    return 0


def cmd_rank(args) -> int:
    reports = [ingest.parse_report(path.read_text()) for path in args.reports]
    rows = rank_sessions(reports)
    lines = []
    for session, shares in rows:
        lines.append(",".join([session] + [f"{s:.6f}" for s in shares]))
    text = "\n".join(lines) + "\n"
    if args.out is not None:
        args.out.write_text(text)
        print(f"wrote ranking for {len(rows)} sessions to {args.out}")
    print("session ranking (shares descending):")
    for session, shares in rows:
        print(f"  {session}: " + " ".join(f"{s:.3f}" for s in shares))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gazefocus",
        description="Reconstruct per-student teacher attention from "
                    "eye-tracker session bundles.")
    parser.add_argument("--version", action="version", version=f"gazefocus {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic session bundle")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--preset", choices=sorted(synth.PRESETS))
    group.add_argument("--script", type=Path, help="script JSON file")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="run the full pipeline over a bundle")
    _bundle_args(p)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--validate-fixations", action="store_true",
                   help="report only over motion-valid fixations")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("link", help="link detections into tracklets")
    _bundle_args(p)
    p.set_defaults(func=cmd_link)

    p = sub.add_parser("cluster", help="cluster tracklets into identities")
    _bundle_args(p)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("fixations", help="detect gaze fixations")
    _bundle_args(p)
    p.set_defaults(func=cmd_fixations)

    p = sub.add_parser("attention", help="build the attention report")
    _bundle_args(p)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--validate-fixations", action="store_true")
    p.set_defaults(func=cmd_attention)

    p = sub.add_parser("motion", help="estimate camera motion from frames")
    _bundle_args(p)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_motion)

    p = sub.add_parser("report", help="render report formats from report.json")
    p.add_argument("artifacts", type=Path, help="artifact directory")
    p.add_argument("--format", choices=["csv", "timeline", "svg"], default="csv")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("evaluate", help="score artifacts against ground truth")
    p.add_argument("bundle", type=Path)
    p.add_argument("--out", type=Path, default=None,
                   help="artifact directory (default: BUNDLE/artifacts)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("rank", help="rank identity shares across sessions")
    p.add_argument("reports", type=Path, nargs="+", help="report.json files")
    p.add_argument("--out", type=Path, default=None, help="ranking.csv path")
    p.set_defaults(func=cmd_rank)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
