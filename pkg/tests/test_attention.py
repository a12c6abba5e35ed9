"""Fixation-to-identity attribution, gender aggregation and report building."""

import numpy as np
import pytest

from gazefocus.attention import (assign_fixation, attribute_fixations, body_region,
                                 build_attention_map, gender_attention,
                                 gender_majority, rank_sessions)
from gazefocus.model import (AttentionConfig, BBox, Detection, FixationEvent,
                             ValidationError)


def event(cx, cy, start_us=0, end_us=200_000, target=None):
    return FixationEvent(start_us=start_us, end_us=end_us, cx=float(cx),
                         cy=float(cy), dispersion=5.0, sample_count=10,
                         target=target)


def det(frame, box):
    emb = np.zeros(4)
    emb[frame % 4] = 1.0
    return Detection(frame=frame, ts_us=frame * 40_000, bbox=box, embedding=emb)


class TestBodyRegion:
    def test_worked_example(self):
        region = body_region(BBox(100, 100, 50, 40), widen=1.5, extend=4.0)
        assert region.x == 87.5
        assert region.y == 100.0
        assert region.w == 75.0
        assert region.h == 200.0

    def test_keeps_face_top_and_center(self):
        face = BBox(10, 20, 30, 40)
        region = body_region(face, widen=2.0, extend=1.0)
        assert region.y == face.y
        assert region.center[0] == face.center[0]
        assert region.h == 2 * face.h


class TestAssignFixation:
    CFG = AttentionConfig()

    def test_face_containment_wins(self):
        cands = [(BBox(90, 90, 40, 40), 0), (BBox(300, 300, 40, 40), 1)]
        assert assign_fixation(event(100, 100), cands, self.CFG) == 0

    def test_body_region_fallback(self):
        # below the face but inside the extended torso box
        cands = [(BBox(90, 40, 40, 30), 2)]
        assert assign_fixation(event(100, 120), cands, self.CFG) == 2

    def test_nearest_center_within_radius(self):
        cands = [(BBox(0, 0, 20, 20), 0), (BBox(500, 480, 20, 20), 1)]
        # 80 px right of candidate 1's center, outside both boxes and bodies
        assert assign_fixation(event(590, 490), cands, self.CFG) == 1

    def test_beyond_radius_unassigned(self):
        cands = [(BBox(0, 0, 20, 20), 0)]
        assert assign_fixation(event(400, 10), cands, self.CFG) is None

    def test_distance_tie_takes_lower_label(self):
        cands = [(BBox(150, 300, 20, 20), 3), (BBox(50, 300, 20, 20), 1)]
        # equidistant from both centers, outside both body regions
        assert assign_fixation(event(110, 320), cands, self.CFG) == 1

    def test_no_candidates(self):
        assert assign_fixation(event(10, 10), [], self.CFG) is None


class TestAttributeFixations:
    def test_uses_mid_frame_candidates(self):
        # fixation spans frames 0..5 at 25 fps, so only frame 2 matters
        detections = [det(2, BBox(90, 90, 40, 40)), det(3, BBox(400, 400, 40, 40))]
        out = attribute_fixations([event(100, 100)], detections, [7, 8], fps=25.0)
        assert [f.target for f in out] == [7]
        assert out[0].start_us == 0 and out[0].sample_count == 10

    def test_missing_mid_frame_gives_none(self):
        detections = [det(9, BBox(90, 90, 40, 40))]
        out = attribute_fixations([event(100, 100)], detections, [1], fps=25.0)
        assert out[0].target is None

    def test_misaligned_labels_rejected(self):
        with pytest.raises(ValidationError, match="must align"):
            attribute_fixations([], [det(0, BBox(0, 0, 5, 5))], [], fps=25.0)


class TestGenderMajority:
    def test_score_pair_votes(self):
        pairs = [(1.0, 0.0)] * 960 + [(0.0, 1.0)] * 946
        assert gender_majority(pairs) == ("male", 960, 946)
        pairs = [(0.0, 1.0)] * 3870 + [(1.0, 0.0)] * 879
        assert gender_majority(pairs) == ("female", 879, 3870)

    def test_exact_score_tie_abstains(self):
        assert gender_majority([(0.5, 0.5), (0.9, 0.1)]) == ("male", 1, 0)

    def test_equal_votes_unknown(self):
        assert gender_majority([(1, 0), (0, 1)]) == ("unknown", 1, 1)
        assert gender_majority([]) == ("unknown", 0, 0)
        assert gender_majority([None, (0.2, 0.8)]) == ("female", 0, 1)


class TestGenderAttention:
    def test_share_split(self):
        rows = gender_attention([("male", 10), ("male", 20), ("female", 30),
                                 ("female", 40)])
        by = {r.gender: r for r in rows}
        assert by["male"].fixation_count == 30
        assert by["male"].share == pytest.approx(0.3)
        assert by["female"].share == pytest.approx(0.7)
        assert by["unknown"].fixation_count == 0
        assert by["unknown"].share == 0.0

    def test_no_fixations(self):
        rows = gender_attention([("male", 0), ("unknown", 0)])
        assert all(r.share is None for r in rows)

    def test_bad_gender_rejected(self):
        with pytest.raises(ValidationError, match="unknown gender"):
            gender_attention([("other", 3)])


def make_report(counts, session="s"):
    """Report over pre-attributed fixations with the given per-label counts."""
    events, frame = [], 0
    for label, n in counts.items():
        for _ in range(n):
            start = frame * 40_000
            events.append(FixationEvent(start_us=start, end_us=start + 200_000,
                                        cx=100.0, cy=100.0, dispersion=4.0,
                                        sample_count=11, target=label))
            frame += 10
    genders = {k: ("male" if k % 2 == 0 else "female") for k in counts}
    return build_attention_map(events, [], [], genders,
                               num_students=len(counts), frame_count=frame + 20,
                               fps=25.0, meta={"session": session})


class TestBuildAttentionMap:
    def test_share_values(self):
        report = make_report({0: 10, 1: 6, 2: 3, 3: 1})
        shares = {r.label: r.fixation_share for r in report.identities}
        assert shares == {0: pytest.approx(0.5), 1: pytest.approx(0.3),
                          2: pytest.approx(0.15), 3: pytest.approx(0.05)}
        assert abs(sum(shares.values()) - 1.0) <= 1e-9
        assert report.unassigned_count == 0
        assert report.total_fixations == 20

    def test_duration_share_sums_to_one(self):
        report = make_report({0: 4, 1: 2})
        assert sum(r.duration_share for r in report.identities) == pytest.approx(1.0)

    def test_gender_rows_follow_identity_counts(self):
        report = make_report({0: 3, 1: 1})
        by = {g.gender: g for g in report.genders}
        assert by["male"].fixation_count == 3
        assert by["female"].share == pytest.approx(0.25)

    def test_earlier_fixation_keeps_frame(self):
        early = event(100, 100, start_us=0, end_us=200_000, target=0)
        late = event(100, 100, start_us=40_000, end_us=160_000, target=1)
        report = build_attention_map([early, late], [], [], {0: "male", 1: "male"},
                                     num_students=2, frame_count=10, fps=25.0)
        row = report.timeline[2]
        assert row.has_fixation and row.target == 0

    def test_unassigned_bucket(self):
        report = build_attention_map([event(1, 1, target=None)], [], [],
                                     {0: "male"}, num_students=1,
                                     frame_count=10, fps=25.0)
        assert report.unassigned_count == 1
        assert report.unassigned_share == 1.0
        assert report.identities[0].fixation_count == 0
        assert report.identities[0].fixation_share == 0.0
        assert report.timeline[2].has_fixation
        assert report.timeline[2].target is None

    def test_empty_session(self):
        report = build_attention_map([], [], [], {0: "male"}, num_students=1,
                                     frame_count=5, fps=25.0)
        assert report.identities[0].fixation_share is None
        assert report.unassigned_share is None
        assert all(not row.has_fixation for row in report.timeline)

    def test_frames_visible_and_timeline_visibility(self):
        dets = [det(0, BBox(0, 0, 10, 10)), det(3, BBox(0, 0, 10, 10)),
                det(3, BBox(50, 0, 10, 10))]
        report = build_attention_map([], dets, [0, 0, 1], {0: "female"},
                                     num_students=2, frame_count=6, fps=25.0)
        assert report.identities[0].frames_visible == 2
        assert report.identities[1].frames_visible == 1
        assert [row.visible for row in report.timeline] == \
            [(0,), (), (), (0, 1), (), ()]

    def test_out_of_range_label_rejected(self):
        with pytest.raises(ValidationError, match="out of range"):
            build_attention_map([], [det(0, BBox(0, 0, 5, 5))], [4], {},
                                num_students=2, frame_count=3, fps=25.0)
        with pytest.raises(ValidationError, match="out of range"):
            build_attention_map([event(1, 1, target=5)], [], [], {},
                                num_students=2, frame_count=3, fps=25.0)


class TestRankSessions:
    def test_descending_share_order(self):
        r1 = make_report({0: 1, 1: 6, 2: 3}, session="low")
        r2 = make_report({0: 10, 1: 6, 2: 3, 3: 1}, session="hi")
        ranked = rank_sessions([r1, r2])
        assert [name for name, _ in ranked] == ["low", "hi"]
        assert ranked[1][1] == [0.5, 0.3, 0.15, 0.05]
        for _, shares in ranked:
            assert shares == sorted(shares, reverse=True)

    def test_default_session_name(self):
        report = make_report({0: 2})
        report.meta.pop("session")
        assert rank_sessions([report])[0][0] == "session-0"

    def test_needs_one_report(self):
        with pytest.raises(ValidationError, match="at least one"):
            rank_sessions([])
