import inspect
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import random_grid_annotation
from segtad.labels import (
    ActionAnnotation,
    AnnotationError,
    FrameLabels,
    compile_proposal_labels,
    dump_annotations,
    dump_class_manifest,
    frame_labels_to_segments,
    load_annotations,
    load_class_manifest,
    segments_to_frame_labels,
    tiou,
    tiou_matrix,
)


def test_tiou_examples():
    assert tiou((0, 10), (0, 10)) == 1.0
    assert tiou((0, 5), (10, 20)) == 0.0
    assert tiou((0, 10), (5, 15)) == pytest.approx(1 / 3, abs=1e-6)
    with pytest.raises(AnnotationError):
        tiou((3, 3), (0, 1))


segment = st.tuples(st.floats(-100, 100), st.floats(0.01, 50)).map(lambda p: (p[0], p[0] + p[1]))


@given(segment, segment)
def test_tiou_symmetric_and_bounded(a, b):
    assert tiou(a, b) == tiou(b, a)
    assert 0.0 <= tiou(a, b) <= 1.0
    assert tiou_matrix([a], [b])[0, 0] == pytest.approx(tiou(a, b), abs=1e-12)


def test_frame_labels_examples():
    empty = segments_to_frame_labels(ActionAnnotation("v", 10.0, []), 10)
    assert not empty.b.any() and not empty.beta_s.any() and not empty.beta_e.any()

    lab = segments_to_frame_labels(ActionAnnotation("v", 10.0, [(2.0, 5.0, 3)]), 10)
    assert lab.b.tolist() == [0, 0, 3, 3, 3, 0, 0, 0, 0, 0]
    assert np.flatnonzero(lab.beta_s).tolist() == [2]
    assert np.flatnonzero(lab.beta_e).tolist() == [4]

    full = segments_to_frame_labels(ActionAnnotation("v", 7.0, [(0.0, 7.0, 2)]), 14)
    assert (full.b == 2).all() and full.beta_s[0] == 1 and full.beta_e[-1] == 1


def test_boundary_flags_only_on_action_frames():
    rng = np.random.default_rng(0)
    for _ in range(50):
        lab = segments_to_frame_labels(random_grid_annotation(rng, 30, 4, 15.0), 30)
        flagged = (lab.beta_s == 1) | (lab.beta_e == 1)
        assert (lab.b[flagged] != 0).all()


def test_overlapping_actions_rejected_with_pair():
    ann = ActionAnnotation("v", 10.0, [(1.0, 4.0, 1), (3.0, 6.0, 2)])
    with pytest.raises(AnnotationError, match=r"\(1.0, 4.0, 1\).*\(3.0, 6.0, 2\)"):
        segments_to_frame_labels(ann, 10)


def test_annotation_bounds_checked():
    with pytest.raises(AnnotationError):
        ActionAnnotation("v", 5.0, [(4.0, 6.0, 1)])


def test_segments_from_frames_examples():
    none = FrameLabels(np.zeros(6, int), np.zeros(6, int), np.zeros(6, int))
    assert frame_labels_to_segments(none, 6.0).actions == []
    b = np.array([0, 0, 3, 3, 3, 0, 0, 0, 0, 0])
    bs, be = np.zeros(10, int), np.zeros(10, int)
    bs[2], be[4] = 1, 1
    assert frame_labels_to_segments(FrameLabels(b, bs, be), 10.0).actions == [(2.0, 5.0, 3)]


def test_touching_same_class_actions_stay_separate():
    ann = ActionAnnotation("v", 8.0, [(1.0, 3.0, 2), (3.0, 6.0, 2)])
    back = frame_labels_to_segments(segments_to_frame_labels(ann, 8), 8.0)
    assert back.actions == ann.actions


def test_round_trip_is_identity_on_grid():
    rng = np.random.default_rng(1)
    for _ in range(300):
        T = int(rng.integers(1, 40))
        duration = float(rng.uniform(1, 100))
        ann = random_grid_annotation(rng, T, 5, duration)
        lab = segments_to_frame_labels(ann, T)
        back = frame_labels_to_segments(lab, duration)
        assert segments_to_frame_labels(back, T) == lab
        np.testing.assert_allclose(np.array(back.actions).reshape(-1, 3), np.array(ann.actions).reshape(-1, 3), atol=1e-9)


def test_no_hidden_hyperparameters():
    assert list(inspect.signature(segments_to_frame_labels).parameters) == ["ann", "T"]


def test_proposal_label_examples():
    ann = ActionAnnotation("v", 40.0, [(5.0, 15.0, 1), (20.0, 30.0, 2)])
    pl = compile_proposal_labels([(0.0, 10.0), (20.0, 30.0)], ann)
    assert pl.h_reg[0] == pytest.approx(1 / 3)
    assert pl.h_reg[1] == 1.0
    assert pl.h_cls.tolist() == [0, 1]
    empty = compile_proposal_labels([(0.0, 10.0), (3.0, 4.0)], ActionAnnotation("v", 40.0, []))
    assert not empty.h_reg.any() and not empty.h_cls.any()


def test_proposal_labels_threshold_is_strict():
    ann = ActionAnnotation("v", 10.0, [(0.0, 4.0, 1)])
    pl = compile_proposal_labels([(0.0, 8.0), (0.0, 4.0)], ann, tau=0.5)
    assert pl.h_reg[0] == 0.5 and pl.h_cls[0] == 0


def test_annotation_json_round_trip(tmp_path):
    anns = [
        ActionAnnotation("b", 10.0, [(1.0, 2.0, 2)], "validation"),
        ActionAnnotation("a", 5.0, [(0.0, 5.0, 1)]),
    ]
    ids = {"jump": 1, "run": 2}
    dump_annotations(anns, ids, tmp_path / "ann.json")
    dump_class_manifest(ids, tmp_path / "classes.json")
    assert json.loads((tmp_path / "classes.json").read_text()) == {"background": 0, "jump": 1, "run": 2}
    manifest = load_class_manifest(tmp_path / "classes.json")
    loaded, got_ids = load_annotations(tmp_path / "ann.json", manifest)
    assert got_ids == ids
    assert [a.video_id for a in loaded] == ["a", "b"]
    assert loaded[1].actions == [(1.0, 2.0, 2)] and loaded[1].subset == "validation"
    # without a manifest ids follow sorted label names
    _, inferred = load_annotations(tmp_path / "ann.json")
    assert inferred == ids


def test_unknown_label_rejected(tmp_path):
    dump_annotations([ActionAnnotation("a", 5.0, [(0.0, 1.0, 1)])], {"x": 1}, tmp_path / "ann.json")
    with pytest.raises(AnnotationError, match="unknown labels"):
        load_annotations(tmp_path / "ann.json", {"y": 1})
