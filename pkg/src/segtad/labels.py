"""Annotation algebra: tIoU, segment/frame label transforms, proposal targets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

Segment = tuple[float, float]


class AnnotationError(ValueError):
    pass


@dataclass
class ActionAnnotation:
    video_id: str
    duration: float
    actions: list[tuple[float, float, int]] = field(default_factory=list)
    subset: str = "training"

    def __post_init__(self) -> None:
        for ts, te, c in self.actions:
            if not (0.0 <= ts < te <= self.duration):
                raise AnnotationError(
                    f"{self.video_id}: action ({ts}, {te}, {c}) outside [0, {self.duration}] or empty"
                )


@dataclass
class FrameLabels:
    b: np.ndarray
    beta_s: np.ndarray
    beta_e: np.ndarray

    @property
    def T(self) -> int:
        return len(self.b)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FrameLabels):
            return NotImplemented
        return (
            np.array_equal(self.b, other.b)
            and np.array_equal(self.beta_s, other.beta_s)
            and np.array_equal(self.beta_e, other.beta_e)
        )


@dataclass
class ProposalLabels:
    h_reg: np.ndarray
    h_cls: np.ndarray


def tiou(a: Segment, b: Segment) -> float:
    if a[0] >= a[1] or b[0] >= b[1]:
        raise AnnotationError(f"degenerate segment in tiou: {a}, {b}")
    inter = min(a[1], b[1]) - max(a[0], b[0])
    if inter <= 0:
        return 0.0
    union = max(a[1], b[1]) - min(a[0], b[0])
    return inter / union


def tiou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise tIoU between rows of two (N, 2) segment arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if np.any(a[:, 0] >= a[:, 1]) or np.any(b[:, 0] >= b[:, 1]):
        raise AnnotationError("degenerate segment in tiou_matrix")
    inter = np.minimum(a[:, None, 1], b[None, :, 1]) - np.maximum(a[:, None, 0], b[None, :, 0])
    inter = np.maximum(inter, 0.0)
    union = (a[:, 1] - a[:, 0])[:, None] + (b[:, 1] - b[:, 0])[None, :] - inter
    return inter / union


def check_non_overlapping(actions: Sequence[tuple[float, float, int]]) -> None:
    ordered = sorted(actions, key=lambda x: (x[0], x[1]))
    for prev, cur in zip(ordered, ordered[1:]):
        if cur[0] < prev[1]:
            raise AnnotationError(f"overlapping actions: {prev} and {cur}")


def segments_to_frame_labels(ann: ActionAnnotation, T: int) -> FrameLabels:
    """Label each frame by the action whose half-open span holds its center."""
    check_non_overlapping(ann.actions)
    centers = (np.arange(T) + 0.5) * ann.duration / T
    b = np.zeros(T, dtype=np.int64)
    beta_s = np.zeros(T, dtype=np.int64)
    beta_e = np.zeros(T, dtype=np.int64)
    for ts, te, c in ann.actions:
        inside = np.flatnonzero((centers >= ts) & (centers < te))
        if inside.size == 0:
            continue
        b[inside] = c
        beta_s[inside[0]] = 1
        beta_e[inside[-1]] = 1
    return FrameLabels(b, beta_s, beta_e)


def frame_labels_to_segments(
    labels: FrameLabels, duration: float, video_id: str = ""
) -> ActionAnnotation:
    """Turn runs of one nonzero class back into timed actions.

    A run also ends where a boundary flag marks the end of one instance and
    the start of the next, so touching same-class actions stay separate.
    """
    b, beta_s, beta_e = labels.b, labels.beta_s, labels.beta_e
    T = len(b)
    actions: list[tuple[float, float, int]] = []
    start = None
    for t in range(T + 1):
        if start is not None:
            ends = (
                t == T
                or b[t] != b[start]
                or (beta_s[t] == 1 and t != start)
                or beta_e[t - 1] == 1
            )
            if ends:
                end = duration if t == T else t * duration / T  # t*d/T can round past d
                actions.append((start * duration / T, end, int(b[start])))
                start = None
        if start is None and t < T and b[t] != 0:
            start = t
    return ActionAnnotation(video_id, duration, actions)


def compile_proposal_labels(
    proposals: Sequence[Segment] | np.ndarray, ann: ActionAnnotation, tau: float = 0.5
) -> ProposalLabels:
    """Regression target = best tIoU with any ground truth; class = target > tau."""
    props = np.asarray(proposals, dtype=np.float64).reshape(-1, 2)
    if not ann.actions:
        h_reg = np.zeros(len(props))
    else:
        gt = np.array([[ts, te] for ts, te, _ in ann.actions])
        h_reg = tiou_matrix(props, gt).max(axis=1)
    return ProposalLabels(h_reg, (h_reg > tau).astype(np.int64))


# -- ActivityNet-style JSON ---------------------------------------------------


def load_annotations(path: str | Path, class_ids: dict[str, int] | None = None) -> tuple[list[ActionAnnotation], dict[str, int]]:
    """Read an ActivityNet ``database`` file.

    Without a manifest, class ids are assigned to the sorted unique labels.
    """
    raw = json.loads(Path(path).read_text())
    database = raw["database"] if "database" in raw else raw
    if class_ids is None:
        names = sorted({a["label"] for v in database.values() for a in v.get("annotations", [])})
        class_ids = {name: i + 1 for i, name in enumerate(names)}
    unknown = sorted(
        {a["label"] for v in database.values() for a in v.get("annotations", [])} - set(class_ids)
    )
    if unknown:
        raise AnnotationError(f"unknown labels: {unknown}")
    anns = []
    for vid in sorted(database):
        v = database[vid]
        actions = [
            (float(a["segment"][0]), float(a["segment"][1]), class_ids[a["label"]])
            for a in v.get("annotations", [])
        ]
        anns.append(ActionAnnotation(vid, float(v["duration"]), actions, v.get("subset", "training")))
    return anns, class_ids


def dump_annotations(anns: Sequence[ActionAnnotation], class_ids: dict[str, int], path: str | Path) -> None:
    names = {i: n for n, i in class_ids.items()}
    database = {
        a.video_id: {
            "duration": a.duration,
            "subset": a.subset,
            "annotations": [{"segment": [ts, te], "label": names[c]} for ts, te, c in a.actions],
        }
        for a in anns
    }
    Path(path).write_text(json.dumps({"database": database}, indent=1, sort_keys=True))


def load_class_manifest(path: str | Path) -> dict[str, int]:
    """``{"background": 0, "<name>": 1, ...}`` -> name to id for the D classes."""
    raw = json.loads(Path(path).read_text())
    ids = {name: int(i) for name, i in raw.items() if int(i) != 0}
    if sorted(ids.values()) != list(range(1, len(ids) + 1)):
        raise AnnotationError(f"{path}: class ids must be 1..D")
    return ids


def dump_class_manifest(class_ids: dict[str, int], path: str | Path) -> None:
    manifest = {"background": 0, **dict(sorted(class_ids.items(), key=lambda kv: kv[1]))}
    Path(path).write_text(json.dumps(manifest, indent=1))
