"""Detection mAP over tIoU thresholds 0.50:0.05:0.95 (ActivityNet style).

Two matching rules are available. ``"optimal"`` (the default) marks a
prediction as a true positive whenever it raises the size of a maximum
tIoU >= threshold matching between the predictions ranked so far and the
ground truth of its video, found with augmenting paths. ``"greedy"`` is the
official toolkit rule: a prediction takes its best-overlapping unmatched
ground truth if that overlap clears the threshold. The two differ only when
a higher-ranked prediction could have been matched elsewhere.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .labels import AnnotationError, tiou

THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))

Pred = tuple[str, float, float, float]  # video, start, end, score
GT = tuple[str, float, float]  # video, start, end


def interpolated_ap(tp: Sequence[bool], n_gt: int) -> float:
    """Area under the right-max interpolated precision/recall curve."""
    if n_gt == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    prec = ctp / (ctp + cfp)
    rec = ctp / n_gt
    mprec = np.concatenate([[0.0], prec, [0.0]])
    mrec = np.concatenate([[0.0], rec, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def _rank(predictions: Sequence[Pred]) -> list[Pred]:
    # stable: equal scores keep input order
    return sorted(predictions, key=lambda p: -p[3])


def _greedy_flags(preds: list[Pred], gts: dict[str, list[tuple[float, float]]], threshold: float) -> list[bool]:
    used: dict[str, set[int]] = defaultdict(set)
    flags = []
    for vid, s, e, _ in preds:
        best, best_j = -1.0, -1
        for j, g in enumerate(gts.get(vid, ())):
            if j in used[vid]:
                continue
            ov = tiou((s, e), g)
            if ov > best:
                best, best_j = ov, j
        hit = best_j >= 0 and best >= threshold
        if hit:
            used[vid].add(best_j)
        flags.append(hit)
    return flags


def _optimal_flags(preds: list[Pred], gts: dict[str, list[tuple[float, float]]], threshold: float) -> list[bool]:
    owner: dict[str, dict[int, int]] = defaultdict(dict)  # video -> gt index -> prediction rank
    adj: list[list[int]] = []
    flags = []

    def augment(p: int, vid: str, seen: set[int]) -> bool:
        for j in adj[p]:
            if j in seen:
                continue
            seen.add(j)
            holder = owner[vid].get(j)
            if holder is None or augment(holder, vid, seen):
                owner[vid][j] = p
                return True
        return False

    for rank, (vid, s, e, _) in enumerate(preds):
        adj.append([j for j, g in enumerate(gts.get(vid, ())) if tiou((s, e), g) >= threshold])
        flags.append(augment(rank, vid, set()))
    return flags


def average_precision(
    predictions: Sequence[Pred],
    ground_truth: Sequence[GT],
    threshold: float,
    matching: str = "optimal",
) -> float | None:
    """AP of one class. ``None`` when there is neither ground truth nor prediction."""
    gts: dict[str, list[tuple[float, float]]] = defaultdict(list)
    for vid, s, e in ground_truth:
        gts[vid].append((s, e))
    n_gt = len(ground_truth)
    if n_gt == 0:
        return 0.0 if predictions else None
    preds = _rank(predictions)
    if matching == "optimal":
        flags = _optimal_flags(preds, gts, threshold)
    elif matching == "greedy":
        flags = _greedy_flags(preds, gts, threshold)
    else:
        raise ValueError(f"unknown matching rule {matching!r}")
    return interpolated_ap(flags, n_gt)


@dataclass
class EvalReport:
    thresholds: list[float]
    mAP: list[float]
    average_mAP: float
    per_class: dict[str, list[float]] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "thresholds": self.thresholds,
            "mAP": self.mAP,
            "average_mAP": self.average_mAP,
            "per_class_AP": self.per_class,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_table(self) -> str:
        lines = ["tIoU    mAP"]
        lines += [f"{t:.2f}  {m:.4f}" for t, m in zip(self.thresholds, self.mAP)]
        lines.append(f"average mAP {self.average_mAP:.4f}")
        return "\n".join(lines)


def _load(obj: str | Path | dict) -> dict:
    if isinstance(obj, dict):
        return obj
    return json.loads(Path(obj).read_text())


def _as_results(raw: dict) -> dict:
    """``results`` of a submission; an annotation database counts as score-1 detections."""
    if "results" in raw:
        return raw["results"]
    if "database" in raw:
        return {
            vid: [{"segment": a["segment"], "label": a["label"], "score": 1.0} for a in v.get("annotations", [])]
            for vid, v in raw["database"].items()
        }
    raise AnnotationError("predictions have neither 'results' nor 'database'")


def evaluate(
    predictions: str | Path | dict,
    annotations: str | Path | dict,
    class_ids: dict[str, int] | None = None,
    thresholds: Sequence[float] = THRESHOLDS,
    subset: str | None = None,
    matching: str = "optimal",
) -> EvalReport:
    """Score ActivityNet-format predictions against an annotation database.

    mAP at each threshold averages per-class AP over the classes present in
    the ground truth. Classes with predictions but no ground truth report
    AP 0 in ``per_class`` and are left out of the mean.
    """
    db = _load(annotations)
    db = db.get("database", db)
    res = _as_results(_load(predictions))
    videos = {vid for vid, v in db.items() if subset is None or v.get("subset") == subset}

    gt_by_class: dict[str, list[GT]] = defaultdict(list)
    for vid in sorted(videos):
        for a in db[vid].get("annotations", []):
            gt_by_class[a["label"]].append((vid, float(a["segment"][0]), float(a["segment"][1])))
    known = set(class_ids) if class_ids is not None else set(gt_by_class)
    if class_ids is not None:
        stray = sorted(set(gt_by_class) - known)
        if stray:
            raise AnnotationError(f"unknown labels in annotations: {stray}")

    pred_by_class: dict[str, list[Pred]] = defaultdict(list)
    unknown = set()
    for vid in res:
        if subset is not None and vid not in videos:
            continue
        for p in res[vid]:
            label = p["label"]
            if label not in known:
                unknown.add(label)
                continue
            pred_by_class[label].append((vid, float(p["segment"][0]), float(p["segment"][1]), float(p["score"])))
    if unknown:
        raise AnnotationError(f"unknown labels in predictions: {sorted(unknown)}")

    classes = sorted(set(gt_by_class) | set(pred_by_class))
    per_class: dict[str, list[float]] = {}
    for name in classes:
        aps = [average_precision(pred_by_class[name], gt_by_class[name], t, matching) for t in thresholds]
        per_class[name] = [0.0 if ap is None else ap for ap in aps]

    scored = [name for name in classes if gt_by_class[name]]
    mAP = [float(np.mean([per_class[n][i] for n in scored])) if scored else 0.0 for i in range(len(thresholds))]
    return EvalReport(list(thresholds), mAP, float(np.mean(mAP)), per_class)
