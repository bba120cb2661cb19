"""End-to-end model, joint loss, training loop, inference and soft-NMS."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as F
from .config import Config
from .data import VideoItem, rescale_features
from .labels import (
    FrameLabels,
    ProposalLabels,
    compile_proposal_labels,
    segments_to_frame_labels,
    tiou_matrix,
)
from .nn import Adam, Module, Parameter, load_checkpoint, save_checkpoint
from .pdn import PDN, ProposalPattern, det_loss, gen_sparse_pattern, pattern_edge_mask, sample_pattern
from .ssn import SSN, aux_loss, seg_loss
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("epoch", "lr", "total", "seg", "det", "aux", "reg")


class SegTAD(Module):
    def __init__(self, cfg: Config, seed: int | None = None):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.train.seed if seed is None else seed)
        self.ssn = SSN(cfg.ssn, rng)
        self.pdn = PDN(cfg.pdn, cfg.ssn.C_hidden, rng)
        for name, p in self.named_parameters():
            p.name = name

    def pattern(self, T: int) -> ProposalPattern:
        return gen_sparse_pattern(T, self.cfg.pdn.eta)

    def pattern_mask(self, T: int, rows: np.ndarray | None = None) -> np.ndarray:
        pcfg = self.cfg.pdn
        mask = pattern_edge_mask(T, pcfg.eta, pcfg.edge_mode, pcfg.theta_p, pcfg.center_threshold)
        return mask if rows is None else mask[np.ix_(rows, rows)]

    def score_proposals(self, Y: Tensor, rows: np.ndarray | None = None) -> Tensor:
        """Two sigmoid scores per proposal (all pattern proposals, or ``rows``)."""
        T = Y.shape[1]
        D = self.pdn.align_features(Y, self.pattern(T), rows)
        return self.pdn.det_head(self.pdn(D, self.pattern_mask(T, rows)))


# -- losses ---------------------------------------------------------------------


def regularizer(params: Sequence[Parameter]) -> Tensor:
    """Sum over parameters of the mean squared entry."""
    total = F.tensor(0.0)
    for p in params:
        total = total + F.mean(F.square(p))
    return total


def total_loss(
    l_seg: Tensor | float | None,
    l_det: Tensor | float,
    l_aux: Tensor | float,
    params: Sequence[Parameter],
    lambda1: float = 1.0,
    lambda2: float = 1.0,
    lambda3: float = 1e-4,
) -> Tensor:
    """L = L_seg + lambda1 L_det + lambda2 L_aux + lambda3 L_r.

    ``l_seg=None`` drops the segmentation term.
    """
    total = F.tensor(0.0) if l_seg is None else F._as_tensor(l_seg)
    total = total + lambda1 * F._as_tensor(l_det) + lambda2 * F._as_tensor(l_aux)
    if lambda3:
        total = total + lambda3 * regularizer(params)
    return total


@dataclass
class PreparedVideo:
    item: VideoItem
    frame_labels: FrameLabels
    proposal_labels: ProposalLabels


def proposal_seconds(pattern: ProposalPattern, duration: float) -> np.ndarray:
    return pattern.segments * (duration / pattern.L_seq)


def prepare(items: Sequence[VideoItem], cfg: Config) -> list[PreparedVideo]:
    T = cfg.ssn.T
    pattern = gen_sparse_pattern(T, cfg.pdn.eta)
    out = []
    for item in items:
        if not np.all(np.isfinite(item.features)):
            raise NonFiniteError(f"non-finite features in video {item.annotation.video_id}")
        X = rescale_features(item.features, T)
        ann = item.annotation
        out.append(
            PreparedVideo(
                VideoItem(ann, X),
                segments_to_frame_labels(ann, T),
                compile_proposal_labels(proposal_seconds(pattern, ann.duration), ann, cfg.pdn.tau),
            )
        )
    return out


@dataclass
class LossParts:
    total: Tensor
    seg: Tensor
    det: Tensor
    aux: Tensor
    reg: float

    def values(self) -> dict[str, float]:
        return {
            "total": self.total.item(),
            "seg": self.seg.item(),
            "det": self.det.item(),
            "aux": self.aux.item(),
            "reg": self.reg,
        }


def compute_losses(
    model: SegTAD,
    batch: Sequence[PreparedVideo],
    rng: np.random.Generator,
    sampled_rows: Sequence[np.ndarray] | None = None,
) -> LossParts:
    """Joint loss over a batch of videos, each term averaged over the batch.

    ``sampled_rows`` fixes the proposal subset per video (otherwise drawn by
    neighborhood sampling from ``rng``).
    """
    cfg = model.cfg
    outs = model.ssn.forward_batch([Tensor(v.item.features) for v in batch])
    binary = cfg.ssn.seg_mode == "binary"
    T = cfg.ssn.T
    segs, dets, auxes = [], [], []
    for i, (v, out) in enumerate(zip(batch, outs)):
        segs.append(seg_loss(out.P, v.frame_labels, binary=binary))
        auxes.append(aux_loss(out.p_start, out.p_end, v.frame_labels))
        if sampled_rows is not None:
            rows = np.asarray(sampled_rows[i])
        else:
            rows = sample_pattern(T, cfg.pdn.eta, v.proposal_labels, cfg.pdn.m0, cfg.pdn.k, rng)
        S = model.score_proposals(out.Y, rows)
        plabels = ProposalLabels(v.proposal_labels.h_reg[rows], v.proposal_labels.h_cls[rows])
        l_reg, l_cls = det_loss(S, plabels)
        dets.append(l_reg + l_cls)
    n = float(len(batch))
    l_seg = F.sum(F.concat([F.reshape(s, (1,)) for s in segs])) / n
    l_det = F.sum(F.concat([F.reshape(s, (1,)) for s in dets])) / n
    l_aux = F.sum(F.concat([F.reshape(s, (1,)) for s in auxes])) / n
    tc = cfg.train
    params = model.parameters()
    total = total_loss(l_seg if tc.use_seg_loss else None, l_det, l_aux, params, tc.lambda1, tc.lambda2, tc.lambda3)
    reg = float(np.sum([np.mean(p.data**2) for p in params]))
    return LossParts(total, l_seg, l_det, l_aux, reg)


def first_non_finite(root: Tensor) -> Tensor | None:
    for node in F.topological_order(root):
        if not np.all(np.isfinite(node.data)):
            return node
    return None


def check_finite(parts: LossParts, model: SegTAD) -> None:
    if np.isfinite(parts.total.data).all():
        return
    bad = first_non_finite(parts.total)
    if bad is None:
        bad = next((p for p in model.parameters() if not np.isfinite(p.data).all()), parts.total)
    label = bad.name or bad.op
    raise NonFiniteError(f"non-finite loss; first non-finite tensor: {label} shape={bad.shape}")


# -- training -------------------------------------------------------------------


def lr_at(epoch: int, cfg: Config) -> float:
    return cfg.train.lr if epoch < cfg.train.lr_drop_epoch else cfg.train.lr / 10.0


@dataclass
class TrainResult:
    model: SegTAD
    log: list[dict[str, float]] = field(default_factory=list)

    def log_csv(self) -> str:
        return format_loss_log(self.log)


def format_loss_log(rows: Sequence[dict[str, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOSS_COLUMNS)
    for row in rows:
        w.writerow([row["epoch"]] + [repr(float(row[c])) for c in LOSS_COLUMNS[1:]])
    return buf.getvalue()


def train(
    items: Sequence[VideoItem],
    cfg: Config,
    run_dir: str | Path | None = None,
    class_ids: dict[str, int] | None = None,
) -> TrainResult:
    """Train from scratch; writes checkpoints, config and loss log under ``run_dir``."""
    cfg.validate()
    tc = cfg.train
    model = SegTAD(cfg)
    model.train()
    data = prepare(items, cfg)
    params = model.parameters()
    opt = Adam(params, lr_at(0, cfg))
    result = TrainResult(model)

    ckpt_dir = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        ckpt_dir = run_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
        if class_ids is not None:
            (run_dir / "classes.json").write_text(json.dumps({"background": 0, **class_ids}, indent=1))

    order_rng = np.random.default_rng([tc.seed, 1])
    for epoch in range(tc.epochs):
        opt.set_lr(lr_at(epoch, cfg))
        order = order_rng.permutation(len(data)) if tc.shuffle else np.arange(len(data))
        sums = dict.fromkeys(LOSS_COLUMNS[2:], 0.0)
        steps = 0
        for start in range(0, len(order), tc.batch):
            batch = [data[j] for j in order[start : start + tc.batch]]
            step_rng = np.random.default_rng([tc.seed, 2, epoch, start])
            opt.zero_grad()
            parts = compute_losses(model, batch, step_rng)
            check_finite(parts, model)
            F.backward(parts.total, params)
            opt.step()
            for key, value in parts.values().items():
                sums[key] += value
            steps += 1
        row = {"epoch": epoch, "lr": opt.lr, **{k: v / steps for k, v in sums.items()}}
        result.log.append(row)
        log.info("epoch %d lr %.2e loss %.5f", epoch, opt.lr, row["total"])
        if ckpt_dir is not None:
            last = epoch == tc.epochs - 1
            if last or (epoch + 1) % tc.save_every == 0:
                save_checkpoint(ckpt_dir / f"epoch_{epoch:03d}.stad", model.state_dict())
            if last:
                save_checkpoint(ckpt_dir / "last.stad", model.state_dict())
            (run_dir / "loss_log.csv").write_text(result.log_csv())
    return result


def load_model(checkpoint: str | Path, cfg: Config) -> SegTAD:
    model = SegTAD(cfg)
    model.load_state_dict(load_checkpoint(checkpoint))
    return model.eval()


# -- inference ------------------------------------------------------------------


def soft_nms(
    segments: np.ndarray,
    scores: np.ndarray,
    sigma: float = 0.5,
    keep: int = 100,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gaussian soft-NMS.

    Repeatedly takes the highest remaining score and multiplies every other
    remaining score by exp(-tIoU^2 / sigma). Returns (indices, segments,
    decayed scores) of the first ``keep`` picks, highest first; ties go to the
    lower index.
    """
    segs = np.asarray(segments, dtype=np.float64).reshape(-1, 2)
    live = np.asarray(scores, dtype=np.float64).copy()
    remaining = np.arange(len(segs))
    picked, picked_scores = [], []
    while remaining.size and len(picked) < keep:
        best = remaining[int(np.argmax(live[remaining]))]
        picked.append(best)
        picked_scores.append(live[best])
        remaining = remaining[remaining != best]
        if remaining.size:
            ov = tiou_matrix(segs[best : best + 1], segs[remaining])[0]
            live[remaining] *= np.exp(-(ov**2) / sigma)
    idx = np.asarray(picked, dtype=np.int64)
    return idx, segs[idx], np.asarray(picked_scores)


@dataclass
class DetectionResult:
    video_id: str
    detections: list[tuple[float, float, int, float]]  # start s, end s, class id, score


def infer_video(
    model: SegTAD,
    features: np.ndarray,
    duration: float,
    video_id: str = "",
    class_scores: Sequence[tuple[int, float]] | None = None,
) -> DetectionResult:
    """Score every pattern proposal, label it, suppress per class, keep the top ones.

    Labels come from ``class_scores`` (top ``infer.top_classes`` entries, each
    multiplying the proposal score) or, failing that, from the highest
    time-averaged non-background segmentation posterior.
    """
    cfg = model.cfg
    icfg = cfg.infer
    T = cfg.ssn.T
    model.eval()
    with F.no_grad():
        out = model.ssn(Tensor(rescale_features(features, T)))
        S = model.score_proposals(out.Y).data
    scores = S[:, 0] * S[:, 1]
    segs = proposal_seconds(model.pattern(T), duration)

    if class_scores:
        ranked = sorted(class_scores, key=lambda cs: -cs[1])[: icfg.top_classes]
        labelled = [(int(c), scores * float(s)) for c, s in ranked]
    else:
        if cfg.ssn.seg_mode == "binary":
            raise ValueError("binary segmentation has no class posterior; pass class scores")
        mean_post = out.P.data[1:].mean(axis=1)
        labelled = [(int(np.argmax(mean_post)) + 1, scores)]

    dets: list[tuple[float, float, int, float]] = []
    for cls, sc in labelled:
        _, kept, kept_scores = soft_nms(segs, sc, icfg.sigma, icfg.keep)
        dets.extend((float(s), float(e), cls, float(v)) for (s, e), v in zip(kept, kept_scores))
    dets.sort(key=lambda d: (-d[3], d[0], d[1], d[2]))
    return DetectionResult(video_id, dets[: icfg.keep])


def infer(
    model: SegTAD,
    items: Sequence[VideoItem],
    class_scores: dict[str, list[tuple[int, float]]] | None = None,
) -> list[DetectionResult]:
    return [
        infer_video(
            model,
            it.features,
            it.annotation.duration,
            it.video_id,
            None if class_scores is None else class_scores.get(it.video_id),
        )
        for it in items
    ]


def predictions_json(results: Sequence[DetectionResult], class_ids: dict[str, int]) -> dict:
    names = {i: n for n, i in class_ids.items()}
    return {
        "version": "segtad",
        "results": {
            r.video_id: [
                {"segment": [s, e], "score": sc, "label": names[c]} for s, e, c, sc in r.detections
            ]
            for r in results
        },
        "external_data": {},
    }


def load_class_scores(path: str | Path, class_ids: dict[str, int]) -> dict[str, list[tuple[int, float]]]:
    """Read ``{video_id: [{"label": ..., "score": ...}, ...]}``."""
    raw = json.loads(Path(path).read_text())
    out = {}
    for vid, entries in raw.items():
        unknown = sorted({e["label"] for e in entries} - set(class_ids))
        if unknown:
            raise ValueError(f"unknown labels in class scores for {vid}: {unknown}")
        out[vid] = [(class_ids[e["label"]], float(e["score"])) for e in entries]
    return out
