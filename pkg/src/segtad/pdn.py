"""Proposal detection network.

Sparse (start, length) proposal grid, interpolated feature pooling for each
proposal, a proposal graph (tIoU or center-distance edges, cosine attention
weights), neighborhood sampling for training, stacked edge convolutions and a
two-score sigmoid head.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import tensor as F
from .config import PdnConfig
from .labels import ProposalLabels, tiou_matrix
from .nn import Linear, Module, Parameter
from .ssn import bce, edge_conv_rows
from .tensor import Tensor

ATTENTION_EPS = 1e-8


class PatternError(ValueError):
    pass


@dataclass(frozen=True)
class ProposalPattern:
    L_seq: int
    eta: int
    proposals: np.ndarray  # M x 2 of (start index, length)

    @property
    def M(self) -> int:
        return len(self.proposals)

    @property
    def segments(self) -> np.ndarray:
        """M x 2 of (start, end) in snippet units."""
        return np.stack([self.proposals[:, 0], self.proposals.sum(axis=1)], axis=1).astype(np.float64)


@functools.lru_cache(maxsize=32)
def gen_sparse_pattern(L_seq: int, eta: int) -> ProposalPattern:
    """Every (i, j) with i and j multiples of eta, j >= eta and i + j <= L_seq."""
    if eta < 1 or L_seq < 1:
        raise PatternError(f"need L_seq >= 1 and eta >= 1, got L_seq={L_seq}, eta={eta}")
    if eta > L_seq:
        raise PatternError(f"step {eta} exceeds sequence length {L_seq}: no proposals")
    props = [(i, j) for i in range(0, L_seq, eta) for j in range(eta, L_seq - i + 1, eta)]
    arr = np.array(props, dtype=np.int64).reshape(-1, 2)
    arr.setflags(write=False)
    return ProposalPattern(L_seq, eta, arr)


@functools.lru_cache(maxsize=8)
def pattern_tiou(L_seq: int, eta: int) -> np.ndarray:
    segs = gen_sparse_pattern(L_seq, eta).segments
    out = tiou_matrix(segs, segs)
    out.setflags(write=False)
    return out


@functools.lru_cache(maxsize=8)
def _neighbor_order(L_seq: int, eta: int) -> np.ndarray:
    order = np.argsort(-pattern_tiou(L_seq, eta), axis=1, kind="stable").astype(np.int32)
    order.setflags(write=False)
    return order


def align_matrix(segments: np.ndarray, T: int, bins: int) -> np.ndarray:
    """M x T pooling matrix: row m averages ``bins`` interpolated samples of proposal m.

    Samples sit at equal spacing over [start, end] inclusive, positions
    clamped to the valid frame range [0, T - 1].
    """
    segs = np.asarray(segments, dtype=np.float64).reshape(-1, 2)
    M = len(segs)
    if bins == 1:
        pos = segs.mean(axis=1, keepdims=True)
    else:
        frac = np.arange(bins) / (bins - 1)
        pos = segs[:, :1] + (segs[:, 1:] - segs[:, :1]) * frac[None, :]
    pos = np.clip(pos, 0.0, T - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), max(T - 2, 0))
    w_hi = pos - lo if T > 1 else np.zeros_like(pos)
    hi = np.minimum(lo + 1, T - 1)
    out = np.zeros((M, T))
    rows = np.repeat(np.arange(M), pos.shape[1])
    np.add.at(out, (rows, lo.ravel()), (1.0 - w_hi).ravel() / pos.shape[1])
    np.add.at(out, (rows, hi.ravel()), w_hi.ravel() / pos.shape[1])
    return out


@functools.lru_cache(maxsize=8)
def _pattern_align_matrix(L_seq: int, eta: int, bins: int) -> np.ndarray:
    out = align_matrix(gen_sparse_pattern(L_seq, eta).segments, L_seq, bins)
    out.setflags(write=False)
    return out


def align_pool(Y: Tensor, segments: np.ndarray, bins: int = 32) -> Tensor:
    """Pre-projection proposal features: M x C from a C x T sequence."""
    return F.matmul(align_matrix(segments, Y.shape[1], bins), F.transpose(Y))


@dataclass
class ProposalGraph:
    edges: np.ndarray  # M x M bool, symmetric, no self-loops
    attention: np.ndarray  # cosine similarity on edges, 0 elsewhere

    @property
    def M(self) -> int:
        return len(self.edges)


def edge_mask(
    segments: np.ndarray,
    mode: str = "tiou",
    theta_p: float = 0.1,
    center_threshold: float = 8.0,
    tiou: np.ndarray | None = None,
) -> np.ndarray:
    segs = np.asarray(segments, dtype=np.float64).reshape(-1, 2)
    if mode == "tiou":
        overlap = tiou if tiou is not None else tiou_matrix(segs, segs)
        mask = overlap > theta_p
    elif mode == "center_distance":
        centers = segs.mean(axis=1)
        mask = np.abs(centers[:, None] - centers[None, :]) <= center_threshold
    else:
        raise ValueError(f"unknown edge mode {mode!r}")
    mask = mask.copy()
    np.fill_diagonal(mask, False)
    return mask


def attention_adjacency(features: Tensor, mask: np.ndarray) -> Tensor:
    """Cosine attention on edges, each row divided by its total absolute weight.

    Rows whose weights are all (near) zero aggregate from the node itself.
    """
    Dn = F.l2_normalize_rows(features)
    A = F.matmul(Dn, F.transpose(Dn)) * mask.astype(np.float64)
    weight = F.sum(A * np.sign(A.data), axis=1, keepdims=True)
    empty = (weight.data <= ATTENTION_EPS).astype(np.float64)
    return A * (1.0 - empty) / (weight + empty) + np.diag(empty[:, 0])


def build_proposal_graph(
    features,
    segments: np.ndarray,
    theta_p: float = 0.1,
    mode: str = "tiou",
    center_threshold: float = 8.0,
) -> ProposalGraph:
    D = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
    mask = edge_mask(segments, mode, theta_p, center_threshold)
    norm = np.linalg.norm(D, axis=1, keepdims=True)
    Dn = D / np.where(norm > 0, norm, 1.0)
    return ProposalGraph(mask, np.where(mask, Dn @ Dn.T, 0.0))


def _top_neighbors(row: np.ndarray, k: int, exclude: set[int], order: np.ndarray | None = None) -> list[int]:
    if order is None:
        order = np.argsort(-row, kind="stable")
    picked = []
    for j in order:
        if row[j] <= 0 or len(picked) == k:
            break
        if int(j) not in exclude:
            picked.append(int(j))
    return picked


def sage_sample(
    tiou: np.ndarray,
    labels: ProposalLabels,
    m0: int = 50,
    k: int = 4,
    rng: np.random.Generator | None = None,
    return_parents: bool = False,
    order: np.ndarray | None = None,
):
    """Balanced seeds plus two hops of top-k tIoU neighbors.

    Returns proposal indices in listing order (and, optionally, the index of
    the node each one was reached from; -1 for seeds). When M does not
    exceed the sample bound every proposal is returned. ``order`` may carry
    each row of ``tiou`` pre-sorted in descending order.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    M = len(tiou)
    if M <= m0 * (1 + k + k * k):
        idx = np.arange(M)
        return (idx, np.full(M, -1)) if return_parents else idx
    pos = np.flatnonzero(labels.h_cls == 1)
    neg = np.flatnonzero(labels.h_cls == 0)
    half = m0 // 2
    seeds = list(rng.choice(pos, min(half, len(pos)), replace=False)) + list(
        rng.choice(neg, min(half, len(neg)), replace=False)
    )
    listed: dict[int, int] = {}
    for s in seeds:
        listed.setdefault(int(s), -1)
    for s in seeds:
        s = int(s)
        first = _top_neighbors(tiou[s], k, {s}, None if order is None else order[s])
        for j in first:
            listed.setdefault(j, s)
        for j in first:
            for q in _top_neighbors(tiou[j], k, set(listed), None if order is None else order[j]):
                listed[q] = j
    idx = np.fromiter(listed.keys(), dtype=np.int64)
    if return_parents:
        return idx, np.fromiter(listed.values(), dtype=np.int64)
    return idx


def sample_pattern(L_seq: int, eta: int, labels: ProposalLabels, m0: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """``sage_sample`` over a cached proposal pattern."""
    return sage_sample(pattern_tiou(L_seq, eta), labels, m0, k, rng, order=_neighbor_order(L_seq, eta))


@functools.lru_cache(maxsize=8)
def pattern_edge_mask(L_seq: int, eta: int, mode: str, theta_p: float, center_threshold: float) -> np.ndarray:
    segs = gen_sparse_pattern(L_seq, eta).segments
    overlap = pattern_tiou(L_seq, eta) if mode == "tiou" else None
    out = edge_mask(segs, mode, theta_p, center_threshold, tiou=overlap)
    out.setflags(write=False)
    return out


class PDN(Module):
    def __init__(self, cfg: PdnConfig, C: int, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.align = Linear(C, C, rng)
        rows = 2 * C if cfg.layer_mode == "graph" else C
        bound = 1.0 / np.sqrt(rows)
        self.layers = [Parameter(rng.uniform(-bound, bound, (rows, C))) for _ in range(cfg.layers)]
        self.head = Linear(C, 2, rng)

    def align_features(self, Y: Tensor, pattern: ProposalPattern, rows: np.ndarray | None = None) -> Tensor:
        """Projected proposal features (M x C), optionally for a subset of pattern rows."""
        if pattern.L_seq != Y.shape[1]:
            raise PatternError(f"pattern built for length {pattern.L_seq}, features have {Y.shape[1]}")
        pool = _pattern_align_matrix(pattern.L_seq, pattern.eta, self.cfg.align_bins)
        if rows is not None:
            pool = pool[rows]
        return F.relu(self.align(F.matmul(pool, F.transpose(Y))))

    def __call__(self, D: Tensor, mask: np.ndarray) -> Tensor:
        """Refine M x C proposal features over the graph given by ``mask``."""
        h = D
        if self.cfg.layer_mode == "graph":
            A = attention_adjacency(D, mask)
            for W in self.layers:
                h = F.relu(edge_conv_rows(h, A, W))
        else:
            for W in self.layers:
                h = F.relu(F.matmul(h, W))
        return h

    def det_head(self, D: Tensor) -> Tensor:
        return F.sigmoid(self.head(D))


def det_loss(S: Tensor, labels: ProposalLabels) -> tuple[Tensor, Tensor]:
    """Returns (MSE of score 1 vs tIoU target, BCE of score 2 vs positive flag)."""
    s1 = F.take(S, [0], axis=1)
    s2 = F.take(S, [1], axis=1)
    diff = F.reshape(s1, (S.shape[0],)) - labels.h_reg
    l_reg = F.mean(F.square(diff))
    l_cls = bce(F.reshape(s2, (S.shape[0],)), labels.h_cls)
    return l_reg, l_cls
