"""1D semantic segmentation network.

Encoder (strided convs) -> PAG bottleneck (atrous branches, a snippet graph
branch and a global pooling path) -> decoder with a highway connection from
the second encoder layer -> per-frame class posterior and boundary heads.
All sequences are channel-major (C x T).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as F
from .config import SsnConfig
from .labels import FrameLabels
from .nn import BatchNorm1d, Conv1d, Module, Parameter
from .tensor import ShapeError, Tensor

PROB_EPS = 1e-12


@dataclass
class SnippetGraph:
    n: int
    neighbors: list[np.ndarray]

    def adjacency(self) -> np.ndarray:
        """Row-normalized n x n adjacency; rows without neighbors point to themselves."""
        A = np.zeros((self.n, self.n))
        for i, nbrs in enumerate(self.neighbors):
            if len(nbrs):
                A[i, nbrs] = 1.0 / len(nbrs)
            else:
                A[i, i] = 1.0
        return A


def build_snippet_graph(features: np.ndarray, K_s: int) -> SnippetGraph:
    """k-nearest-neighbor graph under negative mean squared feature distance.

    Ties go to the smaller index. The graph ignores temporal position.
    """
    X = np.asarray(features, dtype=np.float64)
    n = X.shape[1]
    sq = (X * X).sum(axis=0)
    dist = (sq[:, None] + sq[None, :] - 2.0 * X.T @ X) / X.shape[0]
    sim = -np.maximum(dist, 0.0)
    np.fill_diagonal(sim, -np.inf)
    k = min(K_s, n - 1)
    order = np.argsort(-sim, axis=1, kind="stable")
    return SnippetGraph(n, [order[i, :k].copy() for i in range(n)])


def edge_conv_rows(X: Tensor, A, W: Tensor) -> Tensor:
    """Edge convolution on an n x C node matrix: [X, A X - X] W."""
    agg = F.matmul(A, X)
    return F.matmul(F.concat([X, agg - X], axis=1), W)


def edge_conv(X: Tensor, A, W: Tensor) -> Tensor:
    """Channel-major edge convolution: C x n in, C_out x n out.

    ``A`` is the (row-normalized) n x n adjacency; ``W`` is 2C x C_out.
    """
    if W.shape[0] != 2 * X.shape[0]:
        raise ShapeError(f"edge_conv weight needs {2 * X.shape[0]} rows, got {W.shape[0]}", dim="W.rows")
    return F.transpose(edge_conv_rows(F.transpose(X), A, W))


def bce(p: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped away from 0 and 1."""
    p = F.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(target, dtype=np.float64)
    ll = y * F.log(p) + (1.0 - y) * F.log(1.0 - p)
    return -F.mean(ll)


def seg_loss(P: Tensor, labels: FrameLabels, binary: bool = False) -> Tensor:
    """Cross-entropy of the per-frame posterior against the frame labels."""
    b = (labels.b > 0).astype(np.int64) if binary else labels.b
    T = P.shape[1]
    if len(b) != T:
        raise ShapeError(f"labels have {len(b)} frames, posterior has {T}", dim="T")
    p = F.clip(F.pick(P, b, np.arange(T)), PROB_EPS, 1.0 - PROB_EPS)
    return -F.mean(F.log(p))


def aux_loss(p_start: Tensor, p_end: Tensor, labels: FrameLabels) -> Tensor:
    return bce(p_start, labels.beta_s) + bce(p_end, labels.beta_e)


@dataclass
class SsnOutput:
    Y: Tensor
    P: Tensor
    p_start: Tensor
    p_end: Tensor


class SSN(Module):
    def __init__(self, cfg: SsnConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        C = cfg.C_hidden
        self.encoder = [
            Conv1d(cfg.C_in if i == 0 else C, C, 3, rng, stride=2, padding=1) for i in range(cfg.L)
        ]
        if cfg.use_gc:
            bound = 1.0 / np.sqrt(2 * C)
            self.gc_weight = Parameter(rng.uniform(-bound, bound, (2 * C, C)))
        if cfg.use_ac:
            self.atrous = [Conv1d(C, C, 3, rng, dilation=d, padding=d) for d in cfg.dilations]
        if cfg.use_gp:
            self.gp = Conv1d(C, C, 1, rng)
        self.pag_fuse = Conv1d(self.n_branches * C, C, 1, rng)
        self.highway = Conv1d(C, C, 1, rng)
        self.highway_bn = BatchNorm1d(C)
        self.dec_fuse = Conv1d(2 * C, C, 3, rng, padding=1)
        n_out = 2 if cfg.seg_mode == "binary" else cfg.D + 1
        self.seg_head = Conv1d(C, n_out, 1, rng)
        self.start_conv = Conv1d(C, C, 3, rng, padding=1)
        self.start_out = Conv1d(C, 1, 1, rng)
        self.end_conv = Conv1d(C, C, 3, rng, padding=1)
        self.end_out = Conv1d(C, 1, 1, rng)

    @property
    def n_branches(self) -> int:
        cfg = self.cfg
        return int(cfg.use_gc) + (len(cfg.dilations) if cfg.use_ac else 0) + int(cfg.use_gp)

    @property
    def skip_layer(self) -> int:
        return min(2, self.cfg.L) - 1

    def encode(self, X: Tensor) -> tuple[Tensor, Tensor]:
        """Returns the bottleneck features and the highway tap."""
        T = X.shape[1]
        if X.shape[0] != self.cfg.C_in:
            raise ShapeError(f"expected {self.cfg.C_in} input channels, got {X.shape[0]}", dim="C_in")
        if T % (2**self.cfg.L):
            raise ShapeError(f"T={T} is not divisible by 2^L={2**self.cfg.L}", dim="T")
        h, skip = X, None
        for i, conv in enumerate(self.encoder):
            h = F.relu(conv(h))
            if i == self.skip_layer:
                skip = h
        return h, skip

    def pag_forward(self, Xp: Tensor) -> Tensor:
        cfg = self.cfg
        n = Xp.shape[1]
        branches = []
        if cfg.use_gc:
            graph = build_snippet_graph(Xp.data, cfg.K_s)
            branches.append(F.relu(edge_conv(Xp, graph.adjacency(), self.gc_weight)))
        if cfg.use_ac:
            for conv in self.atrous:
                branches.append(F.relu(conv(Xp)))
        if cfg.use_gp:
            pooled = self.gp(F.global_avg_pool(Xp))
            branches.append(F.linear_interp_resize(pooled, n))
        return F.relu(self.pag_fuse(F.concat_channels(branches)))

    def highway_path(self, skips: list[Tensor]) -> list[Tensor]:
        """1x1 conv + batch norm + ReLU; statistics pooled over every video in the batch."""
        convs = [self.highway(s) for s in skips]
        lengths = [c.shape[1] for c in convs]
        joined = self.highway_bn(F.concat(convs, axis=1)) if len(convs) > 1 else self.highway_bn(convs[0])
        joined = F.relu(joined)
        if len(convs) == 1:
            return [joined]
        bounds = np.concatenate([[0], np.cumsum(lengths)])
        return [F.take(joined, np.arange(bounds[i], bounds[i + 1]), axis=1) for i in range(len(convs))]

    def decode(self, Xpp: Tensor, highway: Tensor, T: int) -> Tensor:
        up = F.linear_interp_resize(Xpp, T)
        hw = F.linear_interp_resize(highway, T)
        return F.relu(self.dec_fuse(F.concat_channels([up, hw])))

    def heads(self, Y: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        P = F.softmax_channels(self.seg_head(Y))
        T = Y.shape[1]
        ps = F.sigmoid(F.reshape(self.start_out(F.relu(self.start_conv(Y))), (T,)))
        pe = F.sigmoid(F.reshape(self.end_out(F.relu(self.end_conv(Y))), (T,)))
        return P, ps, pe

    def forward_batch(self, xs: list[Tensor]) -> list[SsnOutput]:
        encoded = [self.encode(x) for x in xs]
        highways = self.highway_path([skip for _, skip in encoded])
        outs = []
        for x, (Xp, _), hw in zip(xs, encoded, highways):
            Y = self.decode(self.pag_forward(Xp), hw, x.shape[1])
            outs.append(SsnOutput(Y, *self.heads(Y)))
        return outs

    def __call__(self, x: Tensor) -> SsnOutput:
        return self.forward_batch([x])[0]

