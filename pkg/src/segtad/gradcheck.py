"""Central finite-difference checks of analytic gradients.

``run_suite`` exercises every differentiable op on random small shapes and the
full joint loss of a tiny model; the ``gradcheck`` CLI command wraps it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as F
from .config import Config
from .labels import FrameLabels, ProposalLabels
from .pdn import attention_adjacency, det_loss
from .ssn import aux_loss, edge_conv, seg_loss
from .tensor import Tensor

FD_STEP = 1e-5
TOLERANCE = 1e-4
# gradients smaller than this are compared in absolute terms
ABS_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ABS_FLOOR) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def check_gradients(
    fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = FD_STEP
) -> float:
    """Largest relative error over all ``inputs`` between backward() and finite differences."""
    for t in inputs:
        t.grad = None
    loss = fn()
    F.backward(loss, inputs)
    analytic = [t.grad.copy() for t in inputs]

    def f() -> float:
        with F.no_grad():
            return float(fn().data)

    worst = 0.0
    for t, a in zip(inputs, analytic):
        n = numeric_grad(f, t.data, h)
        worst = max(worst, relative_error(a, n))
    return worst


@dataclass
class GradResult:
    name: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _param(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def op_cases(rng: np.random.Generator, trials: int = 10) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    """(name, loss closure, inputs) per op and trial; each loss is a random linear
    functional of the op output so every output entry contributes."""
    cases = []

    def functional(out_shape, op_out: Callable[[], Tensor]):
        w = rng.normal(size=out_shape)
        return lambda: F.sum(op_out() * w)

    for trial in range(trials):
        c_in = int(rng.integers(1, 4))
        c_out = int(rng.integers(1, 4))
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        dilation = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 3))
        T = int(rng.integers(dilation * (k - 1) + 1, 9))
        x = _param(rng, c_in, T)
        w = _param(rng, c_out, c_in, k)
        b = _param(rng, c_out)
        t_out = F.conv1d_output_length(T, k, stride, dilation, padding)
        cases.append(
            (
                f"conv1d[{trial}]",
                functional((c_out, t_out), lambda x=x, w=w, b=b, s=stride, d=dilation, p=padding: F.conv1d(x, w, b, s, d, p)),
                [x, w, b],
            )
        )

        C = int(rng.integers(1, 4))
        T = int(rng.integers(2, 7))
        x = _param(rng, C, T)
        # keep inputs away from the kink at zero
        x.data = np.where(np.abs(x.data) < 0.05, 0.3, x.data)
        cases.append((f"relu[{trial}]", functional((C, T), lambda x=x: F.relu(x)), [x]))
        x = _param(rng, C, T, scale=2.0)
        cases.append((f"sigmoid[{trial}]", functional((C, T), lambda x=x: F.sigmoid(x)), [x]))
        x = _param(rng, C + 1, T)
        cases.append((f"softmax_channels[{trial}]", functional((C + 1, T), lambda x=x: F.softmax_channels(x)), [x]))

        x = _param(rng, C, T)
        gamma, beta = _param(rng, C), _param(rng, C)
        rm, rv = np.zeros(C), np.ones(C)
        cases.append(
            (
                f"batchnorm1d[{trial}]",
                functional((C, T), lambda x=x, g=gamma, bt=beta, rm=rm, rv=rv: F.batchnorm1d(x, g, bt, rm, rv, True)),
                [x, gamma, beta],
            )
        )

        N = int(rng.integers(1, 5))
        x = _param(rng, N, C)
        W = _param(rng, C, c_out)
        bias = _param(rng, c_out)
        cases.append((f"linear[{trial}]", functional((N, c_out), lambda x=x, W=W, b=bias: F.linear(x, W, b)), [x, W, bias]))
        a = _param(rng, N, C)
        bm = _param(rng, C, c_out)
        cases.append((f"matmul[{trial}]", functional((N, c_out), lambda a=a, b=bm: F.matmul(a, b)), [a, bm]))

        x1, x2 = _param(rng, C, T), _param(rng, c_out, T)
        cases.append(
            (f"concat_channels[{trial}]", functional((C + c_out, T), lambda a=x1, b=x2: F.concat_channels([a, b])), [x1, x2])
        )
        x = _param(rng, C, T)
        cases.append((f"global_avg_pool[{trial}]", functional((C, 1), lambda x=x: F.global_avg_pool(x)), [x]))
        target = int(rng.integers(1, 12))
        x = _param(rng, C, T)
        cases.append(
            (
                f"linear_interp_resize[{trial}]",
                functional((C, target), lambda x=x, tt=target: F.linear_interp_resize(x, tt)),
                [x],
            )
        )
        x = _param(rng, N, C + 1)
        cases.append((f"l2_normalize_rows[{trial}]", functional((N, C + 1), lambda x=x: F.l2_normalize_rows(x)), [x]))
        x = Tensor(rng.uniform(0.5, 2.0, size=(C, T)), requires_grad=True)
        cases.append((f"log[{trial}]", functional((C, T), lambda x=x: F.log(x)), [x]))
        cases.append((f"sqrt[{trial}]", functional((C, T), lambda x=x: F.sqrt(x)), [x]))
        y = _param(rng, C, T)
        cases.append((f"exp_div[{trial}]", functional((C, T), lambda x=x, y=y: F.exp(y) / x), [x, y]))
        idx_t = rng.integers(0, T, size=4)
        rows_c = rng.integers(0, C, size=3)
        cols_t = rng.integers(0, T, size=3)
        cases.append(
            (
                f"take_pick[{trial}]",
                lambda x=y, it=idx_t, r=rows_c, c=cols_t: F.sum(F.square(F.take(x, it, axis=1)))
                + F.sum(F.pick(x, r, c) * F.pick(x, r, c)),
                [y],
            )
        )
        z = Tensor(rng.uniform(0.1, 0.9, size=(C, T)), requires_grad=True)
        cases.append(
            (f"clip[{trial}]", functional((C, T), lambda z=z: F.clip(z, 1e-12, 1.0 - 1e-12)), [z])
        )
        u, v = _param(rng, C, T), _param(rng, 1, T)
        cases.append(
            (
                f"broadcast_arith[{trial}]",
                functional((T, C), lambda u=u, v=v, shp=(C, T): F.transpose(F.reshape((u - v) * v + u / (1.5 + v * v), shp))),
                [u, v],
            )
        )
        cases.append((f"mean_sum[{trial}]", lambda u=u: F.mean(F.sum(u * u, axis=0) * 0.5) - F.mean(u, axis=1).sum(), [u]))


        n = int(rng.integers(2, 6))
        X = _param(rng, C, n)
        A = rng.uniform(size=(n, n))
        A /= A.sum(axis=1, keepdims=True)
        Wg = _param(rng, 2 * C, c_out)
        cases.append((f"edge_conv[{trial}]", functional((c_out, n), lambda X=X, A=A, W=Wg: edge_conv(X, A, W)), [X, Wg]))
        Dm = Tensor(rng.uniform(0.1, 1.0, size=(n, C + 1)), requires_grad=True)
        mask = rng.uniform(size=(n, n)) < 0.6
        mask = mask | mask.T
        np.fill_diagonal(mask, False)
        cases.append(
            (f"attention_adjacency[{trial}]", functional((n, n), lambda D=Dm, m=mask: attention_adjacency(D, m)), [Dm])
        )
        logits = _param(rng, C + 1, T)
        b = rng.integers(0, C + 1, size=T)
        bs, be = rng.integers(0, 2, size=T), rng.integers(0, 2, size=T)
        fl = FrameLabels(b, bs, be)
        ps, pe = _param(rng, T), _param(rng, T)
        cases.append(
            (
                f"seg_aux_loss[{trial}]",
                lambda lg=logits, fl=fl, ps=ps, pe=pe: seg_loss(F.softmax_channels(lg), fl)
                + aux_loss(F.sigmoid(ps), F.sigmoid(pe), fl),
                [logits, ps, pe],
            )
        )
        S = _param(rng, n, 2)
        pl = ProposalLabels(rng.uniform(size=n), rng.integers(0, 2, size=n))
        cases.append(
            (f"det_loss[{trial}]", lambda S=S, pl=pl: sum_pair(det_loss(F.sigmoid(S), pl)), [S])
        )
    return cases


def sum_pair(pair: tuple[Tensor, Tensor]) -> Tensor:
    return pair[0] + pair[1]


def tiny_config() -> Config:
    """C_in=4, T=16, L=2, D=2, eta=4 with small hidden width."""
    cfg = Config()
    cfg.ssn.C_in, cfg.ssn.T, cfg.ssn.L, cfg.ssn.D = 4, 16, 2, 2
    cfg.ssn.C_hidden = 4
    cfg.ssn.dilations = [1, 2]
    cfg.ssn.K_s = 2
    cfg.pdn.eta = 4
    cfg.pdn.align_bins = 4
    cfg.pdn.m0 = 2
    cfg.pdn.k = 1
    cfg.train.lambda3 = 1e-2
    return cfg


def model_case(cfg: Config | None = None, seed: int = 0):
    """Joint loss of a tiny SegTAD on one synthetic video, proposal subset fixed."""
    from .data import SyntheticSpec, gen_synthetic_dataset
    from .pipeline import SegTAD, compute_losses, prepare

    cfg = cfg or tiny_config()
    spec = SyntheticSpec(
        n_videos=1, D=cfg.ssn.D, C=cfg.ssn.C_in, T=cfg.ssn.T, min_actions=1, max_actions=2,
        min_len=4, max_len=6, sigma=0.3, seed=seed,
    )
    items, _ = gen_synthetic_dataset(spec)
    model = SegTAD(cfg, seed=seed)
    model.train()
    data = prepare(items, cfg)
    M = model.pattern(cfg.ssn.T).M
    rows = [np.arange(M)]
    rng = np.random.default_rng(seed)

    def loss() -> Tensor:
        return compute_losses(model, data, rng, sampled_rows=rows).total

    return loss, model.parameters()


def run_suite(
    trials: int = 10, seed: int = 0, include_model: bool = True, cfg: Config | None = None
) -> list[GradResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, inputs in op_cases(rng, trials):
        t0 = time.perf_counter()
        err = check_gradients(fn, inputs)
        results.append(GradResult(name, err, time.perf_counter() - t0))
    if include_model:
        t0 = time.perf_counter()
        fn, params = model_case(cfg, seed=seed)
        err = check_gradients(fn, params)
        results.append(GradResult("segtad_joint_loss", err, time.perf_counter() - t0))
    return results
