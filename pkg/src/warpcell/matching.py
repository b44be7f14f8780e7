"""Query/proposal interaction: pooling, RoI-align, attention and a binary matching head."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import ConvParams, as_tensor, bilinear_sample, bilinear_sample_vjp, conv2d, conv2d_vjp, sigmoid
from .tubelets import Box


def avg_pool_spatial(map_) -> np.ndarray:
    """Per-channel mean over ``H, W`` of ``[..., H, W, C]``."""
    map_ = as_tensor(map_)
    if map_.ndim < 3 or map_.shape[-3] < 1 or map_.shape[-2] < 1:
        raise ValueError(f"expected a non-empty [H, W, C] map, got {map_.shape}")
    return map_.mean(axis=(-3, -2))


def avg_pool_spatial_vjp(g, map_) -> np.ndarray:
    map_ = as_tensor(map_)
    H, W = map_.shape[-3:-1]
    return np.broadcast_to(as_tensor(g)[..., None, None, :] / (H * W), map_.shape).copy()


# ---------------------------------------------------------------------------
# RoI-align

def _box_of(box) -> Box:
    b = box if isinstance(box, Box) else Box(*np.asarray(box, dtype=float).tolist())
    b.validate()
    return b


def _roi_coords(shape, box, out):
    """Sample coordinates ``(ys, xs)`` and the per-bin sample counts.

    Bins that are at least two pixels wide get a 2x2 sub-grid; narrower bins
    get ``ceil(bin)`` samples per axis, which lands a single sample on the
    pixel centre when a bin is exactly one pixel.
    """
    H, W = shape[-3:-1]
    oh, ow = out
    if oh < 1 or ow < 1:
        raise ValueError(f"output size must be at least 1x1, got {out}")
    b = _box_of(box)
    if b.ymax <= b.ymin or b.xmax <= b.xmin:
        raise ValueError(f"degenerate RoI {b.as_tuple()}: zero area")
    y0, x0, y1, x1 = b.ymin * H, b.xmin * W, b.ymax * H, b.xmax * W
    bh, bw = (y1 - y0) / oh, (x1 - x0) / ow
    sy = min(2, math.ceil(bh - 1e-12))
    sx = min(2, math.ceil(bw - 1e-12))
    # continuous coords have pixel i spanning [i, i + 1]; samples are taken at bin-relative fractions
    fy = (np.arange(sy) + 0.5) / sy
    fx = (np.arange(sx) + 0.5) / sx
    ys = y0 + (np.arange(oh)[:, None] + fy[None, :]) * bh - 0.5
    xs = x0 + (np.arange(ow)[:, None] + fx[None, :]) * bw - 0.5
    ys = np.clip(ys, 0.0, H - 1.0)
    xs = np.clip(xs, 0.0, W - 1.0)
    yy = np.broadcast_to(ys[:, :, None, None], (oh, sy, ow, sx))
    xx = np.broadcast_to(xs[None, None, :, :], (oh, sy, ow, sx))
    return yy.reshape(-1), xx.reshape(-1), (oh, sy, ow, sx)


def roi_pool(map_, box, out: tuple[int, int] = (7, 7)) -> np.ndarray:
    """Average RoI-align of ``map_[H, W, C]`` over a normalised ``box`` -> ``[h, w, C]``."""
    map_ = as_tensor(map_)
    if map_.ndim != 3:
        raise ValueError(f"roi_pool expects [H, W, C], got {map_.shape}")
    ys, xs, (oh, sy, ow, sx) = _roi_coords(map_.shape, box, out)
    samples = bilinear_sample(map_, ys, xs)
    return samples.reshape(oh, sy, ow, sx, -1).mean(axis=(1, 3))


def roi_pool_vjp(g, map_, box, out: tuple[int, int] = (7, 7)) -> np.ndarray:
    """Cotangent of :func:`roi_pool` with respect to the map (the box is not differentiated)."""
    map_ = as_tensor(map_)
    ys, xs, (oh, sy, ow, sx) = _roi_coords(map_.shape, box, out)
    C = map_.shape[-1]
    gs = np.broadcast_to(as_tensor(g)[:, None, :, None, :] / (sy * sx), (oh, sy, ow, sx, C))
    dmap, _, _ = bilinear_sample_vjp(gs.reshape(-1, C), map_, ys, xs)
    return dmap


# ---------------------------------------------------------------------------
# attention over query clips

@dataclass
class AttentionParams:
    """``W_q, W_r: [C, D]``, ``w, b_p: [D]``, scalar ``b_s``."""

    W_q: np.ndarray
    W_r: np.ndarray
    w: np.ndarray
    b_p: np.ndarray
    b_s: float = 0.0

    def __post_init__(self):
        self.W_q = as_tensor(self.W_q)
        self.W_r = as_tensor(self.W_r)
        self.w = as_tensor(self.w)
        self.b_p = as_tensor(self.b_p)
        self.b_s = float(self.b_s)
        if self.W_q.ndim != 2 or self.W_q.shape != self.W_r.shape:
            raise ValueError(f"W_q {self.W_q.shape} and W_r {self.W_r.shape} must both be [C, D]")
        D = self.W_q.shape[1]
        if self.w.shape != (D,) or self.b_p.shape != (D,):
            raise ValueError(f"w {self.w.shape} and b_p {self.b_p.shape} must have length D={D}")

    @property
    def channels(self) -> int:
        return self.W_q.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, dim: int | None = None) -> "AttentionParams":
        D = dim if dim is not None else max(1, channels // 4)
        s = 1.0 / math.sqrt(channels)
        return cls(rng.normal(0, s, (channels, D)), rng.normal(0, s, (channels, D)),
                   rng.normal(0, 1.0 / math.sqrt(D), D), np.zeros(D), 0.0)


@dataclass
class AttentionGrads:
    W_q: np.ndarray
    W_r: np.ndarray
    w: np.ndarray
    b_p: np.ndarray
    b_s: float


def _stack_queries(query_feats, proposal_feat, params: AttentionParams):
    if len(query_feats) == 0:
        raise ValueError("attention_pool needs at least one query feature")
    fq = np.stack([as_tensor(f) for f in query_feats])
    fp = as_tensor(proposal_feat)
    if fq.shape[1:] != fp.shape:
        raise ValueError(f"query features {fq.shape[1:]} and proposal {fp.shape} differ in shape")
    if fp.shape[-1] != params.channels:
        raise ValueError(f"features have {fp.shape[-1]} channels, params expect {params.channels}")
    return fq, fp


def attention_logits(query_feats, proposal_feat, params: AttentionParams):
    """Return ``(e [J, D], s [J])`` with ``s_j = w . e_j + b_s``."""
    fq, fp = _stack_queries(query_feats, proposal_feat, params)
    e = np.tanh(avg_pool_spatial(fq) @ params.W_q + avg_pool_spatial(fp) @ params.W_r + params.b_p)
    return e, e @ params.w + params.b_s


def softmax(s) -> np.ndarray:
    s = as_tensor(s)
    z = np.exp(s - s.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def attention_weights(query_feats, proposal_feat, params: AttentionParams) -> np.ndarray:
    return softmax(attention_logits(query_feats, proposal_feat, params)[1])


def attention_pool(query_feats: Sequence, proposal_feat, params: AttentionParams) -> np.ndarray:
    """Softmax-weighted sum of the query features, weights driven by pooled query/proposal."""
    fq, _ = _stack_queries(query_feats, proposal_feat, params)
    alpha = attention_weights(query_feats, proposal_feat, params)
    return np.tensordot(alpha, fq, axes=1)


def attention_pool_vjp(g, query_feats, proposal_feat, params: AttentionParams):
    """Returns ``(dquery [J, ...], dproposal, AttentionGrads)``."""
    fq, fp = _stack_queries(query_feats, proposal_feat, params)
    g = as_tensor(g)
    aq = avg_pool_spatial(fq)
    ar = avg_pool_spatial(fp)
    e = np.tanh(aq @ params.W_q + ar @ params.W_r + params.b_p)
    alpha = softmax(e @ params.w + params.b_s)

    dalpha = np.tensordot(fq, g, axes=([1, 2, 3], [0, 1, 2]))
    ds = alpha * (dalpha - alpha @ dalpha)
    dz = ds[:, None] * params.w[None, :] * (1.0 - e * e)
    dz_sum = dz.sum(0)
    grads = AttentionGrads(W_q=aq.T @ dz, W_r=np.outer(ar, dz_sum), w=ds @ e,
                           b_p=dz_sum, b_s=float(ds.sum()))
    dfq = alpha[:, None, None, None] * g[None] + avg_pool_spatial_vjp(dz @ params.W_q.T, fq)
    dfp = avg_pool_spatial_vjp(params.W_r @ dz_sum, fp)
    return dfq, dfp, grads


# ---------------------------------------------------------------------------
# correspondence head

@dataclass
class CorrespondenceHead:
    """3x3 conv over ``[proposal, query]`` channels, tanh, mean pool, dense + sigmoid."""

    conv: ConvParams
    dense_w: np.ndarray
    dense_b: float = 0.0

    def __post_init__(self):
        self.dense_w = as_tensor(self.dense_w)
        self.dense_b = float(self.dense_b)
        if self.dense_w.shape != (self.conv.kernel.shape[-1],):
            raise ValueError(f"dense_w {self.dense_w.shape} must match conv outputs {self.conv.kernel.shape[-1]}")

    @classmethod
    def zeros(cls, channels: int, hidden: int = 8, kernel: int = 3) -> "CorrespondenceHead":
        return cls(ConvParams.zeros(kernel, kernel, 2 * channels, hidden), np.zeros(hidden), 0.0)

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, hidden: int = 8, kernel: int = 3) -> "CorrespondenceHead":
        fan = kernel * kernel * 2 * channels
        k = rng.normal(0, 1.0 / math.sqrt(fan), (kernel, kernel, 2 * channels, hidden))
        return cls(ConvParams(k, np.zeros(hidden)), rng.normal(0, 1.0 / math.sqrt(hidden), hidden), 0.0)


def _pair(proposal_feat, weighted_query, head: CorrespondenceHead):
    p = as_tensor(proposal_feat)
    q = as_tensor(weighted_query)
    if p.shape != q.shape or p.ndim != 3:
        raise ValueError(f"proposal {p.shape} and query {q.shape} must be equal [H, W, C] shapes")
    if 2 * p.shape[-1] != head.conv.kernel.shape[2]:
        raise ValueError(f"head expects {head.conv.kernel.shape[2]} input channels, got 2 x {p.shape[-1]}")
    return np.concatenate([p, q], axis=-1)


def correspondence_score(proposal_feat, weighted_query, head: CorrespondenceHead) -> float:
    """Probability that the proposal corresponds to the query."""
    z = np.tanh(conv2d(_pair(proposal_feat, weighted_query, head), head.conv))
    return float(sigmoid(avg_pool_spatial(z) @ head.dense_w + head.dense_b))


def correspondence_score_vjp(g: float, proposal_feat, weighted_query, head: CorrespondenceHead):
    """Returns ``(dproposal, dquery, head-shaped grads)``."""
    x = _pair(proposal_feat, weighted_query, head)
    z = np.tanh(conv2d(x, head.conv))
    a = avg_pool_spatial(z)
    p = float(sigmoid(a @ head.dense_w + head.dense_b))
    ds = float(g) * p * (1.0 - p)
    dz = avg_pool_spatial_vjp(ds * head.dense_w, z) * (1.0 - z * z)
    dx, dk, db = conv2d_vjp(dz, x, head.conv.kernel)
    C = x.shape[-1] // 2
    grads = CorrespondenceHead(ConvParams(dk, db), ds * a, ds)
    return dx[..., :C], dx[..., C:], grads
