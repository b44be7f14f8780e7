"""Convolutional recurrent cells: ConvLSTM, warp LSTM and TrajLSTM-lite.

All cells share the gating of a ConvLSTM. They differ only in how the
previous state ``(h, c)`` is brought into alignment with the current input
before gating:

* ConvLSTM uses it as-is;
* warp LSTM predicts displacements at a grid of control points and warps
  ``h`` and ``c`` through the resulting polyharmonic flow;
* TrajLSTM-lite predicts ``L`` dense flows, warps ``h`` once per flow and
  mixes the copies with a 1x1 convolution;
* the flow-warp variant takes a dense flow from outside (e.g. ground truth).

Each step has a ``*_forward`` returning ``(outputs, cache)`` and a
``*_backward`` that accumulates parameter cotangents into a grads object of
the same dataclass type and returns input/state cotangents.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import spline
from .params import zeros_like
from .tensor import (DTYPE, ConvParams, activation, activation_vjp_from_output, as_tensor,
                     conv2d_raw, conv2d_vjp, dense_warp, dense_warp_vjp, sigmoid)

GATES = ("i", "g", "f", "o")


@dataclass
class CellState:
    h: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        if self.h.shape != self.c.shape:
            raise ValueError(f"h {self.h.shape} and c {self.c.shape} must share dims")

    @classmethod
    def zeros(cls, shape) -> "CellState":
        return cls(np.zeros(shape, dtype=DTYPE), np.zeros(shape, dtype=DTYPE))


@dataclass
class Bottleneck:
    """1x1 projections around the cell: ``down`` C->Cb, ``up`` Cb->C."""

    down: ConvParams
    up: ConvParams
    skip: bool = True


@dataclass
class ConvLSTMParams:
    """Fused gate convolutions, gate order ``(i, g, f, o)`` along c_out.

    ``wx`` carries ``W_x*`` and the gate biases ``b_*``; ``wh`` carries
    ``W_h*`` (no bias).
    """

    wx: ConvParams  # [k, k, c_in, 4 Cb]
    wh: np.ndarray  # [k, k, Cb, 4 Cb]
    candidate: str = "sigmoid"
    bottleneck: Bottleneck | None = None

    def __post_init__(self):
        self.wh = as_tensor(self.wh)
        nb = self.hidden
        if self.wx.kernel.shape[-1] != 4 * nb or self.wh.shape[-1] != 4 * nb:
            raise ValueError("gate convolutions must produce 4 * hidden channels")
        if self.wx.kernel.shape[:2] != self.wh.shape[:2]:
            raise ValueError("input and state gate kernels must share spatial size")
        if self.candidate not in ("sigmoid", "tanh"):
            raise ValueError(f"candidate activation must be sigmoid or tanh, got {self.candidate!r}")

    @property
    def hidden(self) -> int:
        return self.wh.shape[2]

    def gate(self, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(W_x, W_h, b)`` of one gate as views into the fused arrays."""
        k = GATES.index(name)
        sl = slice(k * self.hidden, (k + 1) * self.hidden)
        return self.wx.kernel[..., sl], self.wh[..., sl], self.wx.bias[sl]


@dataclass
class WarpLSTMParams:
    base: ConvLSTMParams
    disp_x: ConvParams  # [1, 1, c_in, 2], bias = b_d; channels (dx, dy)
    disp_h: np.ndarray  # [1, 1, Cb, 2]
    grid: tuple[int, int] = (3, 3)
    order: int = spline.DEFAULT_ORDER
    regularization: float = spline.DEFAULT_REGULARIZATION
    boundary: bool = True
    fixed_sites: bool = False

    def __post_init__(self):
        self.disp_h = as_tensor(self.disp_h)
        if self.disp_x.kernel.shape[-1] != 2 or self.disp_h.shape[-1] != 2:
            raise ValueError("displacement convolution must have 2 output channels")
        if min(self.grid) < 1:
            raise ValueError("control grid needs at least one line per axis")


@dataclass
class TrajLSTMParams:
    base: ConvLSTMParams
    flow_x: ConvParams  # [k, k, c_in, 2L]; per link (dy, dx)
    flow_h: np.ndarray  # [k, k, Cb, 2L]
    aggregate: ConvParams  # [1, 1, L Cb, Cb]
    links: int = field(init=False)

    def __post_init__(self):
        self.flow_h = as_tensor(self.flow_h)
        self.links = self.flow_x.kernel.shape[-1] // 2
        if self.links < 1 or self.flow_x.kernel.shape[-1] != 2 * self.links:
            raise ValueError("flow convolution must produce 2 * links channels")
        if self.aggregate.kernel.shape[2] != self.links * self.base.hidden:
            raise ValueError("aggregate conv must take links * hidden channels")


# ---------------------------------------------------------------------------
# initialisation


def _glorot(rng, shape):
    kh, kw, cin, cout = shape
    scale = np.sqrt(2.0 / (kh * kw * (cin + cout)))
    return rng.standard_normal(shape) * scale


def init_bottleneck(rng, channels: int, hidden: int, skip: bool = True) -> Bottleneck:
    return Bottleneck(ConvParams(_glorot(rng, (1, 1, channels, hidden)), np.zeros(hidden)),
                      ConvParams(_glorot(rng, (1, 1, hidden, channels)), np.zeros(channels)), skip)


def init_convlstm(rng, c_in: int, hidden: int, kernel: int = 3, candidate: str = "sigmoid",
                  bottleneck: Bottleneck | None = None, forget_bias: float = 1.0) -> ConvLSTMParams:
    """Random ConvLSTM. With a bottleneck, ``c_in`` is the pre-projection width."""
    gate_in = bottleneck.down.kernel.shape[-1] if bottleneck is not None else c_in
    bias = np.zeros(4 * hidden)
    bias[2 * hidden:3 * hidden] = forget_bias
    return ConvLSTMParams(ConvParams(_glorot(rng, (kernel, kernel, gate_in, 4 * hidden)), bias),
                          _glorot(rng, (kernel, kernel, hidden, 4 * hidden)), candidate, bottleneck)


def init_warplstm(rng, c_in: int, hidden: int, kernel: int = 3, grid=(3, 3), **kw) -> WarpLSTMParams:
    """Warp LSTM whose displacement conv starts at zero (an exact ConvLSTM)."""
    opts = {k: kw.pop(k) for k in ("order", "regularization", "boundary", "fixed_sites") if k in kw}
    base = init_convlstm(rng, c_in, hidden, kernel, **kw)
    gate_in = base.wx.kernel.shape[2]
    return WarpLSTMParams(base, ConvParams.zeros(1, 1, gate_in, 2), np.zeros((1, 1, hidden, 2)),
                          tuple(grid), **opts)


def init_trajlstm(rng, c_in: int, hidden: int, kernel: int = 3, links: int = 5, **kw) -> TrajLSTMParams:
    base = init_convlstm(rng, c_in, hidden, kernel, **kw)
    gate_in = base.wx.kernel.shape[2]
    agg = np.zeros((1, 1, links * hidden, hidden))
    for l in range(links):
        agg[0, 0, l * hidden:(l + 1) * hidden] = np.eye(hidden) / links
    return TrajLSTMParams(base, ConvParams.zeros(kernel, kernel, gate_in, 2 * links),
                          np.zeros((kernel, kernel, hidden, 2 * links)), ConvParams(agg, np.zeros(hidden)))


# ---------------------------------------------------------------------------
# bottleneck


def _bottleneck_in(base: ConvLSTMParams, x):
    bn = base.bottleneck
    return x if bn is None else conv2d_raw(x, bn.down.kernel, bn.down.bias)


def _bottleneck_in_backward(base, grads, x, dxb):
    bn = base.bottleneck
    if bn is None:
        return dxb
    dx, dk, db = conv2d_vjp(dxb, x, bn.down.kernel)
    gbn = _base(grads).bottleneck
    gbn.down.kernel += dk
    gbn.down.bias += db
    return dx


def export(params, x, state: CellState) -> np.ndarray:
    """Representation handed downstream: ``x + up(h)`` with a skip bottleneck, else ``h``."""
    base = _base(params)
    bn = base.bottleneck
    if bn is None:
        return state.h
    up = conv2d_raw(state.h, bn.up.kernel, bn.up.bias)
    return as_tensor(x) + up if bn.skip else up


def export_backward(params, grads, h, g):
    """Returns ``(dx, dh)`` for :func:`export`, accumulating ``up`` grads."""
    base = _base(params)
    bn = base.bottleneck
    if bn is None:
        return None, g
    dh, dk, db = conv2d_vjp(g, h, bn.up.kernel)
    gb = _base(grads).bottleneck
    gb.up.kernel += dk
    gb.up.bias += db
    return (g if bn.skip else None), dh


def _base(params) -> ConvLSTMParams:
    return params if isinstance(params, ConvLSTMParams) else params.base


# ---------------------------------------------------------------------------
# shared gating


def _check_state(x, prev: CellState, base: ConvLSTMParams):
    if x.shape[:-1] != prev.h.shape[:-1]:
        raise ValueError(f"input spatial dims {x.shape[:-1]} differ from state dims {prev.h.shape[:-1]}")
    if prev.h.shape[-1] != base.hidden:
        raise ValueError(f"state has {prev.h.shape[-1]} channels, cell expects {base.hidden}")


def _gates_forward(base: ConvLSTMParams, xb, h, c):
    z = conv2d_raw(xb, base.wx.kernel, base.wx.bias) + conv2d_raw(h, base.wh, None)
    nb = base.hidden
    i = sigmoid(z[..., :nb])
    g = activation(z[..., nb:2 * nb], base.candidate)
    f = sigmoid(z[..., 2 * nb:3 * nb])
    o = sigmoid(z[..., 3 * nb:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return CellState(h_new, c_new), (xb, h, c, i, g, f, o, tc)


def _gates_backward(base, grads, cache, dh, dc):
    xb, h, c, i, g, f, o, tc = cache
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    dz = np.concatenate([
        (dc * g) * i * (1.0 - i),
        activation_vjp_from_output(dc * i, g, base.candidate),
        (dc * c) * f * (1.0 - f),
        do * o * (1.0 - o),
    ], axis=-1)
    dxb, dk, db = conv2d_vjp(dz, xb, base.wx.kernel)
    gbase = _base(grads)
    gbase.wx.kernel += dk
    gbase.wx.bias += db
    dh_prev, dkh, _ = conv2d_vjp(dz, h, base.wh)
    gbase.wh += dkh
    return dxb, dh_prev, dc * f


# ---------------------------------------------------------------------------
# ConvLSTM


def convlstm_forward(params: ConvLSTMParams, x, prev: CellState):
    x = as_tensor(x)
    _check_state(x, prev, params)
    xb = _bottleneck_in(params, x)
    state, gcache = _gates_forward(params, xb, prev.h, prev.c)
    return state, (x, gcache)


def convlstm_backward(params: ConvLSTMParams, grads, cache, dh, dc):
    """Returns ``(dx, dh_prev, dc_prev)``."""
    x, gcache = cache
    dxb, dh_prev, dc_prev = _gates_backward(params, grads, gcache, dh, dc)
    return _bottleneck_in_backward(params, grads, x, dxb), dh_prev, dc_prev


def convlstm_step(params: ConvLSTMParams, x, prev: CellState) -> CellState:
    return convlstm_forward(params, x, prev)[0]


# ---------------------------------------------------------------------------
# warp LSTM


def control_points(params: WarpLSTMParams, H: int, W: int):
    interior = spline.grid_control_points(H, W, *params.grid)
    boundary = spline.boundary_points(H, W) if params.boundary else np.zeros((0, 2))
    return interior, boundary


def _displacement_map(params: WarpLSTMParams, xb, h):
    return conv2d_raw(xb, params.disp_x.kernel, params.disp_x.bias) + conv2d_raw(h, params.disp_h, None)


def predict_displacements(params: WarpLSTMParams, x, h_prev) -> spline.ControlPointSet:
    """Displacements read off the 2-channel displacement map at the control grid."""
    x = as_tensor(x)
    h_prev = as_tensor(h_prev)
    if x.ndim != 3:
        raise ValueError("predict_displacements takes a single [H, W, C] input")
    H, W = x.shape[:2]
    interior, boundary = control_points(params, H, W)
    dmap = _displacement_map(params, _bottleneck_in(params.base, x), h_prev)
    xi, yi = interior[:, 0].astype(int), interior[:, 1].astype(int)
    return spline.ControlPointSet(interior, dmap[yi, xi, :], boundary)


def warplstm_forward(params: WarpLSTMParams, x, prev: CellState):
    """One warp-LSTM step; returns ``((state, flow), cache)``."""
    base = params.base
    x = as_tensor(x)
    _check_state(x, prev, base)
    H, W = x.shape[-3:-1]
    xb = _bottleneck_in(base, x)
    interior, boundary = control_points(params, H, W)
    xi, yi = interior[:, 0].astype(int), interior[:, 1].astype(int)
    dmap = _displacement_map(params, xb, prev.h)
    disp = dmap[..., yi, xi, :]
    hc = np.concatenate([prev.h, prev.c], axis=-1)
    warped, flow, wcache = spline.warp_forward(hc, interior, boundary, disp, params.order,
                                               params.regularization, params.fixed_sites)
    nb = base.hidden
    state, gcache = _gates_forward(base, xb, warped[..., :nb], warped[..., nb:])
    return (state, flow), (x, xb, prev.h, dmap.shape, (yi, xi), wcache, gcache)


def warplstm_backward(params: WarpLSTMParams, grads, cache, dh, dc):
    base = params.base
    x, xb, h_prev, dshape, (yi, xi), wcache, gcache = cache
    dxb, dhw, dcw = _gates_backward(base, grads, gcache, dh, dc)
    dhc, ddisp = spline.warp_backward(wcache, np.concatenate([dhw, dcw], axis=-1))
    nb = base.hidden
    dh_prev = dhc[..., :nb].copy()
    dc_prev = dhc[..., nb:]
    ddmap = np.zeros(dshape, dtype=DTYPE)
    ddmap[..., yi, xi, :] = ddisp
    dxd, dk, db = conv2d_vjp(ddmap, xb, params.disp_x.kernel)
    grads.disp_x.kernel += dk
    grads.disp_x.bias += db
    dhd, dkh, _ = conv2d_vjp(ddmap, h_prev, params.disp_h)
    grads.disp_h += dkh
    dh_prev += dhd
    return _bottleneck_in_backward(base, grads, x, dxb + dxd), dh_prev, dc_prev


def warplstm_step(params: WarpLSTMParams, x, prev: CellState) -> tuple[CellState, np.ndarray]:
    """Returns the new state and the ``(dy, dx)`` flow used to warp ``(h, c)``."""
    return warplstm_forward(params, x, prev)[0]


# ---------------------------------------------------------------------------
# TrajLSTM-lite


def trajlstm_forward(params: TrajLSTMParams, x, prev: CellState):
    base = params.base
    x = as_tensor(x)
    _check_state(x, prev, base)
    xb = _bottleneck_in(base, x)
    fm = conv2d_raw(xb, params.flow_x.kernel, params.flow_x.bias) + conv2d_raw(prev.h, params.flow_h, None)
    L = params.links
    copies = [dense_warp(prev.h, fm[..., 2 * l:2 * l + 2]) for l in range(L)]
    stacked = np.concatenate(copies, axis=-1)
    h_w = conv2d_raw(stacked, params.aggregate.kernel, params.aggregate.bias)
    mean_flow = fm.reshape(fm.shape[:-1] + (L, 2)).mean(axis=-2)
    c_w = dense_warp(prev.c, mean_flow)
    state, gcache = _gates_forward(base, xb, h_w, c_w)
    return state, (x, xb, prev.h, prev.c, fm, mean_flow, stacked, gcache)


def trajlstm_backward(params: TrajLSTMParams, grads, cache, dh, dc):
    base = params.base
    x, xb, h, c, fm, mean_flow, stacked, gcache = cache
    L = params.links
    dxb, dhw, dcw = _gates_backward(base, grads, gcache, dh, dc)
    dstacked, dk, db = conv2d_vjp(dhw, stacked, params.aggregate.kernel)
    grads.aggregate.kernel += dk
    grads.aggregate.bias += db
    dc_prev, dmean = dense_warp_vjp(dcw, c, mean_flow)
    nb = base.hidden
    dh_prev = np.zeros_like(h)
    dfm = np.empty_like(fm)
    for l in range(L):
        dh_l, dflow = dense_warp_vjp(dstacked[..., l * nb:(l + 1) * nb], h, fm[..., 2 * l:2 * l + 2])
        dh_prev += dh_l
        dfm[..., 2 * l:2 * l + 2] = dflow + dmean / L
    dxf, dkx, dbx = conv2d_vjp(dfm, xb, params.flow_x.kernel)
    grads.flow_x.kernel += dkx
    grads.flow_x.bias += dbx
    dhf, dkh, _ = conv2d_vjp(dfm, h, params.flow_h)
    grads.flow_h += dkh
    dh_prev += dhf
    return _bottleneck_in_backward(base, grads, x, dxb + dxf), dh_prev, dc_prev


def trajlstm_step(params: TrajLSTMParams, x, prev: CellState) -> CellState:
    return trajlstm_forward(params, x, prev)[0]


# ---------------------------------------------------------------------------
# ConvLSTM with an externally supplied flow


def flowlstm_forward(params: ConvLSTMParams, x, prev: CellState, flow):
    """ConvLSTM whose previous state is backward-warped by a given ``(dy, dx)`` flow."""
    x = as_tensor(x)
    _check_state(x, prev, params)
    flow = as_tensor(flow)
    xb = _bottleneck_in(params, x)
    nb = params.hidden
    hc = dense_warp(np.concatenate([prev.h, prev.c], axis=-1), flow)
    state, gcache = _gates_forward(params, xb, hc[..., :nb], hc[..., nb:])
    return state, (x, prev, flow, gcache)


def flowlstm_backward(params: ConvLSTMParams, grads, cache, dh, dc):
    x, prev, flow, gcache = cache
    dxb, dhw, dcw = _gates_backward(params, grads, gcache, dh, dc)
    dhc, _ = dense_warp_vjp(np.concatenate([dhw, dcw], axis=-1),
                            np.concatenate([prev.h, prev.c], axis=-1), flow)
    nb = params.hidden
    return _bottleneck_in_backward(params, grads, x, dxb), dhc[..., :nb], dhc[..., nb:]


# ---------------------------------------------------------------------------
# sequences


def step(params, x, prev: CellState) -> CellState:
    """Dispatch one step on the parameter type."""
    if isinstance(params, WarpLSTMParams):
        return warplstm_step(params, x, prev)[0]
    if isinstance(params, TrajLSTMParams):
        return trajlstm_step(params, x, prev)
    if isinstance(params, ConvLSTMParams):
        return convlstm_step(params, x, prev)
    raise TypeError(f"unknown cell parameters {type(params).__name__}")


def run_sequence(params, inputs, init: CellState | None = None) -> list[CellState]:
    """Left fold of :func:`step` over ``inputs``; zero initial state by default."""
    inputs = [as_tensor(x) for x in inputs]
    if not inputs:
        return []
    shape = inputs[0].shape
    if any(x.shape != shape for x in inputs):
        raise ValueError("all inputs in a sequence must share dims")
    state = init if init is not None else CellState.zeros(shape[:-1] + (_base(params).hidden,))
    states = []
    for x in inputs:
        state = step(params, x, state)
        states.append(state)
    return states


def new_grads(params):
    return zeros_like(params)
