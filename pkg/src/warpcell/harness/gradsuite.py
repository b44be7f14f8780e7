"""Registry of differentiable operations and the finite-difference suite over it."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from .. import cells, matching, spline
from ..gradcheck import DiffOp, finite_diff_check
from ..params import map_arrays, named_arrays
from ..tensor import ConvParams, activation, activation_vjp, bilinear_sample, bilinear_sample_vjp, conv2d_raw, conv2d_vjp

TOLERANCE = 1e-5
H = W = 12
C = 4
HIDDEN = 2

# each builder takes an rng and returns (op, point)
Builder = Callable[[np.random.Generator], tuple[DiffOp, list]]


def _conv2d(rng):
    def vjp(g, x, k, b):
        return conv2d_vjp(g, x, k)
    op = DiffOp("conv2d", lambda x, k, b: conv2d_raw(x, k, b), vjp)
    return op, [rng.standard_normal((2, 7, 6, 3)), rng.standard_normal((3, 3, 3, 4)), rng.standard_normal(4)]


def _act(kind):
    def build(rng):
        op = DiffOp(kind, lambda x: activation(x, kind), lambda g, x: (activation_vjp(g, x, kind),))
        return op, [rng.standard_normal((5, 4, 3)) * 2]
    return build


def _bilinear(rng):
    op = DiffOp("bilinear_sample", bilinear_sample, bilinear_sample_vjp)
    # generic fractional coordinates, some partly outside the map
    ys = rng.uniform(-0.8, 7.8, (2, 30))
    xs = rng.uniform(-0.8, 6.8, (2, 30))
    return op, [rng.standard_normal((2, 7, 6, 3)), ys, xs]


def _interpolant(order):
    def build(rng):
        def fwd(sites, values, queries):
            return spline.interpolate(sites, values, queries, order)

        def vjp(g, sites, values, queries):
            return spline.interpolate_vjp(g, sites, values, queries, order)
        sites = rng.uniform(0, 10, (9, 2))
        return (DiffOp(f"interpolant_order{order}", fwd, vjp),
                [sites, rng.standard_normal((9, 2)), rng.uniform(0, 10, (15, 2))])
    return build


def _warp_cps(disp):
    interior = spline.grid_control_points(H, W)
    return spline.ControlPointSet(interior, disp, spline.boundary_points(H, W))


def _sparse_warp(rng):
    def fwd(map_, disp):
        return spline.sparse_warp(map_, _warp_cps(disp))

    def vjp(g, map_, disp):
        return spline.sparse_warp_vjp(g, map_, _warp_cps(disp))
    return DiffOp("sparse_warp", fwd, vjp), [rng.standard_normal((H, W, C)), rng.uniform(-1.5, 1.5, (9, 2))]


def _roi_pool(rng):
    box = (0.13, 0.21, 0.82, 0.77)
    op = DiffOp("roi_pool", lambda m: matching.roi_pool(m, box), lambda g, m: (matching.roi_pool_vjp(g, m, box),))
    return op, [rng.standard_normal((H, W, C))]


def _attention_pool(rng):
    # b_s is held fixed: softmax shift invariance makes its gradient exactly zero,
    # so its relative error would only measure round-off
    def params(Wq, Wr, w, bp):
        return matching.AttentionParams(Wq, Wr, w, bp, 0.2)

    def fwd(fq, fp, *ps):
        return matching.attention_pool(list(fq), fp, params(*ps))

    def vjp(g, fq, fp, *ps):
        dq, dp, gp = matching.attention_pool_vjp(g, list(fq), fp, params(*ps))
        return dq, dp, gp.W_q, gp.W_r, gp.w, gp.b_p
    p = matching.AttentionParams.init(rng, 8)
    return DiffOp("attention_pool", fwd, vjp), [
        rng.standard_normal((3, 7, 7, 8)), rng.standard_normal((7, 7, 8)),
        p.W_q, p.W_r, p.w, rng.standard_normal(p.b_p.shape) * 0.3]


def _correspondence(rng):
    def head(k, b, dw, db):
        return matching.CorrespondenceHead(ConvParams(k, b), dw, float(db))

    def fwd(p, q, *hs):
        return np.array(matching.correspondence_score(p, q, head(*hs)))

    def vjp(g, p, q, *hs):
        dp, dq, gh = matching.correspondence_score_vjp(float(g), p, q, head(*hs))
        return dp, dq, gh.conv.kernel, gh.conv.bias, gh.dense_w, np.array(gh.dense_b)
    h = matching.CorrespondenceHead.init(rng, 4, hidden=4)
    return DiffOp("correspondence_head", fwd, vjp), [
        rng.standard_normal((7, 7, 4)), rng.standard_normal((7, 7, 4)),
        h.conv.kernel, rng.standard_normal(4) * 0.1, h.dense_w, np.array(0.1)]


def _cell(name, params, forward, backward):
    """Wrap one cell step as ``(x, h, c, *params) -> concat(h', c')``."""
    names = list(named_arrays(params))

    def with_weights(ws):
        q = map_arrays(np.copy, params)
        arrays = named_arrays(q)
        for n, w in zip(names, ws):
            arrays[n][...] = w
        return q

    def fwd(x, h, c, *ws):
        out = forward(with_weights(ws), x, cells.CellState(h, c))[0]
        state = out[0] if isinstance(out, tuple) else out
        return np.concatenate([state.h, state.c], axis=-1)

    def vjp(g, x, h, c, *ws):
        q = with_weights(ws)
        cache = forward(q, x, cells.CellState(h, c))[1]
        grads = cells.new_grads(q)
        dx, dh, dc = backward(q, grads, cache, g[..., :HIDDEN], g[..., HIDDEN:])
        ga = named_arrays(grads)
        return [dx, dh, dc] + [ga[n] for n in names]

    def build(rng):
        pt = [rng.standard_normal((H, W, C)), rng.standard_normal((H, W, HIDDEN)),
              rng.standard_normal((H, W, HIDDEN))]
        return DiffOp(name, fwd, vjp), pt + [named_arrays(params)[n] for n in names]
    return build


def _convlstm(rng):
    p = cells.init_convlstm(rng, C, HIDDEN, bottleneck=cells.init_bottleneck(rng, C, HIDDEN))
    return _cell("convlstm_cell", p, cells.convlstm_forward, cells.convlstm_backward)(rng)


def _warplstm(rng):
    # nonzero displacement weights: the zero init samples exactly on bilinear kinks
    p = cells.init_warplstm(rng, C, HIDDEN, bottleneck=cells.init_bottleneck(rng, C, HIDDEN))
    p.disp_x.kernel[:] = rng.standard_normal(p.disp_x.kernel.shape) * 0.3
    p.disp_x.bias[:] = rng.standard_normal(2)
    p.disp_h[:] = rng.standard_normal(p.disp_h.shape) * 0.3
    return _cell("warplstm_cell", p, cells.warplstm_forward, cells.warplstm_backward)(rng)


def _trajlstm(rng):
    p = cells.init_trajlstm(rng, C, HIDDEN, links=2, bottleneck=cells.init_bottleneck(rng, C, HIDDEN))
    p.flow_x.kernel[:] = rng.standard_normal(p.flow_x.kernel.shape) * 0.2
    p.flow_x.bias[:] = rng.standard_normal(p.flow_x.bias.shape)
    p.flow_h[:] = rng.standard_normal(p.flow_h.shape) * 0.2
    return _cell("trajlstm_cell", p, cells.trajlstm_forward, cells.trajlstm_backward)(rng)


REGISTRY: dict[str, Builder] = {
    "conv2d": _conv2d,
    "sigmoid": _act("sigmoid"),
    "tanh": _act("tanh"),
    "bilinear_sample": _bilinear,
    "interpolant_order1": _interpolant(1),
    "interpolant_order2": _interpolant(2),
    "sparse_warp": _sparse_warp,
    "roi_pool": _roi_pool,
    "attention_pool": _attention_pool,
    "correspondence_head": _correspondence,
    "convlstm_cell": _convlstm,
    "warplstm_cell": _warplstm,
    "trajlstm_cell": _trajlstm,
}


def gradcheck_suite(seed: int = 0, registry: dict[str, Builder] | None = None,
                    tolerance: float = TOLERANCE) -> dict:
    """Run every registered op once; ``report["passed"]`` is False iff any error exceeds ``tolerance``."""
    registry = REGISTRY if registry is None else registry
    t0 = time.perf_counter()
    ops = []
    for i, (name, build) in enumerate(registry.items()):
        rng = np.random.default_rng([seed, i])
        op, point = build(rng)
        rep = finite_diff_check(op, point, seed=seed)
        ops.append({"op": name, "max_rel_error": rep.max_rel_error, "argument_index": rep.argument_index,
                    "passed": bool(rep.max_rel_error <= tolerance)})
    return {"seed": seed, "tolerance": tolerance, "ops": ops, "passed": all(o["passed"] for o in ops),
            "seconds": time.perf_counter() - t0}
