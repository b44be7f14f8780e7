import math

import numpy as np
import pytest

from warpcell import cells
from warpcell.cells import (CellState, ConvLSTMParams, TrajLSTMParams, WarpLSTMParams, convlstm_step, export,
                            init_bottleneck, init_convlstm, init_trajlstm, init_warplstm, predict_displacements,
                            run_sequence, trajlstm_step, warplstm_step)
from warpcell.gradcheck import DiffOp, finite_diff_check
from warpcell.params import copy_params, load_arrays, map_arrays, named_arrays, save_arrays, assign_arrays
from warpcell.tensor import ConvParams, conv2d


def zero_convlstm(c_in=2, hidden=1, k=3, candidate="sigmoid"):
    return ConvLSTMParams(ConvParams.zeros(k, k, c_in, 4 * hidden), np.zeros((k, k, hidden, 4 * hidden)), candidate)


def with_disp_bias(base, bias, boundary=True):
    c_in = base.wx.kernel.shape[2]
    disp = ConvParams(np.zeros((1, 1, c_in, 2)), np.asarray(bias, float))
    return WarpLSTMParams(base, disp, np.zeros((1, 1, base.hidden, 2)), boundary=boundary)


def shift(m, dy, dx):
    out = np.zeros_like(m)
    H, W = m.shape[:2]
    out[max(dy, 0):H + min(dy, 0), max(dx, 0):W + min(dx, 0)] = m[max(-dy, 0):H - max(dy, 0),
                                                                    max(-dx, 0):W - max(dx, 0)]
    return out


# -- ConvLSTM ----------------------------------------------------------------

def test_zero_weight_recurrence():
    p = zero_convlstm()
    x = np.random.default_rng(0).standard_normal((4, 5, 2))
    s1 = convlstm_step(p, x, CellState.zeros((4, 5, 1)))
    np.testing.assert_allclose(s1.c, 0.25, atol=1e-15)
    np.testing.assert_allclose(s1.h, 0.5 * math.tanh(0.25), atol=1e-15)
    assert abs(s1.h[0, 0, 0] - 0.1224593) < 1e-7
    s2 = convlstm_step(p, x, s1)
    np.testing.assert_allclose(s2.c, 0.375, atol=1e-15)


def test_saturated_gates():
    p = zero_convlstm()
    p.wx.bias[:] = -1000.0
    s = convlstm_step(p, np.ones((3, 3, 2)), CellState.zeros((3, 3, 1)))
    assert np.all(s.c == 0) and np.all(s.h == 0)


def test_tanh_candidate():
    p = zero_convlstm(candidate="tanh")
    s = convlstm_step(p, np.ones((3, 3, 2)), CellState.zeros((3, 3, 1)))
    assert np.all(s.c == 0)  # g = tanh(0) = 0
    with pytest.raises(ValueError):
        zero_convlstm(candidate="relu")


def test_gate_views_follow_fused_order():
    p = init_convlstm(np.random.default_rng(1), 3, 2)
    wx, wh, b = p.gate("f")
    assert wx.shape == (3, 3, 3, 2) and wh.shape == (3, 3, 2, 2)
    np.testing.assert_array_equal(b, 1.0)  # forget bias init
    np.testing.assert_array_equal(wx, p.wx.kernel[..., 4:6])


def test_convlstm_matches_gate_equations():
    rng = np.random.default_rng(2)
    p = init_convlstm(rng, 3, 2)
    x = rng.standard_normal((5, 5, 3))
    prev = CellState(rng.standard_normal((5, 5, 2)), rng.standard_normal((5, 5, 2)))

    def sig(z):
        return 1 / (1 + np.exp(-z))

    def pre(name):
        wx, wh, b = p.gate(name)
        return conv2d(x, ConvParams(wx, b)) + conv2d(prev.h, ConvParams(wh, np.zeros(2)))
    i, g, f, o = (sig(pre(n)) for n in ("i", "g", "f", "o"))
    c = f * prev.c + i * g
    s = convlstm_step(p, x, prev)
    np.testing.assert_allclose(s.c, c, atol=1e-13)
    np.testing.assert_allclose(s.h, o * np.tanh(c), atol=1e-13)


def test_gate_ranges_bound_memory():
    rng = np.random.default_rng(3)
    p = init_convlstm(rng, 2, 2)
    state = CellState.zeros((6, 6, 2))
    for _ in range(10):
        new = convlstm_step(p, rng.standard_normal((6, 6, 2)) * 3, state)
        assert np.all(new.c <= state.c * (state.c > 0) + 1.0 + 1e-12)
        assert np.all(np.abs(new.h) < 1)
        state = new


def test_shape_mismatch():
    p = init_convlstm(np.random.default_rng(4), 2, 1)
    with pytest.raises(ValueError):
        convlstm_step(p, np.zeros((4, 4, 2)), CellState.zeros((5, 4, 1)))
    with pytest.raises(ValueError):
        convlstm_step(p, np.zeros((4, 4, 3)), CellState.zeros((4, 4, 1)))
    with pytest.raises(ValueError):
        CellState(np.zeros((2, 2, 1)), np.zeros((2, 2, 2)))


# -- displacement prediction -------------------------------------------------

def test_predicted_displacements():
    rng = np.random.default_rng(5)
    base = init_convlstm(rng, 3, 2)
    x = rng.standard_normal((20, 20, 3))
    h = rng.standard_normal((20, 20, 2))
    assert np.all(predict_displacements(with_disp_bias(base, [0, 0]), x, h).displacements == 0)
    cps = predict_displacements(with_disp_bias(base, [2, 0]), x, h)
    np.testing.assert_array_equal(cps.displacements, np.tile([2.0, 0.0], (9, 1)))
    assert len(cps.boundary) == 8
    p = init_warplstm(rng, 3, 2)
    p.disp_x.kernel[:] = rng.standard_normal(p.disp_x.kernel.shape)
    p.disp_x.bias[:] = rng.standard_normal(2)
    p.disp_h[:] = rng.standard_normal(p.disp_h.shape)
    cps = predict_displacements(p, x, h)
    dmap = conv2d(x, p.disp_x) + conv2d(h, ConvParams(p.disp_h, np.zeros(2)))
    for (cx, cy), d in zip(cps.interior.astype(int), cps.displacements):
        np.testing.assert_allclose(d, dmap[cy, cx], atol=1e-14)
    assert {tuple(v) for v in cps.interior.astype(int).tolist()} == {(a, b) for a in (5, 10, 15) for b in (5, 10, 15)}


# -- warp LSTM ---------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_warp_reduces_to_convlstm_bitwise(seed):
    rng = np.random.default_rng(seed)
    bn = init_bottleneck(rng, 4, 2) if seed % 2 else None
    w = init_warplstm(rng, 4, 2, bottleneck=bn)
    x = rng.standard_normal((12, 12, 4))
    prev = CellState(rng.standard_normal((12, 12, 2)), rng.standard_normal((12, 12, 2)))
    (sw, flow) = warplstm_step(w, x, prev)
    sc = convlstm_step(w.base, x, prev)
    assert np.array_equal(sw.h, sc.h) and np.array_equal(sw.c, sc.c)
    assert np.all(flow == 0)


def test_warp_uniform_shift_of_state():
    rng = np.random.default_rng(6)
    p = with_disp_bias(zero_convlstm(hidden=1), [2.0, 1.0], boundary=False)
    p.regularization = 0.0
    h = rng.standard_normal((12, 12, 1))
    c = rng.standard_normal((12, 12, 1))
    s, flow = warplstm_step(p, np.zeros((12, 12, 2)), CellState(h, c))
    # zero gate weights: f = i = g = o = 1/2, so c' = 0.5 * warp(c) + 0.25
    np.testing.assert_allclose(flow[..., 1], 2.0, atol=1e-8)
    np.testing.assert_allclose(flow[..., 0], 1.0, atol=1e-8)
    np.testing.assert_allclose(s.c, 0.5 * shift(c, 1, 2) + 0.25, atol=1e-8)


# -- TrajLSTM-lite -----------------------------------------------------------

def test_traj_reduces_to_convlstm():
    rng = np.random.default_rng(7)
    p = init_trajlstm(rng, 3, 2, links=5)
    x = rng.standard_normal((8, 8, 3))
    prev = CellState(rng.standard_normal((8, 8, 2)), rng.standard_normal((8, 8, 2)))
    a = trajlstm_step(p, x, prev)
    b = convlstm_step(p.base, x, prev)
    np.testing.assert_allclose(a.h, b.h, atol=1e-12)
    np.testing.assert_allclose(a.c, b.c, atol=1e-12)
    assert p.links == 5


def test_traj_single_link_constant_flow():
    base = zero_convlstm(hidden=1)
    flow_x = ConvParams(np.zeros((3, 3, 2, 2)), np.array([1.0, -2.0]))  # (dy, dx)
    p = TrajLSTMParams(base, flow_x, np.zeros((3, 3, 1, 2)), ConvParams(np.ones((1, 1, 1, 1)), np.zeros(1)))
    rng = np.random.default_rng(8)
    h, c = rng.standard_normal((9, 9, 1)), rng.standard_normal((9, 9, 1))
    s = trajlstm_step(p, np.zeros((9, 9, 2)), CellState(h, c))
    np.testing.assert_allclose(s.c, 0.5 * shift(c, 1, -2) + 0.25, atol=1e-14)


def test_traj_param_validation():
    base = zero_convlstm(hidden=1)
    with pytest.raises(ValueError):
        TrajLSTMParams(base, ConvParams.zeros(3, 3, 2, 3), np.zeros((3, 3, 1, 3)), ConvParams.zeros(1, 1, 1, 1))
    with pytest.raises(ValueError):
        TrajLSTMParams(base, ConvParams.zeros(3, 3, 2, 4), np.zeros((3, 3, 1, 4)), ConvParams.zeros(1, 1, 1, 1))


# -- sequences ---------------------------------------------------------------

def test_run_sequence():
    rng = np.random.default_rng(9)
    p = init_warplstm(rng, 3, 2)
    p.disp_x.bias[:] = (0.7, -0.4)
    xs = [rng.standard_normal((12, 12, 3)) for _ in range(3)]
    assert run_sequence(p, []) == []
    one = run_sequence(p, xs[:1])
    assert len(one) == 1
    s = CellState.zeros((12, 12, 2))
    for x in xs:
        s = warplstm_step(p, x, s)[0]
    last = run_sequence(p, xs)[-1]
    assert np.array_equal(last.h, s.h) and np.array_equal(last.c, s.c)
    with pytest.raises(ValueError):
        run_sequence(p, [xs[0], xs[0][:5]])


# -- bottleneck / export -----------------------------------------------------

def test_export_with_skip():
    rng = np.random.default_rng(10)
    bn = init_bottleneck(rng, 8, 1)
    p = init_convlstm(rng, 8, 1, bottleneck=bn)
    x = rng.standard_normal((6, 6, 8))
    s = convlstm_step(p, x, CellState.zeros((6, 6, 1)))
    rep = export(p, x, s)
    np.testing.assert_allclose(rep, x + conv2d(s.h, bn.up), atol=1e-14)
    bn.skip = False
    np.testing.assert_allclose(export(p, x, s), conv2d(s.h, bn.up), atol=1e-14)
    plain = init_convlstm(rng, 8, 3)
    s2 = convlstm_step(plain, x, CellState.zeros((6, 6, 3)))
    assert np.array_equal(export(plain, x, s2), s2.h)


# -- gradients ---------------------------------------------------------------

def _cell_op(params, forward, backward, nb):
    names = list(named_arrays(params))

    def with_weights(ws):
        q = map_arrays(np.copy, params)
        arr = named_arrays(q)
        for n, w in zip(names, ws):
            arr[n][...] = w
        return q

    def fwd(x, h, c, *ws):
        out = forward(with_weights(ws), x, CellState(h, c))[0]
        st = out[0] if isinstance(out, tuple) else out
        return np.concatenate([st.h, st.c], axis=-1)

    def vjp(g, x, h, c, *ws):
        q = with_weights(ws)
        cache = forward(q, x, CellState(h, c))[1]
        gr = cells.new_grads(q)
        dx, dh, dc = backward(q, gr, cache, g[..., :nb], g[..., nb:])
        ga = named_arrays(gr)
        return [dx, dh, dc] + [ga[n] for n in names]
    return DiffOp("cell", fwd, vjp), [named_arrays(params)[n] for n in names]


@pytest.mark.parametrize("kind", ["conv", "warp", "traj", "flow"])
@pytest.mark.parametrize("bottleneck", [False, True])
def test_cell_gradients(kind, bottleneck):
    rng = np.random.default_rng(11)
    C, nb = 4, 2
    bn = init_bottleneck(rng, C, nb) if bottleneck else None
    if kind == "warp":
        p = init_warplstm(rng, C, nb, bottleneck=bn)
        p.disp_x.kernel[:] = rng.standard_normal(p.disp_x.kernel.shape) * 0.3
        p.disp_x.bias[:] = rng.standard_normal(2)
        p.disp_h[:] = rng.standard_normal(p.disp_h.shape) * 0.3
        fw, bw = cells.warplstm_forward, cells.warplstm_backward
    elif kind == "traj":
        p = init_trajlstm(rng, C, nb, links=2, bottleneck=bn)
        p.flow_x.kernel[:] = rng.standard_normal(p.flow_x.kernel.shape) * 0.2
        p.flow_x.bias[:] = rng.standard_normal(4)
        p.flow_h[:] = rng.standard_normal(p.flow_h.shape) * 0.2
        fw, bw = cells.trajlstm_forward, cells.trajlstm_backward
    elif kind == "flow":
        p = init_convlstm(rng, C, nb, bottleneck=bn, candidate="tanh")
        flow = rng.uniform(-1.5, 1.5, (12, 12, 2))

        def fw(q, x, prev):
            return cells.flowlstm_forward(q, x, prev, flow)
        bw = cells.flowlstm_backward
    else:
        p = init_convlstm(rng, C, nb, bottleneck=bn)
        fw, bw = cells.convlstm_forward, cells.convlstm_backward
    op, weights = _cell_op(p, fw, bw, nb)
    pt = [rng.standard_normal((12, 12, C)), rng.standard_normal((12, 12, nb)), rng.standard_normal((12, 12, nb))]
    assert finite_diff_check(op, pt + weights).max_rel_error <= 1e-5


# -- motion compensation -----------------------------------------------------

def _blob(H, W, cy, cx, r=1.5):
    yy, xx = np.mgrid[0:H, 0:W]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))[..., None]


def _memory_cell():
    """One-channel cell that mostly accumulates memory: f ~ 1, o ~ 1, input writes the blob."""
    p = zero_convlstm(c_in=1, hidden=1)
    k, b = p.wx.kernel, p.wx.bias
    k[1, 1, 0, 1] = 6.0  # g responds to the centre pixel
    b[:] = (0.0, -3.0, 10.0, 10.0)  # i, g, f, o
    return p


def test_warp_keeps_peak_on_moving_blob():
    H = W = 20
    sy, sx = 0, 2
    frames = [_blob(H, W, 10, 3 + sx * t) for t in range(7)]
    base = _memory_cell()
    warp = with_disp_bias(base, [sx, sy], boundary=False)
    sw = sc = CellState.zeros((H, W, 1))
    for x in frames:
        sw = warplstm_step(warp, x, sw)[0]
        sc = convlstm_step(base, x, sc)
    target = np.array([10, 3 + sx * 6])

    def peak(h):
        return np.array(np.unravel_index(np.argmax(h.mean(-1)), h.shape[:2]))
    assert np.abs(peak(sw.h) - target).max() <= 1
    assert peak(sc.h)[1] < target[1] - 1  # the plain cell's peak lags behind


# -- parameter IO ------------------------------------------------------------

def test_params_roundtrip(tmp_path):
    rng = np.random.default_rng(12)
    p = init_warplstm(rng, 4, 2, bottleneck=init_bottleneck(rng, 4, 2))
    arrays = named_arrays(p)
    assert "base.wx.kernel" in arrays and "disp_h" in arrays
    save_arrays(tmp_path, arrays)
    manifest = (tmp_path / "manifest.txt").read_text().splitlines()
    assert len(manifest) == len(arrays)
    q = init_warplstm(np.random.default_rng(99), 4, 2, bottleneck=init_bottleneck(rng, 4, 2))
    assign_arrays(q, load_arrays(tmp_path))
    for k, v in named_arrays(q).items():
        assert np.array_equal(v, arrays[k])
    r = copy_params(p)
    r.base.wx.kernel[...] = 0
    assert not np.all(p.base.wx.kernel == 0)
    with pytest.raises((KeyError, ValueError)):
        assign_arrays(init_convlstm(rng, 4, 3), load_arrays(tmp_path))
