"""ConvLSTM memory versus warped memory on a moving blob.

Both cells hold a blob in memory while the input goes dark. The warp
cell is told to shift everything two pixels to the right per step, so its
memory follows the object; the plain cell keeps it where it was last seen.
"""
import numpy as np

from warpcell.cells import CellState, convlstm_step, init_convlstm, init_warplstm, warplstm_step

rng = np.random.default_rng(0)
H = W = 20
conv = init_convlstm(rng, 1, 1)
conv.wx.kernel[:] = 0
conv.wh[:] = 0
conv.wx.bias[:] = (0.0, -3.0, 10.0, 10.0)  # i, g, f, o: keep memory, write almost nothing

warp = init_warplstm(rng, 1, 1, boundary=False)
warp.base.wx.kernel[:] = conv.wx.kernel
warp.base.wx.bias[:] = conv.wx.bias
warp.base.wh[:] = conv.wh
warp.disp_x.bias[:] = (2.0, 0.0)  # every control point moves +2 in x

yy, xx = np.mgrid[0:H, 0:W]
blob = np.exp(-((yy - 10) ** 2 + (xx - 5) ** 2) / 3.0)[..., None]
sc = sw = CellState(blob, blob)
dark = np.zeros((H, W, 1))
for t in range(1, 4):
    sc = convlstm_step(conv, dark, sc)
    sw, _ = warplstm_step(warp, dark, sw)
    pc = np.unravel_index(sc.c[..., 0].argmax(), (H, W))
    pw = np.unravel_index(sw.c[..., 0].argmax(), (H, W))
    print(f"t={t}: object at x={5 + 2 * t:2d}   convlstm memory peak x={pc[1]:2d}   warplstm memory peak x={pw[1]:2d}")
