"""Warp a feature map by moving a few control points.

A 20x20 map with three horizontal and three vertical grid lines gives
nine interior control points. Shifting the centre point two pixels to
the right drags its neighbourhood along; the pinned border stays put.
"""
import numpy as np

from warpcell.spline import ControlPointSet, boundary_points, dense_flow, grid_control_points, sparse_warp

H = W = 20
pts = grid_control_points(H, W)
print("control points (x, y):", pts.astype(int).tolist())

yy, xx = np.mgrid[0:H, 0:W]
blob = np.exp(-((yy - 10) ** 2 + (xx - 10) ** 2) / 4.0)[..., None]

disp = np.zeros((9, 2))
disp[4] = (2.0, 0.0)  # centre point moves +2 in x
cps = ControlPointSet(pts, disp, boundary_points(H, W))
out = sparse_warp(blob, cps, regularization=0.0)

print("input peak  (y, x):", tuple(int(v) for v in np.unravel_index(blob[..., 0].argmax(), (H, W))))
print("warped peak (y, x):", tuple(int(v) for v in np.unravel_index(out[..., 0].argmax(), (H, W))))
flow = dense_flow(cps, H, W, regularization=0.0)
print("flow (dy, dx) at the destination:", flow[10, 12].round(6), " at a corner:", flow[0, 0].round(6))
