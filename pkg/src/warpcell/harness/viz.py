"""Warped-grid line coordinates for plotting the learned warps."""

from __future__ import annotations

import csv
from typing import Sequence

import numpy as np

from .model import Model, forward
from .synth import SynthSequence, stack_batch

CSV_HEADER = ("sequence", "t", "orientation", "line", "index", "x", "y", "src_x", "src_y")


def grid_lines(H: int, W: int, spacing: int = 4):
    """Yield ``(orientation, line, points [k, 2] as (y, x))`` for a regular grid."""
    for i, y in enumerate(range(0, H, spacing)):
        xs = np.arange(W, dtype=float)
        yield "h", i, np.stack([np.full(W, float(y)), xs], axis=-1)
    for j, x in enumerate(range(0, W, spacing)):
        ys = np.arange(H, dtype=float)
        yield "v", j, np.stack([ys, np.full(H, float(x))], axis=-1)


def warped_grid_rows(name: str, flows: np.ndarray, spacing: int = 4) -> list[tuple]:
    """Rows for one sequence; ``flows [T, H, W, 2]`` as ``(dy, dx)``.

    ``(src_x, src_y)`` is where each grid point reads the previous state
    from, i.e. the backward-warp sampling location ``p - flow(p)``.
    """
    T, H, W, _ = flows.shape
    rows = []
    for t in range(T):
        for orient, line, pts in grid_lines(H, W, spacing):
            yi, xi = pts[:, 0].astype(int), pts[:, 1].astype(int)
            fl = flows[t, yi, xi]
            for k, ((y, x), (dy, dx)) in enumerate(zip(pts, fl)):
                rows.append((name, t, orient, line, k, x, y, x - dx, y - dy))
    return rows


def warp_flows(model: Model, seqs: Sequence[SynthSequence]) -> np.ndarray:
    """Dense flows ``[B, T, H, W, 2]`` a warp-LSTM applies to its state; zero at ``t = 0``."""
    frames, _, _ = stack_batch(list(seqs))
    _, aux = forward(model, "warplstm", frames)
    out = np.stack(aux["flows"], axis=1)
    out[:, 0] = 0.0  # the first step warps an all-zero state
    return out


def write_grid_csv(path, model: Model, seqs: Sequence[SynthSequence], spacing: int = 4) -> int:
    flows = warp_flows(model, seqs)
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for s, fl in zip(seqs, flows):
            rows = warped_grid_rows(s.name, fl, spacing)
            w.writerows((r[0], r[1], r[2], r[3], r[4], repr(float(r[5])), repr(float(r[6])),
                         repr(float(r[7])), repr(float(r[8]))) for r in rows)
            n += len(rows)
    return n
