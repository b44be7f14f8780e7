"""Encoder + recurrent cell + heatmap head, with backprop through time."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .. import cells
from ..params import assign_arrays, load_arrays, named_arrays, save_arrays, zeros_like
from ..tensor import ConvParams, conv2d_raw, conv2d_vjp, sigmoid

KINDS = ("clip_independent", "convlstm", "warplstm", "trajlstm", "gt_flow_warp")


@dataclass
class ModelConfig:
    kind: str = "warplstm"
    in_channels: int = 3
    channels: int = 8
    hidden: int = 1  # bottleneck width, channels // 8
    kernel: int = 3
    grid: tuple[int, int] = (3, 3)
    links: int = 5
    order: int = 2
    candidate: str = "sigmoid"
    skip: bool = False  # with the skip, a 1x1 head can read x directly and never learn to use memory
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown cell kind {self.kind!r}; expected one of {KINDS}")
        self.grid = tuple(self.grid)


@dataclass
class Model:
    encoder: ConvParams
    cell: object
    head: ConvParams


def build_model(cfg: ModelConfig) -> Model:
    rng = np.random.default_rng(cfg.seed)
    enc = ConvParams(cells._glorot(rng, (3, 3, cfg.in_channels, cfg.channels)), np.zeros(cfg.channels))
    bn = cells.init_bottleneck(rng, cfg.channels, cfg.hidden, cfg.skip)
    common = dict(kernel=cfg.kernel, candidate=cfg.candidate, bottleneck=bn)
    if cfg.kind == "warplstm":
        cell = cells.init_warplstm(rng, cfg.channels, cfg.hidden, grid=cfg.grid, order=cfg.order, **common)
    elif cfg.kind == "trajlstm":
        cell = cells.init_trajlstm(rng, cfg.channels, cfg.hidden, links=cfg.links, **common)
    else:
        cell = cells.init_convlstm(rng, cfg.channels, cfg.hidden, **common)
    head = ConvParams(cells._glorot(rng, (1, 1, cfg.channels, 1)), np.zeros(1))
    return Model(enc, cell, head)


def _cell_forward(kind, cell, x, prev, flow):
    if kind == "warplstm":
        (state, fl), cache = cells.warplstm_forward(cell, x, prev)
        return state, fl, cache
    if kind == "trajlstm":
        state, cache = cells.trajlstm_forward(cell, x, prev)
        return state, None, cache
    if kind == "gt_flow_warp":
        state, cache = cells.flowlstm_forward(cell, x, prev, flow)
        return state, None, cache
    state, cache = cells.convlstm_forward(cell, x, prev)
    return state, None, cache


_BACKWARD = {
    "warplstm": cells.warplstm_backward,
    "trajlstm": cells.trajlstm_backward,
    "gt_flow_warp": cells.flowlstm_backward,
    "convlstm": cells.convlstm_backward,
    "clip_independent": cells.convlstm_backward,
}


def forward(model: Model, kind: str, frames, flows=None, keep_cache: bool = False):
    """Run a batch ``[B, T, H, W, C_in]``; returns heatmap logits ``[B, T, H, W]``.

    ``clip_independent`` restarts from a zero state at every step.
    ``gt_flow_warp`` needs ``flows [B, T, H, W, 2]``, the displacement into step t.
    """
    B, T, H, W, _ = frames.shape
    z = conv2d_raw(frames.reshape((B * T,) + frames.shape[2:]), model.encoder.kernel, model.encoder.bias)
    enc = np.tanh(z).reshape(B, T, H, W, -1)
    nb = cells._base(model.cell).hidden
    zero = cells.CellState.zeros((B, H, W, nb))
    state = zero
    logits = np.empty((B, T, H, W))
    caches = []
    warp_flows = []
    for t in range(T):
        prev = zero if (kind == "clip_independent" or t == 0) else state
        flow = flows[:, t] if kind == "gt_flow_warp" else None
        state, fl, cache = _cell_forward(kind, model.cell, enc[:, t], prev, flow)
        rep = cells.export(model.cell, enc[:, t], state)
        logits[:, t] = conv2d_raw(rep, model.head.kernel, model.head.bias)[..., 0]
        warp_flows.append(fl)
        if keep_cache:
            caches.append((cache, state.h, rep))
    aux = {"enc": enc, "frames": frames, "caches": caches, "flows": warp_flows}
    return logits, aux


def backward(model: Model, kind: str, aux, dlogits) -> Model:
    """Gradients of ``sum(dlogits * logits)`` w.r.t. every model parameter."""
    grads = zeros_like(model)
    enc, frames, caches = aux["enc"], aux["frames"], aux["caches"]
    B, T, H, W = dlogits.shape
    denc = np.zeros_like(enc)
    nb = cells._base(model.cell).hidden
    dh_next = np.zeros((B, H, W, nb))
    dc_next = np.zeros((B, H, W, nb))
    back = _BACKWARD[kind]
    for t in reversed(range(T)):
        cache, h, rep = caches[t]
        drep, dk, db = conv2d_vjp(dlogits[:, t, :, :, None], rep, model.head.kernel)
        grads.head.kernel += dk
        grads.head.bias += db
        dx_skip, dh = cells.export_backward(model.cell, grads.cell, h, drep)
        dx, dh_prev, dc_prev = back(model.cell, grads.cell, cache, dh + dh_next, dc_next)
        denc[:, t] += dx
        if dx_skip is not None:
            denc[:, t] += dx_skip
        if kind == "clip_independent":
            dh_next = np.zeros_like(dh_next)
            dc_next = np.zeros_like(dc_next)
        else:
            dh_next, dc_next = dh_prev, dc_prev
    dz = denc * (1.0 - enc * enc)
    _, dk, db = conv2d_vjp(dz.reshape((B * T,) + dz.shape[2:]),
                           frames.reshape((B * T,) + frames.shape[2:]), model.encoder.kernel)
    grads.encoder.kernel += dk
    grads.encoder.bias += db
    return grads


def heatmaps(model: Model, kind: str, frames, flows=None) -> np.ndarray:
    logits, _ = forward(model, kind, frames, flows)
    return sigmoid(logits)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(directory, model: Model, cfg: ModelConfig, extra: dict | None = None) -> None:
    directory = Path(directory)
    save_arrays(directory, named_arrays(model))
    doc = {"model": asdict(cfg)}
    if extra:
        doc.update(extra)
    (directory / "model.json").write_text(json.dumps(doc, indent=1))


def load_checkpoint(directory) -> tuple[Model, ModelConfig, dict]:
    directory = Path(directory)
    doc = json.loads((directory / "model.json").read_text())
    cfg = ModelConfig(**doc["model"])
    model = build_model(cfg)
    assign_arrays(model, load_arrays(directory))
    return model, cfg, doc
