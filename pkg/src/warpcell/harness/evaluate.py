"""Localisation metrics for heatmap trackers on synthetic sequences."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..tubelets import Box, Detection, frame_map, iou
from .model import Model, heatmaps
from .synth import SynthSequence, center_box, stack_batch

TARGET_LABEL = (1,)


def heatmap_peaks(hm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-major argmax per frame (ties go to the smallest ``(y, x)``) and its value."""
    flat = hm.reshape(hm.shape[:-2] + (-1,))
    idx = flat.argmax(axis=-1)
    W = hm.shape[-1]
    peaks = np.stack([idx // W, idx % W], axis=-1)
    return peaks, np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]


def _summarise(records, box_size_unused=None) -> dict:
    if not records:
        return {"frames": 0, "mean_center_error_px": float("nan"), "mean_iou": float("nan"), "map50": float("nan")}
    dets, gt, errs, ious = [], {}, [], []
    for name, t, pbox, score, gbox, err in records:
        dets.append(Detection(name, t, Box(*pbox), float(score), TARGET_LABEL))
        gt[(TARGET_LABEL, name, t)] = [Box(*gbox)]
        errs.append(err)
        ious.append(iou(pbox, gbox))
    return {"frames": len(records), "mean_center_error_px": float(np.mean(errs)),
            "mean_iou": float(np.mean(ious)), "map50": frame_map(dets, gt, 0.5)["mAP"]}


def evaluate_heatmaps(hms: Sequence[np.ndarray], seqs: Sequence[SynthSequence], box_size: float,
                      min_speed: float = 0.0) -> dict:
    """Score heatmaps ``[T, H, W]`` per sequence against ground truth.

    The predicted box is a ``box_size`` square at the heatmap peak, scored by
    the peak value. Returns metrics over all frames and over occluded frames,
    restricted to sequences whose target speed is at least ``min_speed``.
    """
    overall, occl = [], []
    for hm, s in zip(hms, seqs):
        if s.speed < min_speed:
            continue
        H, W = hm.shape[-2:]
        peaks, scores = heatmap_peaks(hm)
        for t in range(len(hm)):
            py, px = peaks[t]
            rec = (s.name, t, center_box(py, px, box_size, H, W), scores[t], s.boxes[t],
                   float(np.hypot(py - s.centers[t, 0], px - s.centers[t, 1])))
            overall.append(rec)
            if s.occluded[t]:
                occl.append(rec)
    return {"overall": _summarise(overall), "occluded": _summarise(occl),
            "sequences": sum(s.speed >= min_speed for s in seqs)}


def predict(model: Model, kind: str, seqs: Sequence[SynthSequence], batch_size: int = 8) -> list[np.ndarray]:
    out = []
    for i in range(0, len(seqs), batch_size):
        frames, _, flows = stack_batch(list(seqs[i:i + batch_size]))
        out.extend(heatmaps(model, kind, frames, flows))
    return out


def evaluate(model: Model, kind: str, seqs: Sequence[SynthSequence], box_size: float,
             min_speed: float = 0.0) -> dict:
    return evaluate_heatmaps(predict(model, kind, seqs), seqs, box_size, min_speed)
