"""AVA-style annotations: tubelet linking, label splits, pairing and frame-mAP.

A *combined label* is the sorted tuple of action ids annotated on one box;
two tubelets correspond semantically iff their combined labels are equal.
Labels are written as ``"1+12+80"`` in files.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

Label = tuple[int, ...]


@dataclass(frozen=True)
class Box:
    """Normalized ``(ymin, xmin, ymax, xmax)``."""

    ymin: float
    xmin: float
    ymax: float
    xmax: float

    def validate(self) -> "Box":
        if not (0.0 <= self.ymin <= self.ymax <= 1.0 and 0.0 <= self.xmin <= self.xmax <= 1.0):
            raise ValueError(f"invalid normalized box {self.as_tuple()}")
        return self

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.ymin, self.xmin, self.ymax, self.xmax)

    @property
    def area(self) -> float:
        return max(0.0, self.ymax - self.ymin) * max(0.0, self.xmax - self.xmin)


@dataclass(frozen=True)
class AnnotationRow:
    video_id: str
    t: int
    box: Box
    action_id: int
    person_id: int


@dataclass(frozen=True)
class Tubelet:
    video_id: str
    person_id: int
    label: Label
    frames: tuple[tuple[int, Box], ...]

    @property
    def start(self) -> int:
        return self.frames[0][0]

    @property
    def end(self) -> int:
        return self.frames[-1][0]

    def __len__(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class Detection:
    video_id: str
    t: int
    box: Box
    score: float
    label: Label


@dataclass(frozen=True)
class PairSpec:
    query: Tubelet
    window: tuple[int, int]
    targets: tuple[Tubelet, ...]


def format_label(label: Iterable[int]) -> str:
    return "+".join(str(a) for a in sorted(label))


def parse_label(text: str) -> Label:
    return tuple(sorted(int(a) for a in text.split("+") if a))


# ---------------------------------------------------------------------------
# annotation io


def parse_annotations(path) -> list[AnnotationRow]:
    """Read ``video_id,t,x1,y1,x2,y2,action_id,person_id`` rows."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), 1):
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != 8:
                raise ValueError(f"line {lineno}: expected 8 fields, got {len(rec)}")
            try:
                vid = rec[0].strip()
                t = int(rec[1])
                x1, y1, x2, y2 = (float(v) for v in rec[2:6])
                action, person = int(rec[6]), int(rec[7])
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
            if t < 0:
                raise ValueError(f"line {lineno}: negative timestamp {t}")
            for v in (x1, y1, x2, y2):
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"line {lineno}: coordinate {v} outside [0, 1]")
            if x1 > x2 or y1 > y2:
                raise ValueError(f"line {lineno}: box corners out of order")
            rows.append(AnnotationRow(vid, t, Box(y1, x1, y2, x2), action, person))
    return rows


def write_annotations(path, rows: Sequence[AnnotationRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for r in rows:
            b = r.box
            w.writerow([r.video_id, r.t, *(repr(float(v)) for v in (b.xmin, b.ymin, b.xmax, b.ymax)),
                        r.action_id, r.person_id])


def labeled_boxes(rows: Iterable[AnnotationRow]) -> dict[tuple[str, int, int], tuple[Box, Label]]:
    """Merge rows per ``(video, t, person)`` into one box with its combined label."""
    boxes: dict[tuple[str, int, int], Box] = {}
    actions: dict[tuple[str, int, int], set[int]] = defaultdict(set)
    for r in rows:
        key = (r.video_id, r.t, r.person_id)
        if key in boxes and boxes[key] != r.box:
            raise ValueError(f"conflicting boxes for video {r.video_id!r} t={r.t} person {r.person_id}")
        boxes[key] = r.box
        actions[key].add(r.action_id)
    return {k: (boxes[k], tuple(sorted(actions[k]))) for k in boxes}


# ---------------------------------------------------------------------------
# linking


def link_tubelets(rows: Iterable[AnnotationRow]) -> list[Tubelet]:
    """Chain a subject's boxes over consecutive seconds while the label set is unchanged."""
    merged = labeled_boxes(rows)
    by_subject: dict[tuple[str, int], list[int]] = defaultdict(list)
    for vid, t, pid in merged:
        by_subject[(vid, pid)].append(t)
    out = []
    for (vid, pid) in sorted(by_subject):
        times = sorted(by_subject[(vid, pid)])
        chain: list[tuple[int, Box]] = []
        label: Label | None = None
        for t in times:
            box, lab = merged[(vid, t, pid)]
            if chain and (t != chain[-1][0] + 1 or lab != label):
                out.append(Tubelet(vid, pid, label, tuple(chain)))
                chain = []
            chain.append((t, box))
            label = lab
        if chain:
            out.append(Tubelet(vid, pid, label, tuple(chain)))
    out.sort(key=lambda tb: (tb.video_id, tb.person_id, tb.start))
    return out


def label_counts(tubelets: Iterable[Tubelet]) -> dict[Label, int]:
    counts: dict[Label, int] = defaultdict(int)
    for tb in tubelets:
        counts[tb.label] += 1
    return dict(counts)


# ---------------------------------------------------------------------------
# splits


def split_by_combined_label(tubelets: Sequence[Tubelet], min_samples: int = 100,
                            fractions: tuple[float, float, float] = (0.0, 0.5, 0.5),
                            val: Sequence[Label] | None = None, test: Sequence[Label] | None = None,
                            seed: int = 0) -> dict[str, list[Label]]:
    """Partition combined labels into disjoint train/val/test sets.

    Labels with a single tubelet cannot be paired and are dropped. Labels
    with fewer than ``min_samples`` tubelets only ever go to train. With
    explicit ``val``/``test`` lists those are used verbatim and every other
    pairable label is train; otherwise the qualifying labels are shuffled
    with ``seed`` and cut according to ``fractions`` (train, val, test).
    """
    if min_samples < 2:
        raise ValueError("min_samples must be at least 2")
    counts = label_counts(tubelets)
    pairable = sorted(l for l, n in counts.items() if n >= 2)
    qualifying = [l for l in pairable if counts[l] >= min_samples]

    if val is not None or test is not None:
        val_set = [tuple(sorted(l)) for l in (val or [])]
        test_set = [tuple(sorted(l)) for l in (test or [])]
        clash = set(val_set) & set(test_set)
        if clash:
            raise ValueError(f"labels listed for both val and test: {sorted(clash)}")
        held = set(val_set) | set(test_set)
        train = [l for l in pairable if l not in held]
        return {"train": train, "val": sorted(val_set), "test": sorted(test_set)}

    f = np.asarray(fractions, dtype=float)
    if f.shape != (3,) or np.any(f < 0) or f.sum() <= 0:
        raise ValueError("fractions must be three non-negative numbers")
    f = f / f.sum()
    order = np.random.default_rng(seed).permutation(len(qualifying))
    shuffled = [qualifying[i] for i in order]
    n = len(shuffled)
    n_train = int(round(f[0] * n))
    n_val = int(round((f[0] + f[1]) * n)) - n_train
    q_train = shuffled[:n_train]
    q_val = shuffled[n_train:n_train + n_val]
    q_test = shuffled[n_train + n_val:]
    minor = [l for l in pairable if counts[l] < min_samples]
    return {"train": sorted(minor + q_train), "val": sorted(q_val), "test": sorted(q_test)}


def remove_training_overlap(train: Sequence[Tubelet], heldout: Sequence[Tubelet]) -> list[Tubelet]:
    """Drop every training frame whose (video, t) a held-out tubelet covers.

    Tubelets are split where frames are removed; empty pieces vanish.
    """
    covered = {(tb.video_id, t) for tb in heldout for t, _ in tb.frames}
    out = []
    for tb in train:
        piece: list[tuple[int, Box]] = []
        for t, box in tb.frames:
            if (tb.video_id, t) in covered:
                if piece:
                    out.append(Tubelet(tb.video_id, tb.person_id, tb.label, tuple(piece)))
                piece = []
            else:
                piece.append((t, box))
        if piece:
            out.append(Tubelet(tb.video_id, tb.person_id, tb.label, tuple(piece)))
    return out


def make_pairs(tubelets: Sequence[Tubelet], background_pad: int = 1, seed: int = 0,
               mode: str = "fixed", video_spans: dict[str, tuple[int, int]] | None = None) -> list[PairSpec]:
    """Pair every tubelet of one combined label with a reference window.

    Each query gets a different tubelet as target: a seeded random choice
    in ``"random"`` mode, the next tubelet round-robin in ``"fixed"`` mode.
    The window is the target span padded by ``background_pad`` seconds on
    both sides, clamped to ``video_spans`` (or to t >= 0). Every other
    same-label tubelet of that video lying inside the window is a target too.
    """
    tubes = sorted(tubelets, key=lambda tb: (tb.video_id, tb.person_id, tb.start))
    if len(tubes) < 2:
        raise ValueError("no pair can be formed from fewer than two tubelets")
    labels = {tb.label for tb in tubes}
    if len(labels) != 1:
        raise ValueError(f"make_pairs expects a single combined label, got {sorted(labels)}")
    if mode not in ("random", "fixed"):
        raise ValueError(f"mode must be 'random' or 'fixed', got {mode!r}")
    rng = np.random.default_rng(seed)
    n = len(tubes)
    out = []
    for qi, query in enumerate(tubes):
        if mode == "fixed":
            ti = (qi + 1) % n
        else:
            ti = int(rng.integers(n - 1))
            ti += ti >= qi
        target = tubes[ti]
        lo, hi = target.start - background_pad, target.end + background_pad
        if video_spans and target.video_id in video_spans:
            vlo, vhi = video_spans[target.video_id]
            lo, hi = max(lo, vlo), min(hi, vhi)
        lo = max(lo, 0)
        targets = [tb for j, tb in enumerate(tubes)
                   if j != qi and tb.video_id == target.video_id and lo <= tb.start and tb.end <= hi]
        out.append(PairSpec(query, (lo, hi), tuple(targets)))
    return out


# ---------------------------------------------------------------------------
# evaluation


def iou(a, b) -> float:
    """Intersection over union of two ``(ymin, xmin, ymax, xmax)`` boxes in any common unit."""
    a = a.as_tuple() if isinstance(a, Box) else tuple(a)
    b = b.as_tuple() if isinstance(b, Box) else tuple(b)
    ih = min(a[2], b[2]) - max(a[0], b[0])
    iw = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(0.0, ih) * max(0.0, iw)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-point AP: area under the monotone precision envelope."""
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    drecall = np.diff(np.concatenate([[0.0], recall]))
    return float((drecall * envelope).sum())


def match_detections(dets: Sequence[Detection], gt: dict[tuple[str, int], list[Box]],
                     iou_threshold: float) -> np.ndarray:
    """Greedy matching in descending score order (stable); returns the TP flags."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    used: dict[tuple[str, int], set[int]] = defaultdict(set)
    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        d = dets[i]
        key = (d.video_id, d.t)
        best, best_j = iou_threshold, -1
        for j, g in enumerate(gt.get(key, ())):
            if j in used[key]:
                continue
            o = iou(d.box, g)
            if o >= best and (best_j < 0 or o > best):
                best, best_j = o, j
        if best_j >= 0:
            used[key].add(best_j)
            tp[rank] = 1.0
    return tp


def frame_map(detections: Sequence[Detection], ground_truth, iou_threshold: float = 0.5) -> dict:
    """Frame-level AP per combined label and their unweighted mean.

    ``ground_truth`` maps ``(label, video_id, t)`` to a list of boxes. The
    mean runs over labels with at least one ground-truth box; a label that
    only has detections reports AP 0.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    gt_by_label: dict[Label, dict[tuple[str, int], list[Box]]] = defaultdict(dict)
    for (label, vid, t), boxes in ground_truth.items():
        if boxes:
            gt_by_label[tuple(label)][(vid, t)] = list(boxes)
    det_by_label: dict[Label, list[Detection]] = defaultdict(list)
    for d in detections:
        det_by_label[tuple(d.label)].append(d)

    per_label = {}
    for label in sorted(set(gt_by_label) | set(det_by_label)):
        gt = gt_by_label.get(label, {})
        n_gt = sum(len(v) for v in gt.values())
        tp = match_detections(det_by_label.get(label, []), gt, iou_threshold)
        per_label[label] = average_precision(tp, n_gt)
    scored = [per_label[l] for l in gt_by_label]
    return {"per_label_ap": per_label, "mAP": float(np.mean(scored)) if scored else 0.0}


def ground_truth_from_rows(rows: Iterable[AnnotationRow]) -> dict[tuple[Label, str, int], list[Box]]:
    gt: dict[tuple[Label, str, int], list[Box]] = defaultdict(list)
    for (vid, t, _pid), (box, label) in sorted(labeled_boxes(rows).items()):
        gt[(label, vid, t)].append(box)
    return dict(gt)


def parse_detections(path) -> list[Detection]:
    """Read ``video_id,t,ymin,xmin,ymax,xmax,score,label`` rows."""
    out = []
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), 1):
            if not rec:
                continue
            if len(rec) != 8:
                raise ValueError(f"line {lineno}: expected 8 fields, got {len(rec)}")
            try:
                box = Box(*(float(v) for v in rec[2:6]))
                score = float(rec[6])
                out.append(Detection(rec[0].strip(), int(rec[1]), box, score, parse_label(rec[7])))
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
            if not np.isfinite(score):
                raise ValueError(f"line {lineno}: non-finite score")
    return out


def write_detections(path, dets: Sequence[Detection]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for d in dets:
            w.writerow([d.video_id, d.t, *(repr(float(v)) for v in d.box.as_tuple()), repr(float(d.score)),
                        format_label(d.label)])


def map_report_json(result: dict) -> str:
    return json.dumps({"per_label_ap": {format_label(k): v for k, v in result["per_label_ap"].items()},
                       "mAP": result["mAP"]}, indent=1)


# ---------------------------------------------------------------------------
# JSON forms of tubelets and pairs


def tubelet_to_dict(tb: Tubelet) -> dict:
    return {"video_id": tb.video_id, "person_id": tb.person_id, "label": format_label(tb.label),
            "frames": [[t, list(b.as_tuple())] for t, b in tb.frames]}


def tubelet_from_dict(d: dict) -> Tubelet:
    return Tubelet(d["video_id"], int(d["person_id"]), parse_label(d["label"]),
                   tuple((int(t), Box(*b)) for t, b in d["frames"]))


def save_tubelets(path, tubelets: Sequence[Tubelet]) -> None:
    Path(path).write_text(json.dumps([tubelet_to_dict(tb) for tb in tubelets]))


def load_tubelets(path) -> list[Tubelet]:
    return [tubelet_from_dict(d) for d in json.loads(Path(path).read_text())]


def pair_to_dict(p: PairSpec) -> dict:
    return {"query": tubelet_to_dict(p.query), "window": list(p.window),
            "targets": [tubelet_to_dict(t) for t in p.targets]}
