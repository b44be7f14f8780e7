"""Synthetic moving-blob sequences with a tracked target and distractors."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..tensor import load_tensor, save_tensor

TARGET_SIGNATURE = (1.0, 0.0, 0.5)
DISTRACTOR_SIGNATURE = (0.0, 1.0, 0.5)


@dataclass
class SynthConfig:
    height: int = 40
    width: int = 40
    length: int = 16
    distractors: int = 2
    blob_radius: float = 3.0
    box_size: float = 8.0
    velocity_y: tuple[float, float] = (-0.5, 0.5)
    velocity_x: tuple[float, float] = (1.5, 2.2)
    distractor_speed: float = 1.5
    occlusion: tuple[int, int] | None = (8, 3)  # (start, length)
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.velocity_y = tuple(self.velocity_y)
        self.velocity_x = tuple(self.velocity_x)
        if self.occlusion is not None:
            self.occlusion = tuple(self.occlusion)

    def validate(self) -> None:
        if self.length < 2:
            raise ValueError("sequence length must be at least 2")
        if 2 * self.blob_radius + 1 > min(self.height, self.width):
            raise ValueError(f"blob of radius {self.blob_radius} does not fit a {self.height}x{self.width} frame")
        for lo, hi in (self.velocity_y, self.velocity_x):
            if lo > hi:
                raise ValueError("velocity ranges must be (low, high)")
        for axis, (lo, hi), size in (("y", self.velocity_y, self.height), ("x", self.velocity_x, self.width)):
            travel = max(abs(lo), abs(hi)) * (self.length - 1)
            if travel > size - 1 - 2 * self.blob_radius:
                raise ValueError(f"target speed along {axis} would leave the frame within {self.length} steps")
        if self.occlusion is not None:
            start, n = self.occlusion
            if start < 0 or n < 0:
                raise ValueError("occlusion window must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthSequence:
    frames: np.ndarray  # [T, H, W, 3]
    centers: np.ndarray  # [T, 2] target (y, x), continues through occlusion
    boxes: np.ndarray  # [T, 4] normalized (ymin, xmin, ymax, xmax)
    velocity: np.ndarray  # [2] target (vy, vx) per step
    occluded: np.ndarray  # [T] bool
    name: str = "seq"
    meta: dict = field(default_factory=dict)

    @property
    def gt(self):
        return list(zip(self.boxes, self.centers))

    @property
    def speed(self) -> float:
        return float(np.hypot(*self.velocity))

    def flows(self) -> np.ndarray:
        """Ground-truth ``(dy, dx)`` flow per step: the target's displacement, everywhere."""
        T = len(self.frames)
        H, W = self.frames.shape[1:3]
        out = np.zeros((T, H, W, 2))
        d = np.diff(self.centers, axis=0)
        out[1:] = d[:, None, None, :]
        return out


def center_box(cy: float, cx: float, size: float, H: int, W: int) -> np.ndarray:
    """Normalized box of side ``size`` px centred on pixel ``(cy, cx)``, clipped to the frame."""
    half = size / 2.0
    box = np.array([(cy + 0.5 - half) / H, (cx + 0.5 - half) / W,
                    (cy + 0.5 + half) / H, (cx + 0.5 + half) / W])
    return np.clip(box, 0.0, 1.0)


def _render(H, W, cy, cx, radius, signature):
    yy, xx = np.mgrid[0:H, 0:W]
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    blob = np.exp(-d2 / (2.0 * (radius / 1.5) ** 2))
    return blob[..., None] * np.asarray(signature)


def generate_synthetic(cfg: SynthConfig, index: int = 0) -> SynthSequence:
    """One sequence, fully determined by ``(cfg.seed, index)``."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, index])
    H, W, T, r = cfg.height, cfg.width, cfg.length, cfg.blob_radius
    vy = rng.uniform(*cfg.velocity_y)
    vx = rng.uniform(*cfg.velocity_x)

    def start(v, size):
        lo = r - min(0.0, v * (T - 1))
        hi = size - 1 - r - max(0.0, v * (T - 1))
        return float(rng.integers(int(np.ceil(lo)), int(np.floor(hi)) + 1))

    y0, x0 = start(vy, H), start(vx, W)
    t = np.arange(T)[:, None]
    centers = np.array([y0, x0]) + t * np.array([vy, vx])

    dpos = rng.uniform([r, r], [H - 1 - r, W - 1 - r], size=(cfg.distractors, 2))
    ang = rng.uniform(0, 2 * np.pi, cfg.distractors)
    spd = rng.uniform(0, cfg.distractor_speed, cfg.distractors)
    dvel = np.stack([np.sin(ang) * spd, np.cos(ang) * spd], axis=-1)

    occluded = np.zeros(T, dtype=bool)
    if cfg.occlusion is not None:
        s, n = cfg.occlusion
        occluded[s:s + n] = True

    frames = np.zeros((T, H, W, len(TARGET_SIGNATURE)))
    lo = np.array([r, r])
    hi = np.array([H - 1 - r, W - 1 - r])
    for k in range(T):
        if not occluded[k]:
            frames[k] += _render(H, W, centers[k, 0], centers[k, 1], r, TARGET_SIGNATURE)
        for j in range(cfg.distractors):
            frames[k] += _render(H, W, dpos[j, 0], dpos[j, 1], r, DISTRACTOR_SIGNATURE)
        # distractors bounce off the walls
        dpos += dvel
        for ax in range(2):
            over = dpos[:, ax] > hi[ax]
            under = dpos[:, ax] < lo[ax]
            dpos[over, ax] = 2 * hi[ax] - dpos[over, ax]
            dpos[under, ax] = 2 * lo[ax] - dpos[under, ax]
            dvel[over | under, ax] *= -1
    if cfg.noise > 0:
        frames += rng.normal(0.0, cfg.noise, frames.shape)
    boxes = np.stack([center_box(cy, cx, cfg.box_size, H, W) for cy, cx in centers])
    return SynthSequence(frames, centers, boxes, np.array([vy, vx]), occluded, name=f"seq{index:04d}")


def generate_dataset(cfg: SynthConfig, count: int, offset: int = 0) -> list[SynthSequence]:
    return [generate_synthetic(cfg, offset + i) for i in range(count)]


def stack_batch(seqs: list[SynthSequence]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(frames [B,T,H,W,3], centers [B,T,2], flows [B,T,H,W,2])``."""
    return (np.stack([s.frames for s in seqs]), np.stack([s.centers for s in seqs]),
            np.stack([s.flows() for s in seqs]))


# ---------------------------------------------------------------------------
# on-disk datasets


def save_dataset(directory, seqs: list[SynthSequence], cfg: SynthConfig | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for s in seqs:
        save_tensor(directory / f"{s.name}.ten", s.frames)
        index.append({"name": s.name, "centers": s.centers.tolist(), "boxes": s.boxes.tolist(),
                      "velocity": s.velocity.tolist(), "occluded": s.occluded.tolist()})
    doc = {"config": cfg.to_dict() if cfg else None, "sequences": index}
    (directory / "gt.json").write_text(json.dumps(doc, indent=1))


def load_dataset(directory) -> list[SynthSequence]:
    directory = Path(directory)
    doc = json.loads((directory / "gt.json").read_text())
    out = []
    for e in doc["sequences"]:
        out.append(SynthSequence(load_tensor(directory / f"{e['name']}.ten"), np.array(e["centers"]),
                                 np.array(e["boxes"]), np.array(e["velocity"]),
                                 np.array(e["occluded"], dtype=bool), name=e["name"]))
    return out
