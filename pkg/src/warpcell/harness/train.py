"""SGD-with-momentum training of heatmap trackers on synthetic sequences."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ..params import named_arrays
from .model import Model, ModelConfig, backward, build_model, forward
from .synth import SynthConfig, generate_dataset, stack_batch

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    kind: str = "warplstm"
    lr: float = 0.003
    momentum: float = 0.9
    lr_decay_step: int = 1000
    iterations: int = 1200
    batch_size: int = 4
    seed: int = 42
    clip_norm: float | None = 10.0
    heatmap_sigma: float = 2.0

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")


class DivergenceError(FloatingPointError):
    pass


def gaussian_targets(centers, H: int, W: int, sigma: float) -> np.ndarray:
    """Gaussian bumps (peak 1) at ``centers [..., 2]`` -> ``[..., H, W]``."""
    yy = np.arange(H, dtype=float)[:, None]
    xx = np.arange(W, dtype=float)[None, :]
    cy = centers[..., 0][..., None, None]
    cx = centers[..., 1][..., None, None]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma * sigma))


def bce_with_logits(logits, targets):
    """Per-pixel binary cross-entropy summed over pixels, averaged over frames.

    Returns ``(loss, dloss/dlogits)``.
    """
    frames = int(np.prod(logits.shape[:-2]))
    sp = np.logaddexp(0.0, logits)
    loss = float((sp - targets * logits).sum()) / frames
    p = np.exp(logits - sp)
    return loss, (p - targets) / frames


@dataclass
class TrainResult:
    model: Model
    losses: list[float] = field(default_factory=list)
    seconds: float = 0.0


def train(model_cfg: ModelConfig, synth_cfg: SynthConfig, cfg: TrainConfig,
          model: Model | None = None, callback=None) -> TrainResult:
    """Minimise heatmap BCE with SGD + momentum; ``lr`` drops 10x at ``lr_decay_step``.

    Batches are drawn from a generator stream seeded by ``cfg.seed``, so the
    whole trajectory is a function of the three configs.
    """
    cfg.validate()
    if model_cfg.kind != cfg.kind:
        raise ValueError(f"model kind {model_cfg.kind!r} != train kind {cfg.kind!r}")
    model = model if model is not None else build_model(model_cfg)
    params = named_arrays(model)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    data_cfg = SynthConfig(**{**asdict(synth_cfg), "seed": cfg.seed})
    H, W = synth_cfg.height, synth_cfg.width
    losses = []
    t0 = time.perf_counter()
    for it in range(cfg.iterations):
        seqs = generate_dataset(data_cfg, cfg.batch_size, offset=it * cfg.batch_size)
        frames, centers, flows = stack_batch(seqs)
        logits, aux = forward(model, cfg.kind, frames, flows, keep_cache=True)
        loss, dlogits = bce_with_logits(logits, gaussian_targets(centers, H, W, cfg.heatmap_sigma))
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at iteration {it}")
        grads = named_arrays(backward(model, cfg.kind, aux, dlogits))
        if cfg.clip_norm is not None:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > cfg.clip_norm:
                for g in grads.values():
                    g *= cfg.clip_norm / norm
        lr = cfg.lr * (0.1 if it >= cfg.lr_decay_step else 1.0)
        for k, p in params.items():
            v = velocity[k]
            v *= cfg.momentum
            v += grads[k]
            p -= lr * v
        losses.append(loss)
        if callback is not None:
            callback(it, loss, model)
        if it % 100 == 0:
            log.info("iter %d loss %.4f", it, loss)
    return TrainResult(model, losses, time.perf_counter() - t0)
