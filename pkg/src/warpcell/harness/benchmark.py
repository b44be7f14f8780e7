"""Train every baseline on the same synthetic stream and score it on held-out sequences."""

from __future__ import annotations

import logging
import time

from .evaluate import evaluate
from .model import ModelConfig
from .synth import SynthConfig, generate_dataset
from .train import TrainConfig, train

log = logging.getLogger(__name__)

BENCH_KINDS = ("clip_independent", "convlstm", "warplstm", "gt_flow_warp")
EVAL_OFFSET = 1_000_000  # far past any index the training stream reaches
EVAL_COUNT = 64
MIN_SPEED = 2.0


def heldout_sequences(seed: int = 42, count: int = EVAL_COUNT, synth: SynthConfig | None = None):
    synth = synth or SynthConfig()
    cfg = SynthConfig(**{**synth.to_dict(), "seed": seed})
    return generate_dataset(cfg, count, offset=EVAL_OFFSET)


def run_benchmark(seed: int = 42, kinds=BENCH_KINDS, iterations: int | None = None,
                  eval_count: int = EVAL_COUNT, min_speed: float = MIN_SPEED) -> dict:
    """Default configs for every kind; only ``seed`` (and optionally ``iterations``) vary."""
    synth = SynthConfig()
    seqs = heldout_sequences(seed, eval_count, synth)
    out = {"seed": seed, "min_speed": min_speed, "kinds": {}}
    for kind in kinds:
        tcfg = TrainConfig(kind=kind, seed=seed)
        if iterations is not None:
            tcfg.iterations = iterations
        t0 = time.perf_counter()
        res = train(ModelConfig(kind=kind), synth, tcfg)
        rep = evaluate(res.model, kind, seqs, synth.box_size, min_speed)
        rep["final_loss"] = res.losses[-1] if res.losses else None
        rep["seconds"] = time.perf_counter() - t0
        log.info("%s: iou %.3f, occluded iou %.3f", kind, rep["overall"]["mean_iou"], rep["occluded"]["mean_iou"])
        out["kinds"][kind] = rep
    return out
