"""Synthetic tracking benchmark, short version.

Trains every baseline for a few hundred steps and prints center error
and IoU overall and on occluded frames. Short runs show the models
starting to localize; the ordering only settles in the full-length run
(``warpcell benchmark``, about 20 minutes on one core). Pass 1200 as the
argument to reproduce it here.
"""
import logging
import sys

from warpcell.harness.benchmark import run_benchmark

logging.basicConfig(level=logging.INFO, format="%(message)s")
iters = int(sys.argv[1]) if len(sys.argv) > 1 else 200
rep = run_benchmark(seed=42, iterations=iters, eval_count=16)
print(f"{'kind':18s} {'err px':>7s} {'IoU':>6s} {'mAP50':>6s} {'occl IoU':>9s}")
for kind, r in rep["kinds"].items():
    o = r["overall"]
    print(f"{kind:18s} {o['mean_center_error_px']:7.2f} {o['mean_iou']:6.3f} {o['map50']:6.3f} "
          f"{r['occluded']['mean_iou']:9.3f}")
