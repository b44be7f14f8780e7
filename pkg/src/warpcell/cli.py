"""``warpcell`` command line: gradient suite, synthetic data, training, evaluation, tubelets."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import tubelets as tb
from .harness import evaluate as ev
from .harness.model import ModelConfig, load_checkpoint, save_checkpoint
from .harness.synth import SynthConfig, generate_dataset, load_dataset, save_dataset
from .harness.train import TrainConfig, train

log = logging.getLogger("warpcell")


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def _write_json(path, doc) -> None:
    text = json.dumps(doc, indent=1)
    if path in (None, "-"):
        print(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n")


def cmd_gradcheck(args) -> int:
    from .harness.gradsuite import gradcheck_suite
    report = gradcheck_suite(args.seed)
    _write_json(args.report, report)
    for o in report["ops"]:
        log.info("%-22s %.3e %s", o["op"], o["max_rel_error"], "ok" if o["passed"] else "FAIL")
    return 0 if report["passed"] else 1


def cmd_synth_gen(args) -> int:
    doc = _read_json(args.config)
    count = int(doc.pop("count", 32))
    offset = int(doc.pop("offset", 0))
    cfg = SynthConfig.from_dict(doc)
    cfg.validate()
    seqs = generate_dataset(cfg, count, offset)
    save_dataset(args.out, seqs, cfg)
    log.info("wrote %d sequences to %s", count, args.out)
    return 0


def train_configs(doc: dict) -> tuple[ModelConfig, SynthConfig, TrainConfig]:
    """Split a ``{"model", "synth", "train"}`` document into configs; the kind is shared."""
    tcfg = TrainConfig(**doc.get("train", {}))
    mdoc = {"kind": tcfg.kind, **doc.get("model", {})}
    return ModelConfig(**mdoc), SynthConfig.from_dict(doc.get("synth", {})), tcfg


def cmd_train(args) -> int:
    mcfg, scfg, tcfg = train_configs(_read_json(args.config))
    result = train(mcfg, scfg, tcfg)
    save_checkpoint(args.out, result.model, mcfg,
                    {"synth": scfg.to_dict(), "train": asdict(tcfg), "seconds": result.seconds})
    _write_json(Path(args.out) / "losses.json", result.losses)
    log.info("trained %s for %d iterations in %.1fs", tcfg.kind, tcfg.iterations, result.seconds)
    return 0


def cmd_eval(args) -> int:
    model, mcfg, _ = load_checkpoint(args.ckpt)
    seqs = load_dataset(args.data)
    data_cfg = _read_json(Path(args.data) / "gt.json").get("config") or {}
    box = args.box_size if args.box_size is not None else data_cfg.get("box_size", SynthConfig.box_size)
    report = ev.evaluate(model, mcfg.kind, seqs, box, args.min_speed)
    report.update({"kind": mcfg.kind, "box_size": box, "min_speed": args.min_speed})
    _write_json(args.report, report)
    return 0


def cmd_warp_viz(args) -> int:
    from .harness.viz import write_grid_csv
    model, mcfg, _ = load_checkpoint(args.ckpt)
    if mcfg.kind != "warplstm":
        raise SystemExit(f"warp-viz needs a warplstm checkpoint, got {mcfg.kind}")
    seqs = load_dataset(args.data)[: args.sequences]
    n = write_grid_csv(args.out, model, seqs, args.spacing)
    log.info("wrote %d grid points to %s", n, args.out)
    return 0


def cmd_benchmark(args) -> int:
    from .harness.benchmark import run_benchmark
    kinds = tuple(args.kinds.split(",")) if args.kinds else None
    kw = {"kinds": kinds} if kinds else {}
    report = run_benchmark(args.seed, iterations=args.iterations, eval_count=args.count,
                           min_speed=args.min_speed, **kw)
    _write_json(args.report, report)
    return 0


def _labels(text: str | None):
    return None if text is None else [tb.parse_label(s) for s in text.split(",") if s]


def cmd_tubelet(args) -> int:
    if args.action == "link":
        tubes = tb.link_tubelets(tb.parse_annotations(args.inp))
        tb.save_tubelets(args.out, tubes)
        log.info("linked %d tubelets", len(tubes))
    elif args.action == "split":
        tubes = tb.load_tubelets(args.inp)
        split = tb.split_by_combined_label(tubes, args.min_samples, tuple(args.fractions),
                                          _labels(args.val), _labels(args.test), args.seed)
        groups = {k: [t for t in tubes if t.label in set(v)] for k, v in split.items()}
        held = groups["val"] + groups["test"]
        groups["train"] = tb.remove_training_overlap(groups["train"], held)
        _write_json(args.out, {
            "labels": {k: [tb.format_label(l) for l in v] for k, v in split.items()},
            "tubelets": {k: [tb.tubelet_to_dict(t) for t in v] for k, v in groups.items()}})
    elif args.action == "pairs":
        tubes = tb.load_tubelets(args.inp)
        by_label: dict = {}
        for t in tubes:
            by_label.setdefault(t.label, []).append(t)
        pairs = []
        for label in sorted(by_label):
            if len(by_label[label]) >= 2:
                pairs += tb.make_pairs(by_label[label], args.pad, args.seed, args.mode)
        _write_json(args.out, [tb.pair_to_dict(p) for p in pairs])
    elif args.action == "map":
        if args.gt is None:
            raise SystemExit("tubelet map needs --gt annotations.csv")
        result = tb.frame_map(tb.parse_detections(args.inp),
                              tb.ground_truth_from_rows(tb.parse_annotations(args.gt)), args.iou)
        text = tb.map_report_json(result)
        if args.out in (None, "-"):
            print(text)
        else:
            Path(args.out).write_text(text + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="warpcell", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--report", default="-", help="JSON report path (default stdout)")
    g.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("synth-gen", help="generate a synthetic moving-target dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth_gen)

    t = sub.add_parser("train", help="train a heatmap tracker")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", default="-")
    e.add_argument("--min-speed", type=float, default=0.0)
    e.add_argument("--box-size", type=float, default=None)
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("benchmark", help="train and score every baseline on the synthetic benchmark")
    b.add_argument("--seed", type=int, default=42)
    b.add_argument("--kinds", help="comma-separated subset of the benchmark kinds")
    b.add_argument("--iterations", type=int, help="override the default training length")
    b.add_argument("--count", type=int, default=64, help="held-out sequences")
    b.add_argument("--min-speed", type=float, default=2.0)
    b.add_argument("--report", default="-")
    b.set_defaults(fn=cmd_benchmark)

    u = sub.add_parser("tubelet", help="tubelet linking, splits, pairs and frame-mAP")
    u.add_argument("action", choices=("link", "split", "pairs", "map"))
    u.add_argument("--in", dest="inp", required=True)
    u.add_argument("--out", default="-")
    u.add_argument("--gt", help="annotation CSV (map)")
    u.add_argument("--iou", type=float, default=0.5)
    u.add_argument("--seed", type=int, default=0)
    u.add_argument("--min-samples", type=int, default=100)
    u.add_argument("--fractions", type=float, nargs=3, default=(0.0, 0.5, 0.5))
    u.add_argument("--val", help="comma-separated labels, e.g. 1+2,3")
    u.add_argument("--test")
    u.add_argument("--pad", type=int, default=1, help="background seconds around a target")
    u.add_argument("--mode", choices=("fixed", "random"), default="fixed")
    u.set_defaults(fn=cmd_tubelet)

    w = sub.add_parser("warp-viz", help="write warped grid lines of a warplstm checkpoint as CSV")
    w.add_argument("--ckpt", required=True)
    w.add_argument("--data", required=True)
    w.add_argument("--out", required=True)
    w.add_argument("--sequences", type=int, default=1)
    w.add_argument("--spacing", type=int, default=4)
    w.set_defaults(fn=cmd_warp_viz)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"warpcell: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
