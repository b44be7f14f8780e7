"""From per-second person boxes to tubelets, label splits, pairs and frame-mAP."""
import numpy as np

from warpcell.tubelets import (AnnotationRow, Box, Detection, frame_map, ground_truth_from_rows, link_tubelets,
                               make_pairs, remove_training_overlap, split_by_combined_label)

rng = np.random.default_rng(0)
rows = []
for vid in ("a", "b", "c"):
    for pid in range(3):
        for t in range(12):
            box = Box(0.1 * pid, 0.1, 0.1 * pid + 0.3, 0.4)
            for action in ((1,) if t < 6 else (2, 5))[: 1 + (pid == 2)]:
                rows.append(AnnotationRow(vid, t, box, action, pid))

tubes = link_tubelets(rows)
print(f"{len(rows)} rows -> {len(tubes)} tubelets")
for tb in tubes[:4]:
    print(f"  video {tb.video_id} person {tb.person_id} label {tb.label} seconds {tb.start}..{tb.end}")

split = split_by_combined_label(tubes, min_samples=3, fractions=(0, 1, 1), seed=0)
print("label split:", split)
held = [tb for tb in tubes if tb.label in split["val"] + split["test"]]
train = remove_training_overlap([tb for tb in tubes if tb.label in split["train"]], held)
print(f"training tubelets after overlap removal: {len(train)}")
label = held[0].label
pairs = make_pairs([tb for tb in held if tb.label == label], seed=0)
print(f"{len(pairs)} pairs for label {label}; first window {pairs[0].window}")

gt = ground_truth_from_rows(rows)
dets = [Detection(r.video_id, r.t, r.box, float(rng.uniform()), (r.action_id,)) for r in rows[::3]]
print("frame-mAP of a partial detector:", round(frame_map(dets, gt)["mAP"], 4))
