"""Pool a query box, attend over several references, score a correspondence."""
import numpy as np

from warpcell.matching import AttentionParams, CorrespondenceHead, attention_pool, attention_weights, roi_pool
from warpcell.matching import correspondence_score

rng = np.random.default_rng(1)
fmap = rng.standard_normal((16, 16, 8))
q = roi_pool(fmap, (0.25, 0.25, 0.75, 0.75))  # (ymin, xmin, ymax, xmax), normalized
print("RoI feature:", q.shape)

refs = [roi_pool(fmap, b) for b in [(0.0, 0.0, 0.5, 0.5), (0.5, 0.5, 1.0, 1.0), (0.2, 0.3, 0.7, 0.8)]]
att = AttentionParams.init(rng, 8)
print("attention weights over 3 references:", attention_weights(refs, q, att).round(4))
pooled = attention_pool(refs, q, att)

head = CorrespondenceHead.init(rng, 8)
print("score(query, pooled) =", round(correspondence_score(pooled, q, head), 4))
print("an all-zero head is undecided:", correspondence_score(pooled, q, CorrespondenceHead.zeros(8)))
