"""Dataset complexity and classifier diagnostics.

Random 60x60 patches are described by their Leung-Malik filter responses
and projected onto two principal components. Then a batch of made-up
predictions is summarised as a confusion matrix, per-category confidence
and the most confident mistakes.
"""

import numpy as np

from matforge.analysis import (
    PredictionRecord,
    confidence_stats,
    confusion,
    lm_bank,
    lm_pca,
    top_misclassifications,
)
from matforge.dataset import CATEGORIES
from matforge.synthetic import toy_samples

bank = lm_bank()
print(len(bank), "filters:", {k: bank.kinds.count(k) for k in ("edge", "bar", "log", "gauss")})

samples = toy_samples(per_class=3, size=80, seed=4)
model, points, labels = lm_pca([s.image for s in samples], [CATEGORIES[s.label] for s in samples],
                               patches_per_image=2, seed=0)
print("explained variance", model.explained_variance)
for cat in CATEGORIES[:3]:
    pts = points[[l == cat for l in labels]]
    print(f"{cat:8s} centroid {pts.mean(axis=0).round(4)}")

# predictions from an imaginary classifier that confuses glass and plastic
rng = np.random.default_rng(0)
records = []
for i in range(400):
    true = int(rng.integers(10))
    pred = true
    if true in (2, 6) and rng.uniform() < 0.4:
        pred = 8 - true
    elif rng.uniform() < 0.15:
        pred = int(rng.integers(10))
    conf = rng.uniform(0.6, 1.0) if pred == true else rng.uniform(0.2, 0.9)
    records.append(PredictionRecord(f"img{i:03d}", true, pred, float(conf)))

cm = confusion(records)
print("overall accuracy", round(cm.overall_accuracy, 3))
print("glass row", cm.matrix[2].round(2))
stats = confidence_stats(records)
print("glass confidence when right / wrong:",
      round(stats[2]["mean_conf_correct"], 3), round(stats[2]["mean_conf_wrong"], 3))
for r in top_misclassifications(records, 3):
    print(f"{r.sample_id}: {CATEGORIES[r.true]} taken for {CATEGORIES[r.pred]} at {r.confidence:.2f}")
