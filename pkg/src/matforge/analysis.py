"""Dataset-complexity and classifier diagnostics.

* Leung-Malik filter bank, per-patch texture features and a 2-component PCA
  (used to compare how separable two corpora are).
* Confusion matrices, confidence statistics and highest-confidence errors
  over :class:`PredictionRecord` lists.
"""

import csv
from dataclasses import dataclass

import numpy as np
from scipy.signal import correlate2d

from .dataset import CATEGORIES
from .errors import ConfigurationError

# -- Leung-Malik bank ----------------------------------------------------------

LM_SUPPORT = 49
LM_ORIENTED_SCALES = (1.0, np.sqrt(2), 2.0)
LM_BASE_SCALES = (1.0, np.sqrt(2), 2.0, 2 * np.sqrt(2))
LM_ORIENTATIONS = 6
LM_ELONGATION = 3.0
LM_LOG_FACTOR = 3.0
PATCH_SIZE = 60


@dataclass
class LMBank:
    filters: np.ndarray  # (48, 49, 49)
    kinds: tuple         # "edge" | "bar" | "log" | "gauss" per filter
    scales: tuple
    angles: tuple        # radians; None for isotropic filters

    def __len__(self):
        return len(self.filters)

    def zero_mean(self):
        return np.array([k != "gauss" for k in self.kinds])


def _gauss1d(sigma, x, order):
    g = np.exp(-x * x / (2 * sigma * sigma)) / (np.sqrt(2 * np.pi) * sigma)
    if order == 0:
        return g
    if order == 1:
        return -g * x / sigma ** 2
    return g * (x * x - sigma ** 2) / sigma ** 4


def _normalise(f, zero_mean):
    if zero_mean:
        f = f - f.mean()
    return f / np.abs(f).sum()


def lm_bank(support=LM_SUPPORT):
    """The 48-filter LM set: 36 oriented first/second derivatives, 8 LoG, 4 Gaussians.

    An oriented filter at angle ``t`` differentiates along the direction
    ``(cos t, sin t)`` in image (x right, y down) coordinates and is
    elongated 3:1 along the perpendicular. Derivative and LoG filters are
    made zero-mean; every filter has unit L1 norm.
    """
    half = (support - 1) / 2
    ys, xs = np.mgrid[-half:half + 1, -half:half + 1]
    filters, kinds, scales, angles = [], [], [], []
    for sigma in LM_ORIENTED_SCALES:
        for order, kind in ((1, "edge"), (2, "bar")):
            for k in range(LM_ORIENTATIONS):
                t = np.pi * k / LM_ORIENTATIONS
                u = xs * np.cos(t) + ys * np.sin(t)    # across the filter
                v = -xs * np.sin(t) + ys * np.cos(t)   # along the filter
                f = _gauss1d(sigma, u, order) * _gauss1d(LM_ELONGATION * sigma, v, 0)
                filters.append(_normalise(f, True))
                kinds.append(kind)
                scales.append(float(sigma))
                angles.append(t)
    r2 = xs * xs + ys * ys
    for sigma in LM_BASE_SCALES + tuple(LM_LOG_FACTOR * s for s in LM_BASE_SCALES):
        log_ = (r2 - 2 * sigma ** 2) / sigma ** 4 * np.exp(-r2 / (2 * sigma ** 2))
        filters.append(_normalise(log_, True))
        kinds.append("log")
        scales.append(float(sigma))
        angles.append(None)
    for sigma in LM_BASE_SCALES:
        filters.append(_normalise(np.exp(-r2 / (2 * sigma ** 2)), False))
        kinds.append("gauss")
        scales.append(float(sigma))
        angles.append(None)
    return LMBank(np.stack(filters), tuple(kinds), tuple(scales), tuple(angles))


def patch_features(patch, bank, aggregate="mean_abs"):
    """48-vector of aggregated filter responses over the valid region of a 60x60 patch."""
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape != (PATCH_SIZE, PATCH_SIZE):
        raise ConfigurationError(f"patch must be {PATCH_SIZE}x{PATCH_SIZE}, got {patch.shape}")
    feats = np.empty(len(bank))
    for i, f in enumerate(bank.filters):
        resp = correlate2d(patch, f, mode="valid")
        if aggregate == "mean_abs":
            feats[i] = np.abs(resp).mean()
        elif aggregate == "max":
            feats[i] = np.abs(resp).max()
        elif aggregate == "energy":
            feats[i] = np.mean(resp * resp)
        else:
            raise ConfigurationError(f"unknown aggregate {aggregate!r}")
    return feats


def grayscale(image):
    """(3, H, W) -> (H, W) with Rec. 601 luma weights."""
    return np.tensordot(np.array([0.299, 0.587, 0.114]), np.asarray(image, dtype=np.float64), axes=(0, 0))


def random_patches(image, n, rng, size=PATCH_SIZE):
    gray = grayscale(image) if np.ndim(image) == 3 else np.asarray(image, dtype=np.float64)
    h, w = gray.shape
    if h < size or w < size:
        raise ConfigurationError(f"image {h}x{w} smaller than a {size}x{size} patch")
    out = []
    for _ in range(n):
        y = int(rng.integers(0, h - size + 1))
        x = int(rng.integers(0, w - size + 1))
        out.append(gray[y:y + size, x:x + size])
    return out


# -- PCA -----------------------------------------------------------------------

@dataclass
class PCAModel:
    mean: np.ndarray
    components: np.ndarray          # (2, D), orthonormal rows
    explained_variance: np.ndarray  # (2,), nonincreasing


def pca_fit(features, n_components=2, rank_tol=1e-10):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ConfigurationError("PCA needs at least 3 feature vectors")
    mean = x.mean(axis=0)
    centred = x - mean
    cov = centred.T @ centred / (x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:n_components]
    vals, vecs = vals[order], vecs[:, order].T
    if vals[-1] <= rank_tol * max(vals[0], 1e-300):
        raise ConfigurationError(f"covariance has rank < {n_components}; PCA is degenerate")
    # sign convention: largest-magnitude coordinate of each component is positive
    for i in range(len(vecs)):
        j = np.argmax(np.abs(vecs[i]))
        if vecs[i, j] < 0:
            vecs[i] = -vecs[i]
    return PCAModel(mean, vecs, vals)


def pca_project(model, v):
    return model.components @ (np.asarray(v, dtype=np.float64) - model.mean).T


# -- classifier diagnostics -------------------------------------------------------

@dataclass(frozen=True)
class PredictionRecord:
    sample_id: str
    true: int
    pred: int
    confidence: float
    input_mode: str = "rgb"

    @property
    def correct(self):
        return self.true == self.pred


@dataclass
class ConfusionMatrix:
    matrix: np.ndarray  # (K, K); row i = distribution of predictions for true class i
    counts: np.ndarray  # (K,) samples per true class

    @property
    def per_category_accuracy(self):
        acc = np.diag(self.matrix).copy()
        acc[self.counts == 0] = np.nan
        return acc

    @property
    def overall_accuracy(self):
        total = self.counts.sum()
        return float((np.diag(self.matrix) * self.counts).sum() / total) if total else float("nan")


def confusion(records, num_classes=len(CATEGORIES)):
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    for r in records:
        counts[r.true, r.pred] += 1
    per_row = counts.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        mat = np.where(per_row[:, None] > 0, counts / np.maximum(per_row[:, None], 1), 0.0)
    return ConfusionMatrix(mat, per_row)


def _mean_or_none(values):
    return float(np.mean(values)) if values else None


def confidence_stats(records, num_classes=len(CATEGORIES)):
    """Per category: mean confidence when correct, when wrong, and when wrongly predicted as it.

    Empty groups are ``None``.
    """
    correct = {c: [] for c in range(num_classes)}
    wrong = {c: [] for c in range(num_classes)}
    wrong_as = {c: [] for c in range(num_classes)}
    for r in records:
        if r.correct:
            correct[r.true].append(r.confidence)
        else:
            wrong[r.true].append(r.confidence)
            wrong_as[r.pred].append(r.confidence)
    return {
        c: {
            "mean_conf_correct": _mean_or_none(correct[c]),
            "mean_conf_wrong": _mean_or_none(wrong[c]),
            "mean_conf_when_predicted_wrongly_as": _mean_or_none(wrong_as[c]),
            "n_correct": len(correct[c]),
            "n_wrong": len(wrong[c]),
            "n_wrongly_as": len(wrong_as[c]),
        }
        for c in range(num_classes)
    }


def top_misclassifications(records, k):
    wrong = [r for r in records if not r.correct]
    wrong.sort(key=lambda r: (-r.confidence, r.sample_id))
    return wrong[:k]


# -- CSV emitters ------------------------------------------------------------------

def _names(num_classes):
    return list(CATEGORIES) if num_classes == len(CATEGORIES) else [str(i) for i in range(num_classes)]


def write_confusion_csv(cm, path):
    names = _names(len(cm.counts))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred", *names, "count"])
        for i, name in enumerate(names):
            w.writerow([name, *(repr(float(v)) for v in cm.matrix[i]), int(cm.counts[i])])


def write_confidence_csv(stats, path):
    names = _names(len(stats))
    cols = ["mean_conf_correct", "mean_conf_wrong", "mean_conf_when_predicted_wrongly_as",
            "n_correct", "n_wrong", "n_wrongly_as"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["category", *cols])
        for c, name in enumerate(names):
            w.writerow([name, *("" if stats[c][k] is None else stats[c][k] for k in cols)])


RECORD_FIELDS = ["sample_id", "true", "pred", "confidence", "input_mode"]


def write_predictions_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow([r.sample_id, CATEGORIES[r.true], CATEGORIES[r.pred], repr(float(r.confidence)), r.input_mode])


def read_predictions_csv(path):
    index = {c: i for i, c in enumerate(CATEGORIES)}
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            def lab(v):
                return index[v] if v in index else int(v)
            out.append(PredictionRecord(row["sample_id"], lab(row["true"]), lab(row["pred"]),
                                        float(row["confidence"]), row.get("input_mode") or "rgb"))
    return out


def write_errors_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", *RECORD_FIELDS])
        for i, r in enumerate(records, 1):
            w.writerow([i, r.sample_id, CATEGORIES[r.true], CATEGORIES[r.pred], repr(float(r.confidence)), r.input_mode])


def write_pca_csv(points, labels, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "category"])
        for (x, y), lab in zip(points, labels):
            w.writerow([repr(float(x)), repr(float(y)), lab])


def lm_pca(images, labels, patches_per_image=1, seed=0, bank=None):
    """Project random 60x60 patches of every image onto the top-2 PCs of their LM features.

    Returns ``(model, points, point_labels)``.
    """
    bank = bank or lm_bank()
    rng = np.random.default_rng(seed)
    feats, point_labels = [], []
    for img, lab in zip(images, labels):
        for patch in random_patches(img, patches_per_image, rng):
            feats.append(patch_features(patch, bank))
            point_labels.append(lab)
    model = pca_fit(feats)
    points = pca_project(model, np.array(feats)).T
    return model, points, point_labels

