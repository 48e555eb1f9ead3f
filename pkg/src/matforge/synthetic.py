"""Small synthetic image sets for smoke tests and demos.

Class ``c`` gets a distinct base colour and a stripe texture with a
class-specific orientation and period; every image adds its own noise and
phase so no two samples are identical.
"""

import json
from pathlib import Path

import numpy as np

from .dataset import CATEGORIES, DatasetManifest, Sample, SampleRecord, content_hash, save_manifest, write_png

_PALETTE = np.array([
    [0.85, 0.20, 0.20], [0.20, 0.75, 0.25], [0.25, 0.35, 0.90], [0.90, 0.80, 0.20],
    [0.75, 0.25, 0.80], [0.20, 0.80, 0.80], [0.95, 0.55, 0.15], [0.55, 0.35, 0.20],
    [0.50, 0.50, 0.55], [0.95, 0.90, 0.85],
])


def toy_image(label, size, rng):
    """One (3, H, W) float32 image in [0, 1] for class ``label``."""
    h, w = (size, size) if isinstance(size, int) else size
    ys, xs = np.mgrid[0:h, 0:w]
    angle = np.pi * label / len(_PALETTE)
    period = 4 + 2 * (label % 5)
    phase = rng.uniform(0, 2 * np.pi)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (xs * np.cos(angle) + ys * np.sin(angle)) / period + phase)
    base = _PALETTE[label % len(_PALETTE)][:, None, None]
    img = base * (0.7 + 0.3 * stripes)[None] + rng.normal(0, 0.03, (3, h, w))
    return np.clip(img, 0, 1).astype(np.float32)


def toy_samples(per_class=5, size=72, num_classes=10, seed=0):
    rng = np.random.default_rng(seed)
    return [Sample(f"toy_{c:02d}_{i:02d}", c, image=toy_image(c, size, rng))
            for c in range(num_classes) for i in range(per_class)]


def write_toy_corpus(out_dir, per_class=5, size=72, seed=0):
    """Write a toy corpus as PNGs plus an ``annotations.jsonl``; returns the annotation path."""
    out_dir = Path(out_dir)
    ann = []
    for s in toy_samples(per_class, size, len(CATEGORIES), seed):
        rel = f"{CATEGORIES[s.label]}/{s.sample_id}.png"
        write_png(out_dir / rel, s.image)
        ann.append({"file": rel, "category": CATEGORIES[s.label]})
    path = out_dir / "annotations.jsonl"
    path.write_text("".join(json.dumps(a) + "\n" for a in ann), encoding="utf-8")
    return path


def write_toy_dataset(out_dir, per_class=5, size=72, seed=0):
    """Toy images plus a dataset manifest with every record in the train split.

    The images are far below the ingest size gate, so they bypass
    :func:`~matforge.dataset.ingest` and are recorded directly.
    """
    out_dir = Path(out_dir)
    records = []
    for s in toy_samples(per_class, size, len(CATEGORIES), seed):
        rel = f"images/{s.sample_id}.png"
        write_png(out_dir / rel, s.image)
        records.append(SampleRecord(rel, CATEGORIES[s.label], content_hash((out_dir / rel).read_bytes())))
    manifest = DatasetManifest(records=records, split_seed=seed, root=out_dir)
    save_manifest(manifest, out_dir)
    return manifest
