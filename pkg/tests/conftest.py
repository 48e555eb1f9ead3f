import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image


def photo(h, w, seed=0):
    """Colourful textured uint8 HxWx3 image without uniform borders."""
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:h, 0:w]
    base = np.stack([np.sin(xs / 7.0 + seed), np.cos(ys / 5.0), np.sin((xs + ys) / 11.0)], axis=-1)
    img = 0.5 + 0.35 * base + rng.normal(0, 0.05, (h, w, 3))
    return np.clip(img * 255, 0, 255).astype(np.uint8)


def save(path, arr):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


@pytest.fixture
def rule_corpus(tmp_path):
    """One file per ingest rule; returns (corpus_dir, annotations_path, expected {file: reason or None})."""
    corpus = tmp_path / "corpus"
    expected, ann = {}, []

    def add(name, arr, reason, category="wood", **extra):
        save(corpus / name, arr)
        expected[name] = reason
        ann.append({"file": name, "category": category, **extra})

    add("a_ok.png", photo(500, 640, 1), None)
    add("b_portrait.png", photo(640, 420, 2), None, category="stone")
    add("c_undersized.png", photo(300, 399, 3), "too_small")
    gray = photo(500, 600, 4).mean(axis=2, keepdims=True).astype(np.uint8).repeat(3, axis=2)
    add("d_gray.png", gray, "grayscale")
    add("e_blank.png", np.full((500, 600, 3), 120, np.uint8), "blank")
    bordered = np.full((600, 800, 3), 255, np.uint8)
    bordered[50:550, 50:750] = photo(500, 700, 5)
    add("f_bordered.png", bordered, None, category="fabric")
    small_after_trim = np.full((500, 600, 3), 255, np.uint8)
    small_after_trim[100:380, 100:500] = photo(280, 400, 6)
    add("g_bordered_small.png", small_after_trim, "too_small")
    add("h_clipart.png", photo(500, 600, 7), "screened", flags=["clipart"])
    add("i_region.png", photo(800, 900, 8), None, category="metal", region=[100, 50, 500, 400])
    # byte-identical copy of a_ok sorts after it
    (corpus / "z_dup.png").write_bytes((corpus / "a_ok.png").read_bytes())
    expected["z_dup.png"] = "duplicate"
    ann.append({"file": "z_dup.png", "category": "wood"})
    (corpus / "broken.png").write_bytes(b"not an image at all")
    expected["broken.png"] = "undecodable"
    ann.append({"file": "broken.png", "category": "wood"})
    save(corpus / "unlabelled.png", photo(500, 600, 9))
    expected["unlabelled.png"] = "missing_annotation"

    ann_path = tmp_path / "annotations.jsonl"
    ann_path.write_text("".join(json.dumps(a) + "\n" for a in ann))
    return corpus, ann_path, expected
