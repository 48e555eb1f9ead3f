"""Corpus ingestion, splitting and the crop/mean-subtraction pipeline.

Images are handled as float arrays in channel-first (C, H, W) layout with
values in [0, 1]; files on disk are 8-bit PNG/JPEG.
"""

import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigurationError, DatasetError

log = logging.getLogger(__name__)

CATEGORIES = ("fabric", "foliage", "glass", "leather", "metal",
              "paper", "plastic", "stone", "water", "wood")
CATEGORY_INDEX = {c: i for i, c in enumerate(CATEGORIES)}
SPLITS = ("train", "val", "test")

MIN_LONG, MIN_SHORT = 400, 300
TARGET_SHORT = 384
CROP_SIZE = 227
BLANK_STD = 1e-3
COLOR_SPREAD = 0.02
BORDER_TOL = 0.02
BORDER_FRACTION = 0.99
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}
SCREEN_FLAGS = {"clipart", "composite", "manipulated", "multi_material", "no_region"}


# -- image helpers -----------------------------------------------------------

def read_image(path):
    """Decode ``path`` to a (3, H, W) float32 array in [0, 1]."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def to_uint8_hwc(image):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.transpose(1, 2, 0)
        if img.shape[2] == 1:
            img = img[:, :, 0]
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def write_png(path, image):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8_hwc(image)).save(path, format="PNG")


def content_hash(data):
    return hashlib.blake2b(data, digest_size=8).hexdigest()


# -- records -------------------------------------------------------------------

@dataclass
class SampleRecord:
    image_path: str
    category: str
    content_hash: str
    split: str = "train"
    crop_region: tuple | None = None  # (x, y, w, h) in source pixels, already applied on disk

    @property
    def label(self):
        return CATEGORY_INDEX[self.category]

    def to_dict(self):
        d = asdict(self)
        d["crop_region"] = list(self.crop_region) if self.crop_region else None
        return d

    @classmethod
    def from_dict(cls, d):
        region = d.get("crop_region")
        return cls(d["image_path"], d["category"], d["content_hash"], d.get("split", "train"),
                   tuple(region) if region else None)


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)
    split_seed: int | None = None
    quotas: dict = field(default_factory=dict)
    root: Path | None = None
    mean_image: np.ndarray | None = None

    def counts(self):
        """``{split: {category: n}}`` over all records."""
        out = {s: {c: 0 for c in CATEGORIES} for s in SPLITS}
        for r in self.records:
            out[r.split][r.category] += 1
        return out

    def by_split(self, split):
        return [r for r in self.records if r.split == split]

    def samples(self, split):
        return [Sample(r.image_path, r.label, path=self._resolve(r.image_path)) for r in self.by_split(split)]

    def _resolve(self, rel):
        p = Path(rel)
        return p if p.is_absolute() or self.root is None else self.root / p


@dataclass
class Sample:
    """One labelled image, held in memory or loaded lazily from ``path``."""

    sample_id: str
    label: int
    path: Path | None = None
    image: np.ndarray | None = None

    def load(self):
        if self.image is not None:
            return self.image
        if self.path is None:
            raise DatasetError(f"sample {self.sample_id} has neither pixels nor a path")
        try:
            return read_image(self.path)
        except (OSError, UnidentifiedImageError) as exc:
            raise DatasetError(f"cannot read {self.path}: {exc}") from exc


# -- filter rules ------------------------------------------------------------

def is_blank(img):
    return float(img.std()) < BLANK_STD


def is_color(img):
    spread = img.max(axis=0) - img.min(axis=0)
    return float(spread.max()) >= COLOR_SPREAD


def _uniform_lines(lines):
    """``lines`` has shape (L, P, 3): L lines of P pixels. Returns a bool per line."""
    med = np.median(lines, axis=1, keepdims=True)
    close = np.abs(lines - med).max(axis=2) <= BORDER_TOL
    return close.mean(axis=1) >= BORDER_FRACTION


def _strip(flags):
    lo = 0
    while lo < len(flags) and flags[lo]:
        lo += 1
    hi = len(flags)
    while hi > lo and flags[hi - 1]:
        hi -= 1
    return lo, hi


def trim_borders(img):
    """Remove near-uniform rows/columns from each side, iterating until stable.

    Returns ``(trimmed, (top, left))`` where the offsets locate the trimmed
    image inside the original.
    """
    hwc = img.transpose(1, 2, 0)
    top, bottom, left, right = 0, hwc.shape[0], 0, hwc.shape[1]
    while True:
        view = hwc[top:bottom, left:right]
        if view.shape[0] == 0 or view.shape[1] == 0:
            break
        r0, r1 = _strip(_uniform_lines(view))
        c0, c1 = _strip(_uniform_lines(view.transpose(1, 0, 2)))
        if (r0, r1, c0, c1) == (0, view.shape[0], 0, view.shape[1]):
            break
        top, bottom = top + r0, top + r1
        left, right = left + c0, left + c1
    return img[:, top:bottom, left:right], (top, left)


def passes_min_size(h, w):
    return (w >= MIN_LONG and h >= MIN_SHORT) or (w >= MIN_SHORT and h >= MIN_LONG)


def resize_min_side(img, target=TARGET_SHORT):
    """Bilinear downscale so the shorter side equals ``target``; never upscales."""
    _, h, w = img.shape
    short = min(h, w)
    if short <= target:
        return img
    scale = target / short
    nh = target if h == short else int(round(h * scale))
    nw = target if w == short else int(round(w * scale))
    pil = Image.fromarray(to_uint8_hwc(img)).resize((nw, nh), Image.BILINEAR)
    return np.asarray(pil, dtype=np.float32).transpose(2, 0, 1) / 255.0


# -- ingest --------------------------------------------------------------------

def read_annotations(path):
    """JSON-lines ``{"file", "category", "region"?, "flags"?}`` keyed by file."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                out[rec["file"]] = rec
            except (ValueError, KeyError) as exc:
                raise DatasetError(f"{path}:{lineno}: bad annotation line ({exc})") from exc
    return out


def ingest(corpus_dir, annotations, out_dir):
    """Run the filter chain over every image file below ``corpus_dir``.

    Accepted images are written as PNG under ``out_dir/images`` and listed in
    the returned manifest (all records in split ``train`` until
    :func:`split` is applied). ``out_dir/annotations.jsonl`` describes the
    output so that ingesting it again reproduces it. Returns
    ``(manifest, rejected)`` with ``rejected`` a list of ``(file, reason)``.
    """
    corpus_dir, out_dir = Path(corpus_dir), Path(out_dir)
    if not isinstance(annotations, dict):
        annotations = read_annotations(annotations)
    files = sorted(p for p in corpus_dir.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)

    seen = set()
    records, rejected, out_ann = [], [], []
    for path in files:
        rel = path.relative_to(corpus_dir).as_posix()
        reason, result = _ingest_one(path, rel, annotations.get(rel), seen)
        if reason:
            rejected.append((rel, reason))
            log.info("rejected %s: %s", rel, reason)
            continue
        img, ann = result
        out_rel = Path("images") / Path(rel).with_suffix(".png")
        write_png(out_dir / out_rel, img)
        digest = content_hash((out_dir / out_rel).read_bytes())
        records.append(SampleRecord(out_rel.as_posix(), ann["category"], digest,
                                    crop_region=tuple(ann["region"]) if ann.get("region") else None))
        out_ann.append({"file": Path(rel).with_suffix(".png").as_posix(), "category": ann["category"]})

    manifest = DatasetManifest(records=records, root=out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "annotations.jsonl", "w", encoding="utf-8") as fh:
        for a in out_ann:
            fh.write(json.dumps(a) + "\n")
    return manifest, rejected


def _ingest_one(path, rel, ann, seen):
    if ann is None:
        return "missing_annotation", None
    if ann.get("category") not in CATEGORY_INDEX:
        return "unknown_category", None
    data = path.read_bytes()
    try:
        with Image.open(path) as im:
            im.load()
            img = np.asarray(im.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
    except (OSError, UnidentifiedImageError, ValueError):
        return "undecodable", None
    digest = content_hash(data)
    if digest in seen:
        return "duplicate", None
    seen.add(digest)
    if is_blank(img):
        return "blank", None
    if not is_color(img):
        return "grayscale", None
    if SCREEN_FLAGS & set(ann.get("flags", ())):
        return "screened", None
    src_h, src_w = img.shape[1:]
    img, (top, left) = trim_borders(img)
    if not passes_min_size(*img.shape[1:]):
        return "too_small", None
    region = ann.get("region")
    if region:
        x, y, w, h = (int(v) for v in region)
        if x < 0 or y < 0 or w <= 0 or h <= 0 or x + w > src_w or y + h > src_h:
            return "region_out_of_bounds", None
        y0, x0 = max(y - top, 0), max(x - left, 0)
        y1, x1 = min(y + h - top, img.shape[1]), min(x + w - left, img.shape[2])
        if y1 - y0 < CROP_SIZE or x1 - x0 < CROP_SIZE:
            return "region_too_small", None
        img = img[:, y0:y1, x0:x1]
    return None, (resize_min_side(img), ann)


# -- splits --------------------------------------------------------------------

def _by_category(records):
    groups = {c: [] for c in CATEGORIES}
    for r in sorted(records, key=lambda r: r.image_path):
        groups[r.category].append(r)
    return groups


def split(manifest, seed, val_per_cat=200, test_per_cat=100):
    """Seeded per-category shuffle: ``val_per_cat`` to val, ``test_per_cat`` to test, the rest train."""
    rng = np.random.default_rng(seed)
    out = []
    for cat, recs in _by_category(manifest.records).items():
        if len(recs) < val_per_cat + test_per_cat + 1:
            raise DatasetError(
                f"category {cat!r} has {len(recs)} samples, needs at least {val_per_cat + test_per_cat + 1}")
        order = rng.permutation(len(recs))
        for rank, idx in enumerate(order):
            which = "val" if rank < val_per_cat else "test" if rank < val_per_cat + test_per_cat else "train"
            out.append(replace(recs[idx], split=which))
    return replace(manifest, records=out, split_seed=seed,
                   quotas={"val_per_cat": val_per_cat, "test_per_cat": test_per_cat})


def fmd_split(manifest, seed, test_per_cat=20, expected_per_cat=100):
    """80/20 per-category train/test split, no validation set."""
    rng = np.random.default_rng(seed)
    out = []
    for cat, recs in _by_category(manifest.records).items():
        n = len(recs)
        quota = test_per_cat
        if n != expected_per_cat:
            quota = int(round(test_per_cat * n / expected_per_cat))
            warnings.warn(f"category {cat!r} has {n} images instead of {expected_per_cat}; "
                          f"using {quota} test images", stacklevel=2)
        order = rng.permutation(n)
        for rank, idx in enumerate(order):
            out.append(replace(recs[idx], split="test" if rank < quota else "train"))
    return replace(manifest, records=out, split_seed=seed, quotas={"test_per_cat": test_per_cat})


# -- persistence ---------------------------------------------------------------

def save_manifest(manifest, out_dir):
    """``records.jsonl`` + ``manifest.json`` header (+ ``mean_image/`` when set)."""
    from .weights_io import save_weights

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "records.jsonl", "w", encoding="utf-8") as fh:
        for r in manifest.records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    header = {"split_seed": manifest.split_seed, "quotas": manifest.quotas, "counts": manifest.counts(),
              "categories": list(CATEGORIES), "has_mean_image": manifest.mean_image is not None}
    (out_dir / "manifest.json").write_text(json.dumps(header, indent=2, sort_keys=True), encoding="utf-8")
    if manifest.mean_image is not None:
        save_weights({"mean_image": manifest.mean_image}, out_dir / "mean_image")


def load_manifest(path):
    from .weights_io import load_weights

    path = Path(path)
    try:
        header = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
        with open(path / "records.jsonl", encoding="utf-8") as fh:
            records = [SampleRecord.from_dict(json.loads(l)) for l in fh if l.strip()]
    except (OSError, ValueError, KeyError) as exc:
        raise DatasetError(f"cannot load manifest from {path}: {exc}") from exc
    mean = load_weights(path / "mean_image")["mean_image"] if header.get("has_mean_image") else None
    return DatasetManifest(records, header.get("split_seed"), header.get("quotas", {}), path, mean)


# -- augmentation ---------------------------------------------------------------

def _crop_hw(size):
    return (size, size) if isinstance(size, int) else (int(size[0]), int(size[1]))


def random_crop(image, size=CROP_SIZE, rng=None):
    """Uniformly placed ``size`` crop lying fully inside ``image`` (C, H, W)."""
    ch, cw = _crop_hw(size)
    _, h, w = image.shape
    if h < ch or w < cw:
        raise ConfigurationError(f"image {h}x{w} smaller than crop {ch}x{cw}")
    rng = rng if rng is not None else np.random.default_rng()
    y = int(rng.integers(0, h - ch + 1))
    x = int(rng.integers(0, w - cw + 1))
    return image[:, y:y + ch, x:x + cw]


def center_crop(image, size=CROP_SIZE):
    ch, cw = _crop_hw(size)
    _, h, w = image.shape
    if h < ch or w < cw:
        raise ConfigurationError(f"image {h}x{w} smaller than crop {ch}x{cw}")
    y, x = (h - ch) // 2, (w - cw) // 2
    return image[:, y:y + ch, x:x + cw]


def mean_image(images, size=CROP_SIZE):
    """Per-pixel, per-channel mean of the centre crops of ``images``."""
    total, n = None, 0
    for img in images:
        crop = center_crop(np.asarray(img), size).astype(np.float64)
        total = crop.copy() if total is None else total + crop
        n += 1
    if n == 0:
        raise DatasetError("cannot compute the mean of an empty split")
    return (total / n).astype(np.float32)


def subtract_mean(sample, mean):
    if sample.shape != mean.shape:
        raise ConfigurationError(f"sample {sample.shape} and mean {mean.shape} differ in shape")
    return sample - mean


def mask_fill(image, mask, mode="mean_color"):
    """Replace pixels where ``mask == 0`` by the image's mean colour or by white."""
    image = np.asarray(image)
    mask = np.asarray(mask).astype(bool)
    if mask.shape != image.shape[1:]:
        raise ConfigurationError(f"mask {mask.shape} does not match image {image.shape[1:]}")
    if mode == "mean_color":
        fill = image.reshape(image.shape[0], -1).mean(axis=1)
    elif mode == "white":
        fill = np.ones(image.shape[0])
    else:
        raise ConfigurationError(f"unknown fill mode {mode!r}")
    out = image.copy()
    out[:, ~mask] = fill.astype(image.dtype)[:, None]
    return out
