"""Parameter files: a JSON manifest plus raw little-endian float32 data.

Layout of a weights directory::

    manifest.json   {"format_version": 1, "entries": [...]}
    tensors.bin     every tensor back to back, row-major, no header

Each entry records ``name``, ``shape``, ``dtype`` ("f32"), ``byte_offset``,
``byte_length`` and ``checksum`` (64-bit FNV-1a of the tensor's bytes, as
16 hex digits).
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .errors import ConfigurationError, WeightsError

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "tensors.bin"
_LE_F32 = np.dtype("<f4")

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


@numba.njit(cache=True)
def _fnv1a(data, h, prime):
    for b in data:
        h ^= np.uint64(b)
        h *= prime
    return h


def fnv1a64(data):
    """64-bit FNV-1a of a bytes-like object."""
    buf = np.frombuffer(memoryview(data).cast("B"), dtype=np.uint8)
    return int(_fnv1a(buf, np.uint64(FNV_OFFSET), np.uint64(FNV_PRIME)))


@dataclass
class ManifestEntry:
    name: str
    shape: list
    dtype: str
    byte_offset: int
    byte_length: int
    checksum: str


@dataclass
class WeightManifest:
    format_version: int = FORMAT_VERSION
    entries: list = field(default_factory=list)

    def to_dict(self):
        return {"format_version": self.format_version, "entries": [vars(e) for e in self.entries]}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["format_version"]), [ManifestEntry(**e) for e in d["entries"]])


def save_weights(states, path):
    """Write ``{name: array}`` to directory ``path``; returns the manifest."""
    path = Path(path)
    manifest = WeightManifest()
    offset = 0
    try:
        path.mkdir(parents=True, exist_ok=True)
        with open(path / BLOB_NAME, "wb") as fh:
            for name, arr in states.items():
                arr = np.asarray(arr)
                if not np.isfinite(arr).all():
                    raise ConfigurationError(f"tensor {name!r} contains non-finite values")
                raw = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
                fh.write(raw)
                manifest.entries.append(ManifestEntry(
                    name=name, shape=list(arr.shape), dtype="f32", byte_offset=offset,
                    byte_length=len(raw), checksum=f"{fnv1a64(raw):016x}"))
                offset += len(raw)
        (path / MANIFEST_NAME).write_text(json.dumps(manifest.to_dict(), indent=1), encoding="utf-8")
    except OSError as exc:
        raise WeightsError(f"cannot write weights to {path}: {exc}") from exc
    return manifest


def read_manifest(path):
    path = Path(path)
    try:
        return WeightManifest.from_dict(json.loads((path / MANIFEST_NAME).read_text(encoding="utf-8")))
    except (OSError, KeyError, ValueError) as exc:
        raise WeightsError(f"cannot read manifest in {path}: {exc}") from exc


def load_weights(path):
    """Inverse of :func:`save_weights`; verifies every checksum."""
    path = Path(path)
    manifest = read_manifest(path)
    if manifest.format_version != FORMAT_VERSION:
        raise WeightsError(f"unsupported format_version {manifest.format_version}")
    try:
        blob = (path / BLOB_NAME).read_bytes()
    except OSError as exc:
        raise WeightsError(f"cannot read {path / BLOB_NAME}: {exc}") from exc
    out = {}
    end = 0
    for e in manifest.entries:
        if e.byte_offset < end:
            raise WeightsError(f"tensor {e.name!r} overlaps its predecessor")
        end = e.byte_offset + e.byte_length
        raw = blob[e.byte_offset:end]
        if len(raw) != e.byte_length:
            raise WeightsError(f"tensor {e.name!r} truncated in {path / BLOB_NAME}")
        if f"{fnv1a64(raw):016x}" != e.checksum:
            raise WeightsError(f"checksum mismatch for tensor {e.name!r}")
        arr = np.frombuffer(raw, dtype=_LE_F32).astype(np.float32).reshape(e.shape)
        out[e.name] = arr
    return out


def identity_name_map(names):
    return [(n, n) for n in names]


def filter_stage_name_map(network, source_prefix=""):
    """Map reference names (``conv1.weight`` ...) onto every filter-stage parameter.

    In a branched net both towers draw from the same source tensors.
    """
    pairs = []
    for name, stage in network.parameter_stages().items():
        if stage > 0:
            pairs.append((source_prefix + ".".join(name.split(".")[-2:]), name))
    return pairs


def load_pretrained(path, name_map, network, head_reinit=True, seed=0):
    """Copy externally trained filter stages into ``network``.

    ``name_map`` is a list of ``(source_name, target_name)`` pairs. Every
    filter-stage parameter must be a target. Head parameters (stage 0) are
    copied only when mapped, shape-compatible and ``head_reinit`` is false;
    otherwise they are freshly initialised.
    """
    source = load_weights(path)
    targets = [t for _, t in name_map]
    if len(targets) != len(set(targets)):
        raise ConfigurationError("name map is not injective on targets")
    params = network.parameters()
    stages = network.parameter_stages()
    mapped = dict((t, s) for s, t in name_map)

    missing = [n for n, st in stages.items() if st > 0 and n not in mapped]
    if missing:
        raise WeightsError(f"no source mapped for filter-stage tensor(s): {', '.join(missing)}")

    head_fresh = []
    for target, src in mapped.items():
        if target not in params:
            raise WeightsError(f"unknown target tensor {target!r}")
        is_head = stages[target] == 0
        if src not in source:
            if is_head:
                head_fresh.append(target)
                continue
            raise WeightsError(f"source file has no tensor {src!r} (for {target!r})")
        value = source[src]
        if tuple(value.shape) != params[target].shape:
            if is_head:
                head_fresh.append(target)
                continue
            raise WeightsError(
                f"shape mismatch for {src!r} -> {target!r}: {tuple(value.shape)} vs {params[target].shape}")
        if is_head and head_reinit:
            continue
        network.set_parameter(target, value)

    head = [n for n, st in stages.items() if st == 0]
    fresh = head if head_reinit else [n for n in head if n not in mapped or n in head_fresh]
    network.reinitialize(fresh, seed=seed)
    return network.parameters()
