"""Embedding bundles, outfit metadata loading and batch collation.

Bundle layout (all integers little-endian)::

    b"OTFE" | version u32 | D u32 | record count u64
    per record: id length u32 | UTF-8 id | token count u32 | count*D float32 (row-major)
"""

from __future__ import annotations

import json
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"OTFE"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
_U32 = struct.Struct("<I")
FORMATS = ("maryland", "polyvore_outfit", "synthetic")
SPLITS = ("train", "valid", "test")


class BundleError(ValueError):
    pass


class BadMagicError(BundleError):
    pass


class BundleVersionError(BundleError):
    pass


class TruncatedBundleError(BundleError):
    pass


class DuplicateIdError(BundleError):
    pass


class DatasetError(ValueError):
    pass


@dataclass
class EmbeddingBundle:
    """Records of ``id -> (N, D)`` float32 token embeddings, in file order."""

    dim: int
    records: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION

    def add(self, rec_id: str, values) -> None:
        if rec_id in self.records:
            raise DuplicateIdError(f"duplicate record id {rec_id!r}")
        arr = np.asarray(values, dtype=np.float32)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[1] != self.dim or arr.shape[0] < 1:
            raise BundleError(f"record {rec_id!r}: expected (N>=1, {self.dim}) values, got {arr.shape}")
        self.records[rec_id] = arr

    def __len__(self):
        return len(self.records)

    def __contains__(self, rec_id):
        return rec_id in self.records

    def __getitem__(self, rec_id) -> np.ndarray:
        return self.records[rec_id]

    def equal(self, other: "EmbeddingBundle") -> bool:
        return (self.dim == other.dim and list(self.records) == list(other.records)
                and all(np.array_equal(v, other.records[k]) for k, v in self.records.items()))


def write_bundle(bundle: EmbeddingBundle, path) -> None:
    le = np.dtype("<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, bundle.version, bundle.dim, len(bundle.records)))
        for rec_id, values in bundle.records.items():
            raw_id = rec_id.encode("utf-8")
            fh.write(_U32.pack(len(raw_id)))
            fh.write(raw_id)
            fh.write(_U32.pack(values.shape[0]))
            fh.write(np.ascontiguousarray(values, dtype=le).tobytes())


def read_bundle(path) -> EmbeddingBundle:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        if data[:4] != MAGIC[:len(data[:4])]:
            raise BadMagicError(f"{path}: bad magic {data[:4]!r}")
        raise TruncatedBundleError(f"{path}: truncated header")
    magic, version, dim, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise BundleVersionError(f"{path}: unsupported version {version}")
    if dim < 1:
        raise BundleError(f"{path}: invalid embedding width {dim}")
    bundle = EmbeddingBundle(dim, version=version)
    pos = _HEADER.size
    row_bytes = 4 * dim
    for k in range(count):
        try:
            (id_len,) = _U32.unpack_from(data, pos)
            pos += 4
            if pos + id_len > len(data):
                raise struct.error
            rec_id = data[pos:pos + id_len].decode("utf-8")
            pos += id_len
            (n_tok,) = _U32.unpack_from(data, pos)
            pos += 4
        except struct.error:
            raise TruncatedBundleError(f"{path}: truncated at record {k}") from None
        end = pos + n_tok * row_bytes
        if end > len(data):
            raise TruncatedBundleError(f"{path}: truncated at record {k}")
        values = np.frombuffer(data, dtype="<f4", count=n_tok * dim, offset=pos)
        pos = end
        if rec_id in bundle.records:
            raise DuplicateIdError(f"{path}: duplicate record id {rec_id!r}")
        bundle.records[rec_id] = values.astype(np.float32).reshape(n_tok, dim)
    if pos != len(data):
        raise BundleError(f"{path}: {len(data) - pos} trailing bytes after {count} records")
    return bundle


# ---------------------------------------------------------------------------
# samples and datasets


@dataclass
class OutfitSample:
    outfit_id: str
    item_ids: list[str]
    e_o: np.ndarray            # (N_o, D)
    token_strings: list[str]
    e_t: np.ndarray            # (N_t, D)
    split: str = "train"

    def __post_init__(self):
        if self.e_o.ndim != 2 or self.e_o.shape[0] < 1:
            raise DatasetError(f"{self.outfit_id}: outfit needs >= 1 item embedding")
        if self.e_t.ndim != 2 or self.e_t.shape[0] < 1:
            raise DatasetError(f"{self.outfit_id}: description needs >= 1 token embedding")
        if self.e_o.shape[1] != self.e_t.shape[1]:
            raise DatasetError(f"{self.outfit_id}: item width {self.e_o.shape[1]} "
                               f"!= text width {self.e_t.shape[1]}")
        if len(self.item_ids) != self.e_o.shape[0] or len(self.token_strings) != self.e_t.shape[0]:
            raise DatasetError(f"{self.outfit_id}: id/token labels do not match embedding rows")

    @property
    def dim(self) -> int:
        return self.e_o.shape[1]


@dataclass
class Dataset:
    samples: list[OutfitSample]
    split: str = "train"

    def __post_init__(self):
        if self.samples:
            dims = {s.dim for s in self.samples}
            if len(dims) > 1:
                raise DatasetError(f"mixed embedding widths in dataset: {sorted(dims)}")
            seen = set()
            for s in self.samples:
                if s.outfit_id in seen:
                    raise DatasetError(f"duplicate outfit id {s.outfit_id!r} in split {self.split}")
                seen.add(s.outfit_id)

    @property
    def dim(self) -> int:
        return self.samples[0].dim

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


@dataclass
class PairBatch:
    """Padded batch of (outfit, text) pairs."""

    e_o: np.ndarray      # (B, No_max, D)
    mask_o: np.ndarray   # (B, No_max)
    e_t: np.ndarray      # (B, Nt_max, D)
    mask_t: np.ndarray   # (B, Nt_max)
    ids: list[str]

    def __len__(self):
        return len(self.ids)


def _pad(mats, dtype):
    n = max(m.shape[0] for m in mats)
    d = mats[0].shape[1]
    out = np.zeros((len(mats), n, d), dtype=dtype)
    mask = np.zeros((len(mats), n), dtype=bool)
    for i, m in enumerate(mats):
        out[i, :m.shape[0]] = m
        mask[i, :m.shape[0]] = True
    return out, mask


def collate(samples, dtype=np.float32) -> PairBatch:
    samples = list(samples)
    if not samples:
        raise DatasetError("cannot collate an empty batch")
    e_o, mask_o = _pad([s.e_o for s in samples], dtype)
    e_t, mask_t = _pad([s.e_t for s in samples], dtype)
    return PairBatch(e_o, mask_o, e_t, mask_t, [s.outfit_id for s in samples])


# ---------------------------------------------------------------------------
# Polyvore metadata


@dataclass
class JoinStats:
    outfits: int = 0
    loaded: int = 0
    skipped: int = 0
    missing_items: int = 0
    missing_text: int = 0


def _outfit_records(raw, fmt):
    if fmt not in FORMATS:
        raise DatasetError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    if isinstance(raw, dict):
        # some dumps key outfits by set id
        raw = [dict(v, set_id=v.get("set_id", k)) for k, v in raw.items()]
    for rec in raw:
        set_id = str(rec["set_id"])
        item_ids = []
        for pos, item in enumerate(rec.get("items", []), start=1):
            if "item_id" in item:
                item_ids.append(str(item["item_id"]))
            elif fmt == "polyvore_outfit":
                raise DatasetError(f"outfit {set_id}: polyvore_outfit items need 'item_id'")
            else:
                # Maryland item ids are <set_id>_<index>
                item_ids.append(f"{set_id}_{item.get('index', pos)}")
        text = rec.get("name") or rec.get("title") or rec.get("description") or rec.get("desc") or ""
        yield set_id, item_ids, str(text)


def _as_bundle(b) -> EmbeddingBundle:
    if isinstance(b, EmbeddingBundle):
        return b
    path = Path(b)
    if not path.exists():
        raise FileNotFoundError(f"bundle not found: {path}")
    return read_bundle(path)


def load_polyvore(outfits_json, outfit_text_bundle, item_image_bundle, split: str = "train",
                  fmt: str = "maryland", strict: bool = False) -> tuple[Dataset, JoinStats]:
    """Join outfit metadata with precomputed embeddings.

    Item records must hold exactly one row; text records hold one row per
    token. Outfits with missing records are skipped with a warning, or raise
    in strict mode.
    """
    path = Path(outfits_json)
    if not path.exists():
        raise FileNotFoundError(f"outfit metadata not found: {path}")
    raw = json.loads(path.read_text())
    text_b = _as_bundle(outfit_text_bundle)
    item_b = _as_bundle(item_image_bundle)
    if text_b.dim != item_b.dim:
        raise DatasetError(f"embedding width mismatch: outfit_text D={text_b.dim}, "
                           f"item_image D={item_b.dim}")
    stats = JoinStats()
    samples = []
    for set_id, item_ids, text in _outfit_records(raw, fmt):
        stats.outfits += 1
        missing = [i for i in item_ids if i not in item_b]
        problem = None
        if not item_ids:
            problem = "has no items"
        elif missing:
            stats.missing_items += len(missing)
            problem = f"missing item embeddings {missing[:3]}"
        elif set_id not in text_b:
            stats.missing_text += 1
            problem = "missing description embedding"
        if problem:
            if strict:
                raise DatasetError(f"outfit {set_id}: {problem}")
            warnings.warn(f"skipping outfit {set_id}: {problem}", stacklevel=2)
            stats.skipped += 1
            continue
        rows = []
        for i in item_ids:
            rec = item_b[i]
            if rec.shape[0] != 1:
                raise DatasetError(f"item {i}: expected one embedding row, got {rec.shape[0]}")
            rows.append(rec[0])
        e_t = text_b[set_id]
        words = text.split()
        tokens = words if len(words) == e_t.shape[0] else [f"tok{j}" for j in range(e_t.shape[0])]
        samples.append(OutfitSample(set_id, item_ids, np.stack(rows), tokens, e_t, split))
        stats.loaded += 1
    if not samples:
        raise DatasetError(f"no outfits loaded from {path}")
    log.info("loaded %d/%d outfits from %s (%d skipped)", stats.loaded, stats.outfits, path,
             stats.skipped)
    return Dataset(samples, split), stats


def read_manifest(data_dir) -> tuple[dict, Path]:
    path = Path(data_dir)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    manifest = json.loads(path.read_text())
    for key in ("format", "splits", "bundles"):
        if key not in manifest:
            raise DatasetError(f"{path}: manifest lacks {key!r}")
    return manifest, path.parent


def load_dataset(data_dir, split: str = "train", strict: bool = False) -> Dataset:
    """Load one split through a dataset manifest."""
    manifest, root = read_manifest(data_dir)
    if split not in manifest["splits"]:
        raise DatasetError(f"split {split!r} not in manifest (have {sorted(manifest['splits'])})")
    bundles = manifest["bundles"]
    dataset, _ = load_polyvore(root / manifest["splits"][split], root / bundles["outfit_text"],
                               root / bundles["item_image"], split, manifest["format"], strict)
    return dataset
