"""Synthetic outfits with planted styles.

Unit-norm archetypes stand for styles. Items are noisy archetype draws,
description tokens are noisy copies of some of the outfit's items plus
distractors from archetypes the outfit does not use. The planting record
says where every vector came from.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dataio import Dataset, EmbeddingBundle, OutfitSample, SPLITS, write_bundle


@dataclass
class SynthConfig:
    outfits: int = 500
    archetypes: int = 16
    archetypes_per_outfit: tuple[int, int] = (1, 3)
    items: tuple[int, int] = (4, 19)
    tokens: tuple[int, int] = (6, 14)
    sigma: float = 0.1
    # per-item identity offset (total norm), so items of one archetype differ even at sigma=0
    item_spread: float = 0.75
    distractor_rate: float = 0.2
    dim: int = 32
    seed: int = 0
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        self.archetypes_per_outfit = tuple(self.archetypes_per_outfit)
        self.items = tuple(self.items)
        self.tokens = tuple(self.tokens)
        self.split_fractions = tuple(self.split_fractions)
        if self.archetypes < 1:
            raise ValueError("archetype count must be >= 1")
        for name in ("archetypes_per_outfit", "items", "tokens"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} range {lo}..{hi} is empty or below 1")
        if self.sigma < 0 or self.item_spread < 0:
            raise ValueError("sigma and item_spread must be >= 0")
        if not 0 <= self.distractor_rate < 1:
            raise ValueError("distractor_rate must lie in [0, 1)")
        if self.outfits < 1 or self.dim < 1:
            raise ValueError("outfits and dim must be >= 1")
        if abs(sum(self.split_fractions) - 1) > 1e-9 or min(self.split_fractions) < 0:
            raise ValueError("split_fractions must be non-negative and sum to 1")


@dataclass
class Planting:
    archetypes: np.ndarray                 # (A, D)
    outfit_archetypes: dict[str, list[int]]
    item_archetype: dict[str, list[int]]
    token_archetype: dict[str, list[int]]
    token_source: dict[str, list[int]]     # item index copied, -1 for distractors


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _split_sizes(n, fractions):
    sizes = [int(np.floor(f * n)) for f in fractions]
    sizes[0] += n - sum(sizes)
    return sizes


def synth_generate(cfg: SynthConfig) -> tuple[dict[str, Dataset], Planting]:
    rng = np.random.default_rng(cfg.seed)
    d = cfg.dim
    arche = _unit(rng.standard_normal((cfg.archetypes, d)))
    planting = Planting(arche, {}, {}, {}, {})
    n_max_arch = min(cfg.archetypes_per_outfit[1], cfg.archetypes)
    n_min_arch = min(cfg.archetypes_per_outfit[0], n_max_arch)

    def draw(a):
        offset = cfg.item_spread * rng.standard_normal(d) / np.sqrt(d)
        return _unit(arche[a] + offset + cfg.sigma * rng.standard_normal(d))

    split_of = []
    for name, size in zip(SPLITS, _split_sizes(cfg.outfits, cfg.split_fractions)):
        split_of += [name] * size
    by_split = {name: [] for name in SPLITS}
    for o in range(cfg.outfits):
        oid = f"o{o:05d}"
        n_arch = int(rng.integers(n_min_arch, n_max_arch + 1))
        chosen = sorted(int(a) for a in rng.choice(cfg.archetypes, size=n_arch, replace=False))
        n_items = int(rng.integers(cfg.items[0], cfg.items[1] + 1))
        item_arch = list(chosen[:n_items]) + [int(rng.choice(chosen))
                                              for _ in range(n_items - min(n_items, n_arch))]
        item_arch = [item_arch[i] for i in rng.permutation(n_items)]
        e_o = np.stack([draw(a) for a in item_arch])

        n_tok = int(rng.integers(cfg.tokens[0], cfg.tokens[1] + 1))
        others = [a for a in range(cfg.archetypes) if a not in chosen]
        n_dis = int(rng.binomial(n_tok, cfg.distractor_rate)) if others else 0
        n_copy = min(max(n_tok - n_dis, 1), n_items)
        # one copied item per archetype first, then random other items
        sources = []
        for a in chosen:
            members = [i for i, x in enumerate(item_arch) if x == a]
            if len(sources) < n_copy and members:
                sources.append(int(rng.choice(members)))
        rest = [i for i in rng.permutation(n_items) if i not in sources]
        sources += [int(i) for i in rest[:n_copy - len(sources)]]
        tok_vecs, tok_arch, tok_src, tok_str = [], [], [], []
        for i in sources:
            tok_vecs.append(_unit(e_o[i] + cfg.sigma * rng.standard_normal(d)))
            tok_arch.append(item_arch[i])
            tok_src.append(i)
            tok_str.append(f"s{item_arch[i]}i{i}")
        for _ in range(n_dis):
            a = int(rng.choice(others))
            tok_vecs.append(draw(a))
            tok_arch.append(a)
            tok_src.append(-1)
            tok_str.append(f"x{a}")
        order = rng.permutation(len(tok_vecs))
        e_t = np.stack([tok_vecs[j] for j in order])
        split = split_of[o]
        by_split[split].append(OutfitSample(
            oid, [f"{oid}_{i + 1}" for i in range(n_items)], e_o.astype(np.float32),
            [tok_str[j] for j in order], e_t.astype(np.float32), split))
        planting.outfit_archetypes[oid] = chosen
        planting.item_archetype[oid] = item_arch
        planting.token_archetype[oid] = [tok_arch[j] for j in order]
        planting.token_source[oid] = [tok_src[j] for j in order]
    return {name: Dataset(s, name) for name, s in by_split.items()}, planting


def write_dataset(datasets: dict[str, Dataset], out_dir, fmt: str = "synthetic",
                  extra: dict | None = None) -> Path:
    """Write split metadata, both bundles and a manifest into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dim = next(ds.dim for ds in datasets.values() if len(ds))
    text_b, item_b = EmbeddingBundle(dim), EmbeddingBundle(dim)
    splits = {}
    for name, ds in datasets.items():
        records = []
        for s in ds:
            text_b.add(s.outfit_id, s.e_t)
            for item_id, row in zip(s.item_ids, s.e_o):
                item_b.add(item_id, row)
            records.append({"set_id": s.outfit_id, "name": " ".join(s.token_strings),
                            "items": [{"item_id": i, "index": k + 1}
                                      for k, i in enumerate(s.item_ids)]})
        if records:
            fname = f"{name}.json"
            (out / fname).write_text(json.dumps(records))
            splits[name] = fname
    write_bundle(text_b, out / "outfit_text.otfe")
    write_bundle(item_b, out / "item_image.otfe")
    manifest = {"format": fmt, "splits": splits,
                "bundles": {"outfit_text": "outfit_text.otfe", "item_image": "item_image.otfe"}}
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


def write_synthetic(cfg: SynthConfig, out_dir) -> tuple[dict[str, Dataset], Planting]:
    datasets, planting = synth_generate(cfg)
    write_dataset(datasets, out_dir, extra={"synth_config": asdict(cfg)})
    plant = {"archetypes": planting.archetypes.tolist(),
             "outfit_archetypes": planting.outfit_archetypes,
             "item_archetype": planting.item_archetype,
             "token_archetype": planting.token_archetype,
             "token_source": planting.token_source}
    (Path(out_dir) / "planting.json").write_text(json.dumps(plant))
    return datasets, planting
