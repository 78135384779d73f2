"""Container for every trainable array of the retrieval head."""

from __future__ import annotations

import numpy as np

from . import numgraph as ng
from .config import Hyperparams
from .encoders import init_adapter, init_transformer

# transformer encoders: style-level (E) and outfit-level (F), one per modality
ENCODERS = ("enc_style_o", "enc_style_t", "enc_outfit_o", "enc_outfit_t")
ADAPTERS = ("adapter_o", "adapter_t")
WTI_HEADS = ("wti_item_o", "wti_item_t", "wti_style_o", "wti_style_t")


def init_wti_head(dim: int, dtype=np.float32) -> dict[str, np.ndarray]:
    # zero init -> uniform token weights
    return {"weight": np.zeros((dim, 1), dtype=dtype), "bias": np.zeros(1, dtype=dtype)}


class HeadParams:
    """Flat ``name -> array`` mapping; names are ``<group>.<key>``."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        self.arrays = dict(sorted(arrays.items()))

    @classmethod
    def init(cls, hyper: Hyperparams, dtype=np.float32) -> "HeadParams":
        rng = np.random.default_rng(hyper.seed)
        arrays = {}

        def put(group, values):
            for key, value in values.items():
                arrays[f"{group}.{key}"] = value

        for group in ADAPTERS:
            put(group, init_adapter(hyper.dim, dtype))
        for group in WTI_HEADS:
            put(group, init_wti_head(hyper.dim, dtype))
        for group in ENCODERS:
            put(group, init_transformer(hyper.dim, rng, hyper.ffn_mult, dtype))
        return cls(arrays)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def __len__(self):
        return len(self.arrays)

    def items(self):
        return self.arrays.items()

    @property
    def dim(self) -> int:
        return self.arrays["adapter_o.weight"].shape[0]

    def astype(self, dtype) -> "HeadParams":
        return HeadParams({k: v.astype(dtype) for k, v in self.arrays.items()})

    def copy(self) -> "HeadParams":
        return HeadParams({k: v.copy() for k, v in self.arrays.items()})

    def leaves(self, trainable: bool = True) -> "ParamNodes":
        make = ng.leaf if trainable else ng.const
        return ParamNodes({k: make(v) for k, v in self.arrays.items()})

    def equal(self, other: "HeadParams") -> bool:
        return (self.arrays.keys() == other.arrays.keys()
                and all(np.array_equal(v, other.arrays[k]) and v.dtype == other.arrays[k].dtype
                        for k, v in self.arrays.items()))


class ParamNodes(dict):
    """Graph nodes for one forward pass, grouped on demand."""

    def group(self, prefix: str) -> dict[str, ng.Node]:
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.items() if k.startswith(prefix + ".")}

    @property
    def dtype(self):
        return next(iter(self.values())).dtype
