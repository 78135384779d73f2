"""Set encoders: a single pre-norm transformer layer and linear modality adapters.

No positional signal is ever added, so the layer is permutation-equivariant
over its rows.
"""

from __future__ import annotations

import math

import numpy as np

from . import numgraph as ng

TRANSFORMER_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                    "w1", "b1", "w2", "b2", "ln1_g", "ln1_b", "ln2_g", "ln2_b")


def init_transformer(dim: int, rng: np.random.Generator, ffn_mult: int = 4,
                     dtype=np.float32) -> dict[str, np.ndarray]:
    """Parameters for one layer.

    Input projections are U(-1/sqrt(D), 1/sqrt(D)); the attention-output and
    FFN-output projections start at zero so the fresh layer is the identity.
    """
    hidden = ffn_mult * dim
    bound = 1.0 / math.sqrt(dim)

    def uniform(*shape):
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    def zeros(*shape):
        return np.zeros(shape, dtype=dtype)

    return {
        "wq": uniform(dim, dim), "bq": zeros(dim),
        "wk": uniform(dim, dim), "bk": zeros(dim),
        "wv": uniform(dim, dim), "bv": zeros(dim),
        "wo": zeros(dim, dim), "bo": zeros(dim),
        "w1": uniform(dim, hidden), "b1": zeros(hidden),
        "w2": zeros(hidden, dim), "b2": zeros(dim),
        "ln1_g": np.ones(dim, dtype=dtype), "ln1_b": zeros(dim),
        "ln2_g": np.ones(dim, dtype=dtype), "ln2_b": zeros(dim),
    }


def init_adapter(dim: int, dtype=np.float32) -> dict[str, np.ndarray]:
    return {"weight": np.eye(dim, dtype=dtype), "bias": np.zeros(dim, dtype=dtype)}


def _as_batch(x: ng.Node, mask):
    """Promote (N, D) input to (1, N, D)."""
    if x.ndim == 2:
        n = x.shape[0]
        mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        return ng.reshape(x, (1,) + x.shape), mask[None, :], True
    if x.ndim != 3:
        raise ng.GraphError(f"transformer: expected (N, D) or (B, N, D), got {x.shape}")
    mask = np.ones(x.shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    return x, mask, False


def transformer_layer_forward(x: ng.Node, params: dict[str, ng.Node], mask=None,
                              heads: int = 8) -> ng.Node:
    """Pre-LN encoder layer: ``h = x + Attn(LN(x))``, ``out = h + FFN(LN(h))``.

    ``x`` is (N, D) or a padded batch (B, N, D) with a boolean ``mask`` of
    shape (N,) or (B, N). Inactive rows are excluded as attention keys and
    zeroed in the output.
    """
    x = ng._as_node(x)
    xb, mask, squeeze = _as_batch(x, mask)
    b, n, d = xb.shape
    if mask.shape != (b, n):
        raise ng.GraphError(f"transformer: mask shape {mask.shape} does not match input {xb.shape}")
    if not mask.any(axis=1).all():
        raise ng.GraphError("transformer: mask has no active position")
    if d % heads:
        raise ng.GraphError(f"transformer: width {d} not divisible by {heads} heads")
    dh = d // heads
    P = params

    def split_heads(t):
        return ng.transpose(ng.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    h = ng.layer_norm(xb, P["ln1_g"], P["ln1_b"])
    q = split_heads(h @ P["wq"] + P["bq"])
    k = split_heads(h @ P["wk"] + P["bk"])
    v = split_heads(h @ P["wv"] + P["bv"])
    scores = ng.scale(q @ ng.transpose(k), 1.0 / math.sqrt(dh))
    attn = ng.masked_softmax(scores, mask[:, None, None, :], axis=-1)
    ctx = ng.reshape(ng.transpose(attn @ v, (0, 2, 1, 3)), (b, n, d))
    xb = xb + (ctx @ P["wo"] + P["bo"])

    h2 = ng.layer_norm(xb, P["ln2_g"], P["ln2_b"])
    xb = xb + (ng.gelu(h2 @ P["w1"] + P["b1"]) @ P["w2"] + P["b2"])
    out = ng.mul(xb, mask[:, :, None].astype(xb.dtype))
    if squeeze:
        out = ng.reshape(out, (n, d))
    return out


def apply_adapter(x: ng.Node, params: dict[str, ng.Node]) -> ng.Node:
    """Row-wise affine map ``x @ W + b``."""
    x = ng._as_node(x)
    w = params["weight"]
    if x.shape[-1] != w.shape[0]:
        raise ng.GraphError(f"adapter: input width {x.shape[-1]} does not match weight {w.shape}")
    return x @ w + params["bias"]
