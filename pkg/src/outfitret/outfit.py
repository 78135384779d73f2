"""Outfit-level global vectors and the composite three-level objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numgraph as ng
from .config import LEVELS, Hyperparams
from .encoders import apply_adapter, transformer_layer_forward
from .interaction import info_nce, wti_matrix
from .params import ParamNodes
from .style import StyleBatch, extract_styles


def outfit_vector(centroids, enc_params: dict, mask=None, heads: int = 8) -> ng.Node:
    """Mean over rows of the encoded style centroids.

    ``centroids`` is (C, D) -> (D,), or a padded (B, C, D) batch -> (B, D).
    """
    centroids = ng._as_node(centroids)
    if centroids.ndim == 2:
        mask = np.ones(centroids.shape[0], dtype=bool) if mask is None else np.asarray(mask, bool)
        enc = transformer_layer_forward(centroids, enc_params, mask, heads)
        return ng.masked_mean(enc, mask[:, None], axis=0)
    mask = np.ones(centroids.shape[:2], dtype=bool) if mask is None else np.asarray(mask, bool)
    enc = transformer_layer_forward(centroids, enc_params, mask, heads)
    return ng.masked_mean(enc, mask[:, :, None], axis=1)


def outfit_similarity(o, t, strict: bool = False) -> float:
    """Cosine between two global vectors."""
    o = np.asarray(o.value if isinstance(o, ng.Node) else o, dtype=np.float64)
    t = np.asarray(t.value if isinstance(t, ng.Node) else t, dtype=np.float64)
    no, nt = np.linalg.norm(o), np.linalg.norm(t)
    if strict and (no == 0 or nt == 0):
        raise ValueError("outfit_similarity: zero vector")
    return float(o @ t / (max(no, ng.NORM_EPS) * max(nt, ng.NORM_EPS)))


def style_heads(nodes: ParamNodes, hyper: Hyperparams) -> tuple[dict, dict]:
    prefix = "wti_item" if hyper.share_style_wti else "wti_style"
    return nodes.group(prefix + "_o"), nodes.group(prefix + "_t")


@dataclass
class SideEncoding:
    """One modality of a padded batch after each level's encoder."""

    e: ng.Node                        # adapted tokens (B, N, D)
    mask: np.ndarray
    ids: list
    styles: StyleBatch | None = None
    vec: ng.Node | None = None        # global vectors (B, D)


def encode_side(raw, mask, ids, nodes: ParamNodes, hyper: Hyperparams, side: str,
                styles: bool = True, outfit: bool = True) -> SideEncoding:
    """Run adapter, style extractor and outfit encoder for ``side`` in {"o", "t"}."""
    raw = ng.const(np.asarray(raw).astype(nodes.dtype, copy=False))
    e = apply_adapter(raw, nodes.group(f"adapter_{side}"))
    enc = SideEncoding(e, np.asarray(mask, dtype=bool), list(ids))
    if not (styles or outfit):
        return enc
    enc.styles = extract_styles(
        e, enc.mask, nodes.group(f"enc_style_{side}"), hyper.k_o if side == "o" else hyper.k_t,
        heads=hyper.heads, greedy=hyper.greedy_init, seed=hyper.seed, ids=enc.ids,
        max_iter=hyper.kmeans_max_iter, tol=hyper.kmeans_tol,
        level="outfit" if side == "o" else "text")
    if outfit:
        enc.vec = outfit_vector(enc.styles.centroids, nodes.group(f"enc_outfit_{side}"),
                                enc.styles.mask, hyper.heads)
    return enc


@dataclass
class LevelOutputs:
    """B x B similarity matrices of one forward pass (None when a level is off)."""

    side_o: SideEncoding
    side_t: SideEncoding
    sim_item: ng.Node | None = None
    sim_style: ng.Node | None = None
    sim_outfit: ng.Node | None = None


def forward_levels(batch, nodes: ParamNodes, hyper: Hyperparams,
                   levels=LEVELS) -> LevelOutputs:
    """Compute the B x B similarity matrices for the requested levels.

    Style extraction also runs when only the outfit level is requested,
    since the global vectors pool the style centroids.
    """
    need_styles = "style" in levels or "outfit" in levels
    need_outfit = "outfit" in levels
    side_o = encode_side(batch.e_o, batch.mask_o, batch.ids, nodes, hyper, "o",
                         need_styles, need_outfit)
    side_t = encode_side(batch.e_t, batch.mask_t, batch.ids, nodes, hyper, "t",
                         need_styles, need_outfit)
    out = LevelOutputs(side_o, side_t)
    if "item" in levels:
        out.sim_item = wti_matrix(side_o.e, side_t.e, nodes.group("wti_item_o"),
                                  nodes.group("wti_item_t"), hyper.p, side_o.mask, side_t.mask,
                                  strict=hyper.strict_norm)
    if "style" in levels:
        head_o, head_t = style_heads(nodes, hyper)
        out.sim_style = wti_matrix(side_o.styles.centroids, side_t.styles.centroids, head_o, head_t,
                                   hyper.p, side_o.styles.mask, side_t.styles.mask)
    if need_outfit:
        out.sim_outfit = ng.cosine_matrix(side_o.vec, side_t.vec, hyper.strict_norm)
    return out


@dataclass
class CompositeLossReport:
    item: float
    style: float
    outfit: float
    total: float
    alpha: float
    beta: float
    loss: ng.Node  # differentiable total

    def as_dict(self) -> dict:
        return {"item": self.item, "style": self.style, "outfit": self.outfit,
                "total": self.total, "alpha": self.alpha, "beta": self.beta}


def total_loss(batch, nodes: ParamNodes, hyper: Hyperparams,
               levels=LEVELS) -> CompositeLossReport:
    """``L_item + alpha * L_style + beta * L_outfit`` over one batch.

    A level that is switched off contributes 0 and is not computed.
    """
    levels = tuple(levels)
    out = forward_levels(batch, nodes, hyper, levels)
    nce = dict(logit_scale=hyper.logit_scale, temperature_mode=hyper.temperature_mode)
    terms = []
    values = {"item": 0.0, "style": 0.0, "outfit": 0.0}
    for name, sim, weight in (("item", out.sim_item, 1.0),
                              ("style", out.sim_style, hyper.alpha),
                              ("outfit", out.sim_outfit, hyper.beta)):
        if sim is None:
            continue
        level_loss = info_nce(sim, **nce)
        values[name] = float(level_loss.value)
        terms.append(level_loss if weight == 1.0 else ng.scale(level_loss, weight))
    if terms:
        loss = terms[0]
        for t in terms[1:]:
            loss = loss + t
    else:
        loss = ng.const(np.zeros((), dtype=nodes.dtype))
    return CompositeLossReport(values["item"], values["style"], values["outfit"],
                               float(loss.value), hyper.alpha, hyper.beta, loss)
