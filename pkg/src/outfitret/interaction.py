"""Weighted token-wise interaction (WTI) similarity and the symmetric InfoNCE loss.

Similarity matrices are indexed ``[outfit, text]``; the diagonal holds the
matched pairs of a batch.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import numgraph as ng


class WtiParts(NamedTuple):
    cos: ng.Node        # (Bo, Bt, No, Nt) token cosines
    w_o: ng.Node        # (Bo, No) outfit token weights
    w_t: ng.Node        # (Bt, Nt) text token weights
    term_o: ng.Node     # (Bo, Bt) weighted best match of each outfit token
    term_t: ng.Node | None  # (Bo, Bt) weighted best match of each text token


def _batched(e, mask):
    e = ng._as_node(e)
    if e.ndim == 2:
        e = ng.reshape(e, (1,) + e.shape)
        mask = None if mask is None else np.asarray(mask, dtype=bool)[None, :]
    if e.ndim != 3:
        raise ng.GraphError(f"wti: expected (N, D) or (B, N, D) tokens, got {e.shape}")
    if mask is None:
        mask = np.ones(e.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != e.shape[:2]:
        raise ng.GraphError(f"wti: mask {mask.shape} does not match tokens {e.shape}")
    if not mask.any(axis=1).all():
        raise ng.GraphError("wti: a token set is entirely masked")
    return e, mask


def token_weights(e: ng.Node, head: dict, mask) -> ng.Node:
    """Softmax over active tokens of a linear score per token; (B, N, D) -> (B, N)."""
    b, n, _ = e.shape
    logits = ng.reshape(e @ ng._as_node(head["weight"]) + ng._as_node(head["bias"]), (b, n))
    return ng.masked_softmax(logits, mask, axis=-1)


def wti_parts(e_o, e_t, head_o: dict, head_t: dict, mask_o=None, mask_t=None,
              with_text_term: bool = True, strict: bool = False) -> WtiParts:
    e_o, mask_o = _batched(e_o, mask_o)
    e_t, mask_t = _batched(e_t, mask_t)
    bo, no, d = e_o.shape
    bt, nt, d_t = e_t.shape
    if d != d_t:
        raise ng.GraphError(f"wti: embedding widths differ ({d} vs {d_t})")

    flat_o = ng.reshape(ng.row_l2_normalize(e_o, strict), (bo * no, d))
    flat_t = ng.reshape(ng.row_l2_normalize(e_t, strict), (bt * nt, d))
    cos = ng.clip(flat_o @ ng.transpose(flat_t), -1.0, 1.0)
    cos = ng.transpose(ng.reshape(cos, (bo, no, bt, nt)), (0, 2, 1, 3))

    w_o = token_weights(e_o, head_o, mask_o)
    w_t = token_weights(e_t, head_t, mask_t)

    best_for_o = ng.masked_row_max(cos, mask_t[None, :, None, :], axis=3)   # (bo, bt, no)
    term_o = ng.sum(ng.mul(best_for_o, ng.reshape(w_o, (bo, 1, no))), axis=2)
    term_t = None
    if with_text_term:
        best_for_t = ng.masked_row_max(cos, mask_o[:, None, :, None], axis=2)  # (bo, bt, nt)
        term_t = ng.sum(ng.mul(best_for_t, ng.reshape(w_t, (1, bt, nt))), axis=2)
    return WtiParts(cos, w_o, w_t, term_o, term_t)


def wti_matrix(e_o, e_t, head_o: dict, head_t: dict, p: float, mask_o=None, mask_t=None,
               terms: str = "full", strict: bool = False) -> ng.Node:
    """(Bo, Bt) WTI similarities between every outfit and every text.

    ``terms="full"`` mixes both directions with task weight ``p``;
    ``terms="t2o"`` keeps only the outfit-token-weighted term.
    """
    if terms not in ("full", "t2o"):
        raise ValueError(f"terms must be 'full' or 't2o', got {terms!r}")
    need_text = terms == "full" and p != 0
    parts = wti_parts(e_o, e_t, head_o, head_t, mask_o, mask_t, need_text, strict)
    if not need_text:
        return parts.term_o
    return ng.scale(parts.term_o + ng.scale(parts.term_t, p), 1.0 / (1.0 + p))


def wti_similarity(e_o, e_t, head_o: dict, head_t: dict, p: float, mask_o=None, mask_t=None,
                   terms: str = "full") -> ng.Node:
    """Scalar WTI similarity of one outfit token set with one text token set."""
    e_o, e_t = ng._as_node(e_o), ng._as_node(e_t)
    if e_o.ndim != 2 or e_t.ndim != 2:
        raise ng.GraphError("wti_similarity: expects single (N, D) token matrices")
    s = wti_matrix(e_o, e_t, head_o, head_t, p, mask_o, mask_t, terms)
    return ng.reshape(s, ())


def batch_similarity(e_o, mask_o, e_t, mask_t, head_o: dict, head_t: dict, p: float) -> ng.Node:
    """Item-level B x B matrix for a padded batch of B (outfit, text) pairs."""
    return wti_matrix(e_o, e_t, head_o, head_t, p, mask_o, mask_t)


def _logits(sim: ng.Node, logit_scale: float, temperature_mode: str) -> ng.Node:
    if temperature_mode == "scale":
        return ng.scale(sim, logit_scale)
    if temperature_mode == "divide":
        return ng.scale(sim, 1.0 / logit_scale)
    raise ValueError(f"unknown temperature_mode {temperature_mode!r}")


def info_nce_terms(sim: ng.Node, logit_scale: float = 100.0,
                   temperature_mode: str = "scale") -> tuple[ng.Node, ng.Node]:
    """Row-direction and column-direction parts of the symmetric loss.

    Each is ``-(1/B) * sum of log-probabilities of the diagonal``; the full
    loss is their sum.
    """
    sim = ng._as_node(sim)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ng.GraphError(f"info_nce: similarity matrix must be square, got {sim.shape}")
    b = sim.shape[0]
    logits = _logits(sim, logit_scale, temperature_mode)
    eye = np.eye(b, dtype=sim.dtype)
    rows = ng.scale(ng.sum(ng.mul(ng.log_softmax(logits, axis=1), eye)), -1.0 / b)
    cols = ng.scale(ng.sum(ng.mul(ng.log_softmax(logits, axis=0), eye)), -1.0 / b)
    return rows, cols


def info_nce(sim, logit_scale: float = 100.0, temperature_mode: str = "scale") -> ng.Node:
    rows, cols = info_nce_terms(sim, logit_scale, temperature_mode)
    return rows + cols
