"""Retrieval scoring, Recall@k and token-interaction export.

Queries are descriptions, candidates are outfits. Ties in score are broken
by outfit id in lexicographic order.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numgraph as ng
from .config import Hyperparams
from .dataio import Dataset, OutfitSample, collate
from .interaction import wti_matrix, wti_parts
from .outfit import SideEncoding, encode_side, style_heads
from .params import HeadParams

log = logging.getLogger(__name__)

MODES = ("item-t2o", "item-full", "combined")
DEFAULT_KS = (5, 10, 30, 50)


class EvaluationError(ValueError):
    pass


def encode(samples, params: HeadParams, hyper: Hyperparams, side: str, styles: bool = True,
           dtype=None) -> SideEncoding:
    """Encode one modality of ``samples`` as a single padded batch (no gradients)."""
    samples = list(samples)
    nodes = params.leaves(trainable=False)
    batch = collate(samples, dtype or nodes.dtype)
    raw, mask = (batch.e_o, batch.mask_o) if side == "o" else (batch.e_t, batch.mask_t)
    return encode_side(raw, mask, batch.ids, nodes, hyper, side, styles, styles)


def score_matrix(outfits: SideEncoding, texts: SideEncoding, params: HeadParams,
                 hyper: Hyperparams, mode: str = "item-t2o", chunk: int = 32) -> np.ndarray:
    """(n_outfits, n_texts) retrieval scores.

    ``item-t2o`` keeps the outfit-token-weighted WTI term, ``item-full`` mixes
    in the text term with weight p, and ``combined`` averages the item and
    style t2o terms and the outfit cosine with weights 1, alpha, beta.
    """
    if mode not in MODES:
        raise EvaluationError(f"unknown mode {mode!r}; choose from {MODES}")
    if mode == "combined" and (outfits.styles is None or texts.styles is None):
        raise EvaluationError("combined mode needs style encodings")
    nodes = params.leaves(trainable=False)
    item_o, item_t = nodes.group("wti_item_o"), nodes.group("wti_item_t")
    terms = "full" if mode == "item-full" else "t2o"
    n_t = texts.e.shape[0]
    out = np.empty((outfits.e.shape[0], n_t), dtype=outfits.e.dtype)
    for lo in range(0, n_t, chunk):
        sl = slice(lo, min(lo + chunk, n_t))
        s = wti_matrix(outfits.e, ng.const(texts.e.value[sl]), item_o, item_t, hyper.p,
                       outfits.mask, texts.mask[sl], terms=terms).value
        if mode == "combined":
            head_o, head_t = style_heads(nodes, hyper)
            so, st = outfits.styles, texts.styles
            s_style = wti_matrix(so.centroids, ng.const(st.centroids.value[sl]), head_o, head_t,
                                 hyper.p, so.mask, st.mask[sl], terms="t2o").value
            s_outfit = ng.cosine_matrix(outfits.vec, ng.const(texts.vec.value[sl])).value
            s = (s + hyper.alpha * s_style + hyper.beta * s_outfit) / (1 + hyper.alpha + hyper.beta)
        out[:, sl] = s
    return out


def inference_score(text: OutfitSample, outfit: OutfitSample, params: HeadParams,
                    hyper: Hyperparams, mode: str = "item-t2o") -> float:
    need = mode == "combined"
    o = encode([outfit], params, hyper, "o", need)
    t = encode([text], params, hyper, "t", need)
    return float(score_matrix(o, t, params, hyper, mode)[0, 0])


@dataclass
class RetrievalResult:
    query_id: str
    ranking: list[tuple[str, float]]
    gt_rank: int | None  # 1-based; None when the true outfit is not a candidate


def rank_candidates(scores: np.ndarray, candidate_ids, query_id: str,
                    gt_id: str | None = None, top: int | None = None) -> RetrievalResult:
    """Sort candidates by descending score, ties by id."""
    ids = np.asarray(candidate_ids)
    order = np.lexsort((ids, -scores.astype(np.float64)))
    gt = gt_id if gt_id is not None else query_id
    hits = np.flatnonzero(ids[order] == gt)
    rank = int(hits[0]) + 1 if hits.size else None
    keep = order if top is None else order[:top]
    return RetrievalResult(query_id, [(str(ids[i]), float(scores[i])) for i in keep], rank)


def recall_at_k(results, ks=DEFAULT_KS) -> dict:
    """Fraction of queries whose true outfit ranks within the top k."""
    results = list(results)
    if not results:
        raise EvaluationError("recall_at_k: no results")
    ranks = []
    for r in results:
        if r.gt_rank is None:
            raise EvaluationError(f"query {r.query_id}: ground-truth outfit not in index")
        ranks.append(r.gt_rank)
    ranks = np.asarray(ranks)
    metrics = {f"R@{k}": float(np.mean(ranks <= k)) for k in ks}
    metrics["queries"] = len(results)
    return metrics


def evaluate(dataset: Dataset, params: HeadParams, hyper: Hyperparams, mode: str = "item-t2o",
             ks=DEFAULT_KS, results_path=None, top: int = 50,
             progress: bool = False) -> tuple[dict, list[RetrievalResult]]:
    """Rank every outfit of ``dataset`` for every description of ``dataset``."""
    if len(dataset) == 0:
        raise EvaluationError("evaluate: empty split")
    need = mode == "combined"
    enc_o = encode(dataset, params, hyper, "o", need)
    enc_t = encode(dataset, params, hyper, "t", need)
    ids = [s.outfit_id for s in dataset]
    results = []
    step = 64
    for lo in range(0, len(dataset), step):
        sl = slice(lo, min(lo + step, len(dataset)))
        sub_t = _slice_side(enc_t, sl)
        scores = score_matrix(enc_o, sub_t, params, hyper, mode)
        for j, qid in enumerate(ids[sl]):
            results.append(rank_candidates(scores[:, j], ids, qid, top=top))
        if progress:
            log.info("scored %d/%d queries", sl.stop, len(dataset))
    metrics = recall_at_k(results, ks)
    if results_path:
        with open(results_path, "w") as fh:
            for r in results:
                fh.write(json.dumps({"query": r.query_id, "gt_rank": r.gt_rank,
                                     "top": r.ranking}) + "\n")
    return metrics, results


def _slice_side(enc: SideEncoding, sl: slice) -> SideEncoding:
    out = SideEncoding(ng.const(enc.e.value[sl]), enc.mask[sl], enc.ids[sl])
    if enc.styles is not None:
        from .style import StyleBatch
        st = enc.styles
        out.styles = StyleBatch(ng.const(st.centroids.value[sl]), st.mask[sl], st.tokens[sl],
                                ng.const(st.encoded.value[sl]))
    if enc.vec is not None:
        out.vec = ng.const(enc.vec.value[sl])
    return out


# ---------------------------------------------------------------------------
# interaction export


@dataclass
class InteractionExport:
    outfit_id: str
    item_ids: list[str]
    tokens: list[str]
    item_matrix: np.ndarray           # (N_o, N_t) cosines
    item_weights_o: np.ndarray
    item_weights_t: np.ndarray
    style_matrix: np.ndarray          # (c_o, c_t) cosines between centroids
    style_weights_o: np.ndarray
    style_weights_t: np.ndarray
    outfit_clusters: list[list[str]] = field(default_factory=list)
    text_clusters: list[list[str]] = field(default_factory=list)
    scores: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "outfit_id": self.outfit_id,
            "item_ids": self.item_ids,
            "tokens": self.tokens,
            "item_level": {"cosine": self.item_matrix.tolist(),
                           "weights_outfit": self.item_weights_o.tolist(),
                           "weights_text": self.item_weights_t.tolist()},
            "style_level": {"cosine": self.style_matrix.tolist(),
                            "weights_outfit": self.style_weights_o.tolist(),
                            "weights_text": self.style_weights_t.tolist(),
                            "outfit_clusters": self.outfit_clusters,
                            "text_clusters": self.text_clusters},
            "scores": self.scores,
        }


def interactions(sample: OutfitSample, params: HeadParams, hyper: Hyperparams) -> InteractionExport:
    """Item- and style-level token interactions of one (outfit, description) pair."""
    nodes = params.leaves(trainable=False)
    o = encode([sample], params, hyper, "o")
    t = encode([sample], params, hyper, "t")
    item = wti_parts(o.e, t.e, nodes.group("wti_item_o"), nodes.group("wti_item_t"),
                     o.mask, t.mask)
    head_o, head_t = style_heads(nodes, hyper)
    style = wti_parts(o.styles.centroids, t.styles.centroids, head_o, head_t,
                      o.styles.mask, t.styles.mask)
    tok_o, tok_t = o.styles.tokens[0], t.styles.tokens[0]
    n_o, n_t = sample.e_o.shape[0], sample.e_t.shape[0]
    c_o, c_t = tok_o.count, tok_t.count
    p = hyper.p
    item_full = (item.term_o.value[0, 0] + p * item.term_t.value[0, 0]) / (1 + p)
    return InteractionExport(
        outfit_id=sample.outfit_id,
        item_ids=list(sample.item_ids),
        tokens=list(sample.token_strings),
        item_matrix=item.cos.value[0, 0, :n_o, :n_t].copy(),
        item_weights_o=item.w_o.value[0, :n_o].copy(),
        item_weights_t=item.w_t.value[0, :n_t].copy(),
        style_matrix=style.cos.value[0, 0, :c_o, :c_t].copy(),
        style_weights_o=style.w_o.value[0, :c_o].copy(),
        style_weights_t=style.w_t.value[0, :c_t].copy(),
        outfit_clusters=[[sample.item_ids[i] for i in np.flatnonzero(tok_o.assignments == c)]
                         for c in range(c_o)],
        text_clusters=[[sample.token_strings[i] for i in np.flatnonzero(tok_t.assignments == c)]
                       for c in range(c_t)],
        scores={"item_t2o": float(item.term_o.value[0, 0]), "item_full": float(item_full),
                "style_t2o": float(style.term_o.value[0, 0])},
    )


def _write_csv(path, matrix, row_labels, col_labels):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([""] + list(col_labels))
        for label, row in zip(row_labels, matrix):
            w.writerow([label] + [repr(float(v)) for v in row])


def export_interactions(sample: OutfitSample, params: HeadParams, hyper: Hyperparams,
                        out_path) -> InteractionExport:
    """Write ``<out>.json`` plus ``<out>_item.csv`` and ``<out>_style.csv``."""
    exp = interactions(sample, params, hyper)
    out = Path(out_path)
    if out.suffix == ".json":
        out = out.with_suffix("")
    out.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{out}.json").write_text(json.dumps(exp.to_json(), indent=1))
    _write_csv(f"{out}_item.csv", exp.item_matrix, exp.item_ids, exp.tokens)
    _write_csv(f"{out}_style.csv", exp.style_matrix,
               [f"outfit_style{c}" for c in range(len(exp.outfit_clusters))],
               [f"text_style{c}" for c in range(len(exp.text_clusters))])
    return exp
