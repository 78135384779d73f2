"""Style extraction: encode tokens, seed centroids greedily, refine with K-means.

K-means runs on plain arrays. Its assignments re-enter the graph as a
constant averaging matrix, so each centroid is a differentiable mean of the
encoded, normalized tokens it owns.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import numgraph as ng
from .encoders import transformer_layer_forward

log = logging.getLogger(__name__)


def cluster_count(n: int, k: float) -> int:
    """Number of style centroids for ``n`` tokens at ratio ``k``: max(floor(k*n), 1)."""
    if n < 1:
        raise ValueError(f"token count must be >= 1, got {n}")
    if not 0 < k <= 1:
        raise ValueError(f"ratio must lie in (0, 1], got {k}")
    # guard against k*n landing a hair below an integer (e.g. 12 * (1/3))
    return max(int(math.floor(k * n + 1e-9)), 1)


def _pairwise(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - y[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def greedy_init(x: np.ndarray, c: int) -> tuple[np.ndarray, np.ndarray]:
    """Pick ``c`` distinct rows of ``x`` as seeds; returns (seeds, row indices).

    The first seed maximizes its summed distance to all other rows; each
    further seed maximizes its distance to the nearest seed chosen so far.
    Ties go to the lowest row index.
    """
    x = np.asarray(x)
    n = x.shape[0]
    if not 1 <= c <= n:
        raise ValueError(f"cluster count {c} must lie in [1, {n}]")
    dist = _pairwise(x, x)
    chosen = [int(np.argmax(dist.sum(axis=1)))]
    nearest = dist[chosen[0]].copy()
    for _ in range(1, c):
        score = nearest.copy()
        score[chosen] = -np.inf
        nxt = int(np.argmax(score))
        if score[nxt] == 0:
            log.warning("greedy_init: duplicate points, seeding by lowest index (degenerate input)")
        chosen.append(nxt)
        nearest = np.minimum(nearest, dist[nxt])
    idx = np.array(chosen)
    return x[idx].copy(), idx


def random_init(x: np.ndarray, c: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """``c`` distinct rows chosen uniformly at random."""
    n = x.shape[0]
    if not 1 <= c <= n:
        raise ValueError(f"cluster count {c} must lie in [1, {n}]")
    idx = np.sort(rng.choice(n, size=c, replace=False))
    return np.asarray(x)[idx].copy(), idx


@dataclass
class StyleTokens:
    """Centroids over one token set plus the owner of each input token."""

    centroids: np.ndarray | ng.Node
    assignments: np.ndarray
    level: str = "outfit"
    iterations: int = 0
    history: list = field(default_factory=list)  # K-means objective per iteration

    @property
    def count(self) -> int:
        return int(self.centroids.shape[0])

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.count)


def _assign(x, centroids):
    return np.argmin(_pairwise(x, centroids), axis=1)


def _means(x, assign, c):
    out = np.zeros((c, x.shape[1]), dtype=x.dtype)
    for j in range(c):
        out[j] = x[assign == j].mean(axis=0)
    return out


def _repair(x, centroids, assign, c):
    sizes = np.bincount(assign, minlength=c)
    while (sizes == 0).any():
        empty = int(np.flatnonzero(sizes == 0)[0])
        own = np.sqrt(np.sum((x - centroids[assign]) ** 2, axis=1))
        own[sizes[assign] < 2] = -np.inf  # never empty another cluster
        far = int(np.argmax(own))
        sizes[assign[far]] -= 1
        assign[far] = empty
        sizes[empty] = 1
    return assign


def kmeans(x: np.ndarray, init: np.ndarray, max_iter: int = 100, tol: float = 1e-6,
           level: str = "outfit") -> StyleTokens:
    """Lloyd iterations from ``init``.

    Stops once the largest centroid move is below ``tol`` or after
    ``max_iter`` rounds. Clusters that go empty take the point farthest from
    its own centroid. Returned centroids are the means of the final
    assignment.
    """
    x = np.asarray(x)
    centroids = np.array(init, dtype=x.dtype)
    c = centroids.shape[0]
    assign = _repair(x, centroids, _assign(x, centroids), c)
    history = []
    iterations = 0
    for _ in range(max_iter):
        new = _means(x, assign, c)
        shift = float(np.max(np.sqrt(np.sum((new - centroids) ** 2, axis=1))))
        centroids = new
        history.append(float(np.sum((x - centroids[assign]) ** 2)))
        if shift < tol:
            break
        iterations += 1
        assign = _repair(x, centroids, _assign(x, centroids), c)
    return StyleTokens(_means(x, assign, c), assign, level, iterations, history)


def sample_rng(seed: int, sample_id) -> np.random.Generator:
    """Per-sample generator, stable across runs and batch orderings."""
    return np.random.default_rng([int(seed), zlib.crc32(str(sample_id).encode())])


def cluster_tokens(x: np.ndarray, k: float, greedy: bool = True, rng=None,
                   max_iter: int = 100, tol: float = 1e-6, level: str = "outfit") -> StyleTokens:
    """Seed and run K-means on already encoded, normalized rows."""
    c = cluster_count(x.shape[0], k)
    if greedy:
        init, _ = greedy_init(x, c)
    else:
        init, _ = random_init(x, c, rng if rng is not None else np.random.default_rng(0))
    return kmeans(x, init, max_iter, tol, level)


@dataclass
class StyleBatch:
    """Padded centroids for a batch: (B, C, D) node, (B, C) mask, per-sample tokens."""

    centroids: ng.Node
    mask: np.ndarray
    tokens: list[StyleTokens]
    encoded: ng.Node  # normalized encoder output (B, N, D)


def extract_styles(e: ng.Node, mask, enc_params: dict, k: float, heads: int = 8,
                   greedy: bool = True, seed: int = 0, ids=None, max_iter: int = 100,
                   tol: float = 1e-6, level: str = "outfit") -> StyleBatch:
    """Encode a padded (B, N, D) token batch and cluster each sample's active rows."""
    mask = np.asarray(mask, dtype=bool)
    enc = transformer_layer_forward(e, enc_params, mask, heads)
    normed = ng.row_l2_normalize(enc)
    values = normed.value
    b, n, _ = values.shape
    ids = range(b) if ids is None else ids
    tokens = []
    for row, sample_id in zip(range(b), ids):
        active = np.flatnonzero(mask[row])
        rng = None if greedy else sample_rng(seed, sample_id)
        tokens.append(cluster_tokens(values[row, active], k, greedy, rng, max_iter, tol, level))
    c_max = max(t.count for t in tokens)
    avg = np.zeros((b, c_max, n), dtype=values.dtype)
    cmask = np.zeros((b, c_max), dtype=bool)
    for row, tok in enumerate(tokens):
        active = np.flatnonzero(mask[row])
        sizes = tok.sizes()
        avg[row, tok.assignments, active] = 1.0 / sizes[tok.assignments]
        cmask[row, :tok.count] = True
    centroids = ng.matmul(ng.const(avg), normed)
    for row, tok in enumerate(tokens):
        tok.centroids = centroids.value[row, :tok.count]
    return StyleBatch(centroids, cmask, tokens, normed)


def style_tokens(e, enc_params: dict, k: float, mask=None, heads: int = 8, greedy: bool = True,
                 seed: int = 0, sample_id=0, level: str = "outfit") -> tuple[ng.Node, StyleTokens]:
    """Single token set version of :func:`extract_styles`; returns (centroid node, tokens)."""
    e = ng._as_node(e)
    n = e.shape[0]
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    batch = extract_styles(ng.reshape(e, (1,) + e.shape), mask[None, :], enc_params, k, heads,
                           greedy, seed, [sample_id], level=level)
    tok = batch.tokens[0]
    node = ng.reshape(batch.centroids, batch.centroids.shape[1:])
    return node, tok
