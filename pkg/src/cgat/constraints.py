"""Margin constraints on attention scores and the training objective.

Two hinge losses act on the raw pairwise score ``phi`` of an attention head:

* structure: a one-hop neighbor ``j`` of anchor ``i`` that is not known to be of
  a different class must out-score any non-neighbor ``k`` by ``zeta_g``;
* class boundary: a same-class neighbor must out-score a different-class
  neighbor by ``zeta_b``.

Both are estimated on sampled triples ``(anchor, positive, negative)`` and
averaged over the batch. Non-neighbor negatives for the structure loss are drawn
either uniformly or in proportion to node importance, the column sums of the
layer's attention matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np

from . import autodiff as ad
from .attention import AttentionMatrix
from .autodiff import Tensor
from .graph import Graph

PairScore = Callable[[np.ndarray, np.ndarray], Tensor]


@dataclass(frozen=True)
class MarginConfig:
    zeta_g: float = 0.2
    zeta_b: float = 0.2
    lambda_g: float = 1.0
    lambda_b: float = 1.0
    negatives_per_anchor: int = 5
    positives_per_anchor: int = 1
    sampler: Literal["adaptive", "uniform"] = "adaptive"

    def __post_init__(self):
        if min(self.zeta_g, self.zeta_b, self.lambda_g, self.lambda_b) < 0:
            raise ValueError("margins and trade-off weights must be non-negative")
        if self.negatives_per_anchor < 1 or self.positives_per_anchor < 1:
            raise ValueError("sample counts must be at least 1")
        if self.sampler not in ("adaptive", "uniform"):
            raise ValueError(f"unknown sampler {self.sampler!r}")


@dataclass(frozen=True)
class TripleBatch:
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        for name in ("anchors", "positives", "negatives"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64).reshape(-1))
        if not (self.anchors.size == self.positives.size == self.negatives.size):
            raise ValueError("triple columns must have equal length")

    def __len__(self) -> int:
        return int(self.anchors.size)

    @classmethod
    def empty(cls) -> "TripleBatch":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z)


def _margin_loss(phi: PairScore, triples: TripleBatch, zeta: float) -> Tensor:
    if len(triples) == 0:
        return Tensor(0.0)
    pos = phi(triples.anchors, triples.positives)
    neg = phi(triples.anchors, triples.negatives)
    return ad.reduce_mean(ad.hinge(ad.add(ad.add(neg, -pos), zeta)))


def structure_margin_loss(phi: PairScore, triples: TripleBatch, zeta_g: float) -> Tensor:
    """mean of max(0, phi(i, k) + zeta_g - phi(i, j)) over (i, j, k) triples."""
    return _margin_loss(phi, triples, zeta_g)


def boundary_margin_loss(phi: PairScore, triples: TripleBatch, zeta_b: float) -> Tensor:
    """Same hinge with same-class positives and different-class negatives."""
    return _margin_loss(phi, triples, zeta_b)


def node_importance(attn: AttentionMatrix) -> np.ndarray:
    """Column sums of the attention matrix: how much each node feeds the others."""
    g = attn.graph
    return np.bincount(g.indices, weights=attn.weights, minlength=g.num_nodes)


# ------------------------------------------------------------------- sampling

def _exact_draw(weights: np.ndarray | None, anchor: int, g: Graph, count: int,
                rng: np.random.Generator) -> np.ndarray:
    banned = np.append(g.neighbors(anchor), anchor)
    cand = np.setdiff1d(np.arange(g.num_nodes), banned, assume_unique=False)
    if cand.size == 0:
        raise ValueError(f"node {anchor} has no non-neighbor to sample")
    if weights is not None:
        w = weights[cand]
        total = w.sum()
        if total > 0:
            return cand[np.searchsorted(np.cumsum(w), rng.random(count) * total, side="right").clip(0, cand.size - 1)]
    return cand[rng.integers(cand.size, size=count)]


def sample_negatives(anchors, g: Graph, count: int, rng: np.random.Generator,
                     weights: np.ndarray | None = None) -> np.ndarray:
    """``count`` non-neighbors per anchor, drawn with replacement.

    Probabilities are proportional to ``weights`` restricted to
    ``V \\ (N(anchor) + {anchor})``; ``weights=None`` means uniform. An anchor whose
    candidates all have zero weight falls back to uniform. Returns an array of
    shape ``(len(anchors), count)``.
    """
    anchors = np.asarray(anchors, dtype=np.int64).reshape(-1)
    n = g.num_nodes
    out = np.empty((anchors.size, count), dtype=np.int64)
    if count == 0 or anchors.size == 0:
        return out
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,) or (w < 0).any():
        raise ValueError("importance weights must be a non-negative vector of length N")
    total = w.sum()
    # weight falling on each node's own closed neighborhood
    nbr_mass = np.bincount(g.rows, weights=w[g.indices], minlength=n)
    nbr_mass = nbr_mass + np.where(g.has_arcs(np.arange(n), np.arange(n)), 0.0, w)
    free_mass = total - nbr_mass[anchors]
    exact = free_mass <= 0.05 * total
    for t in np.flatnonzero(exact):
        out[t] = _exact_draw(None if weights is None else w, int(anchors[t]), g, count, rng)

    cdf = np.cumsum(w)
    pending_rows = np.flatnonzero(~exact)
    todo_a = np.repeat(pending_rows, count)
    todo_c = np.tile(np.arange(count), pending_rows.size)
    for _ in range(200):
        if todo_a.size == 0:
            break
        pick = np.searchsorted(cdf, rng.random(todo_a.size) * total, side="right").clip(0, n - 1)
        a = anchors[todo_a]
        bad = (pick == a) | g.has_arcs(a, pick) | (w[pick] <= 0)
        good = ~bad
        out[todo_a[good], todo_c[good]] = pick[good]
        todo_a, todo_c = todo_a[bad], todo_c[bad]
    for t, c in zip(todo_a, todo_c):  # pathological leftovers
        out[t, c] = _exact_draw(w, int(anchors[t]), g, 1, rng)[0]
    return out


def adaptive_negative_sample(weights: np.ndarray, anchor: int, g: Graph, count: int, rng) -> np.ndarray:
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    return sample_negatives([anchor], g, count, rng, weights=weights)[0]


def uniform_negative_sample(anchor: int, g: Graph, count: int, rng) -> np.ndarray:
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    return sample_negatives([anchor], g, count, rng)[0]


# ------------------------------------------------------------------- triples

def arc_label_relation(g: Graph, labels: np.ndarray, known: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-arc flags (same class, different class), both False unless both ends are labeled.

    Multi-label nodes count as same-class when they share at least one label.
    """
    src, dst = g.rows, g.indices
    both = known[src] & known[dst]
    if labels.ndim == 1:
        same = labels[src] == labels[dst]
    else:
        same = (labels[src] * labels[dst]).sum(axis=1) > 0
    return both & same, both & ~same


def _pick_arcs(g: Graph, eligible: np.ndarray, rows: np.ndarray, per_row: int,
               rng: np.random.Generator) -> np.ndarray:
    """Uniformly chosen eligible arc targets, ``per_row`` per requested row."""
    arcs = np.flatnonzero(eligible)
    counts = np.bincount(g.rows[arcs], minlength=g.num_nodes)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    r = np.repeat(rows, per_row)
    offset = np.floor(rng.random(r.size) * counts[r]).astype(np.int64)
    return g.indices[arcs[starts[r] + offset]].reshape(rows.size, per_row)


def _cross(anchors, positives, negatives) -> TripleBatch:
    p, q = positives.shape[1], negatives.shape[1]
    a = np.repeat(anchors, p * q)
    pos = np.repeat(positives, q, axis=1).reshape(-1)
    neg = np.tile(negatives, (1, p)).reshape(-1)
    return TripleBatch(a, pos, neg)


def structure_triples(g: Graph, labels: np.ndarray, known: np.ndarray, config: MarginConfig,
                      rng: np.random.Generator, weights: np.ndarray | None = None) -> TripleBatch:
    """Triples for the structure loss.

    Every node with a non-neighbor is an anchor; positives come from its
    neighbors minus those known to carry a different label.
    """
    _, diff = arc_label_relation(g, labels, known)
    eligible = ~diff
    has_pos = np.bincount(g.rows[eligible], minlength=g.num_nodes) > 0
    closed_deg = np.diff(g.indptr) + ~g.has_arcs(np.arange(g.num_nodes), np.arange(g.num_nodes))
    anchors = np.flatnonzero(has_pos & (closed_deg < g.num_nodes))
    if anchors.size == 0:
        return TripleBatch.empty()
    positives = _pick_arcs(g, eligible, anchors, config.positives_per_anchor, rng)
    use_w = weights if config.sampler == "adaptive" else None
    negatives = sample_negatives(anchors, g, config.negatives_per_anchor, rng, weights=use_w)
    return _cross(anchors, positives, negatives)


def boundary_triples(g: Graph, labels: np.ndarray, known: np.ndarray, config: MarginConfig,
                     rng: np.random.Generator) -> TripleBatch:
    """Triples for the class-boundary loss over labeled anchors and labeled neighbors."""
    same, diff = arc_label_relation(g, labels, known)
    n_same = np.bincount(g.rows[same], minlength=g.num_nodes)
    n_diff = np.bincount(g.rows[diff], minlength=g.num_nodes)
    anchors = np.flatnonzero(known & (n_same > 0) & (n_diff > 0))
    if anchors.size == 0:
        return TripleBatch.empty()
    positives = _pick_arcs(g, same, anchors, config.positives_per_anchor, rng)
    negatives = _pick_arcs(g, diff, anchors, config.negatives_per_anchor, rng)
    return _cross(anchors, positives, negatives)


# -------------------------------------------------------------------- objective

def classification_loss(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Softmax cross-entropy (class ids) or sigmoid BCE (0/1 label matrix), averaged over ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("classification loss over an empty mask")
    n, c = logits.shape
    if labels.ndim == 1:
        pick = np.zeros((n, c))
        idx = np.flatnonzero(mask)
        pick[idx, labels[idx]] = 1.0 / count
        return ad.scale(ad.reduce_sum(ad.mul(ad.log_softmax(logits), pick)), -1.0)
    y = np.asarray(labels, dtype=np.float64)
    m = np.repeat(mask[:, None], c, axis=1) / (count * c)
    per_entry = ad.add(ad.softplus(logits), ad.mul(logits, -y))
    return ad.reduce_sum(ad.mul(per_entry, m))


def total_loss(l_c, l_g, l_b, config: MarginConfig):
    """``l_c + lambda_g * l_g + lambda_b * l_b``; zero-weight terms are left out."""
    total = l_c
    if config.lambda_g:
        total = total + config.lambda_g * l_g
    if config.lambda_b:
        total = total + config.lambda_b * l_b
    return total
