"""Graph attention layers.

One head of a layer computes a raw score for every arc of the (self-looped)
graph, normalizes the scores over each node's neighborhood, optionally drops
arcs at random (training only), optionally keeps only the ``k`` heaviest arcs
per row, and aggregates the linearly transformed neighbor features with the
resulting weights. Heads are merged by concatenation or by averaging.

Two score functions are available:

``gat``
    ``LeakyReLU(a . [W h_i || W h_j])``, split as ``a_src . W h_i + a_dst . W h_j``.
``mlp``
    ``LeakyReLU(omega . LeakyReLU(W_r [h_i || h_j]))`` with ``W_r`` of shape
    ``f' x 2 d_in`` split into a source and a destination half and
    ``f' = head_dim``. This one is defined for any node pair, which is what the
    margin losses need.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Mapping

import numpy as np
from scipy import sparse

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Graph

LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class LayerConfig:
    in_dim: int
    heads: int = 1
    head_dim: int = 8
    activation: Literal["elu", "identity"] = "elu"
    head_merge: Literal["concat", "mean"] = "concat"
    residual: bool = False
    attention_form: Literal["gat", "mlp"] = "gat"
    top_k: int | None = None
    attention_dropout: float = 0.0
    renormalize_top_k: bool = True

    def __post_init__(self):
        if self.heads < 1 or self.head_dim < 1 or self.in_dim < 1:
            raise ValueError("heads, head_dim and in_dim must be positive")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be >= 1 or None (unlimited)")
        if not 0.0 <= self.attention_dropout < 1.0:
            raise ValueError("attention_dropout must lie in [0, 1)")
        if self.activation not in ("elu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.head_merge not in ("concat", "mean"):
            raise ValueError(f"unknown head merge {self.head_merge!r}")
        if self.attention_form not in ("gat", "mlp"):
            raise ValueError(f"unknown attention form {self.attention_form!r}")

    @property
    def out_dim(self) -> int:
        return self.heads * self.head_dim if self.head_merge == "concat" else self.head_dim

    @property
    def needs_residual_projection(self) -> bool:
        return self.residual and self.in_dim != self.out_dim


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def head_param_names(prefix: str, head: int, form: str) -> dict[str, str]:
    base = f"{prefix}.head{head}"
    names = {"W": f"{base}.W"}
    if form == "gat":
        names.update(a_src=f"{base}.a_src", a_dst=f"{base}.a_dst")
    else:
        names.update(Wr_src=f"{base}.Wr_src", Wr_dst=f"{base}.Wr_dst", omega=f"{base}.omega")
    return names


def init_layer_params(config: LayerConfig, prefix: str, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Glorot-uniform matrices; the attention vectors (``a`` / ``omega``) start at zero."""
    params: dict[str, np.ndarray] = {}
    d_in, d_out = config.in_dim, config.head_dim
    for h in range(config.heads):
        names = head_param_names(prefix, h, config.attention_form)
        params[names["W"]] = glorot(rng, d_in, d_out)
        if config.attention_form == "gat":
            params[names["a_src"]] = np.zeros((d_out, 1))
            params[names["a_dst"]] = np.zeros((d_out, 1))
        else:
            wr = glorot(rng, 2 * d_in, d_out)
            params[names["Wr_src"]] = wr[:d_in].copy()
            params[names["Wr_dst"]] = wr[d_in:].copy()
            params[names["omega"]] = np.zeros((d_out, 1))
    if config.needs_residual_projection:
        params[f"{prefix}.res"] = glorot(rng, d_in, config.out_dim)
    return params


def project(h, w: Tensor) -> Tensor:
    """``h @ w`` where ``h`` is a Tensor or a constant scipy sparse matrix."""
    if sparse.issparse(h):
        return ad.sparse_dense_matmul(h, dense=w)
    return ad.matmul(h, w)


class ScoreFunction:
    """Raw attention score ``phi(i, j)`` for arbitrary node pairs.

    Node-level projections are computed once; scoring a batch of pairs is two
    gathers plus the per-pair head, so it is cheap to evaluate on arcs and on
    sampled non-arcs alike.
    """

    def __init__(self, form: str, src_proj: Tensor, dst_proj: Tensor, omega: Tensor | None = None,
                 slope: float = LEAKY_SLOPE):
        self.form = form
        self.src_proj = src_proj
        self.dst_proj = dst_proj
        self.omega = omega
        self.slope = slope

    def __call__(self, src, dst) -> Tensor:
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        z = ad.add(ad.gather_rows(self.src_proj, src), ad.gather_rows(self.dst_proj, dst))
        if self.form == "mlp":
            z = ad.matmul(ad.leaky_relu(z, self.slope), self.omega)
        return ad.leaky_relu(ad.reshape(z, (src.size,)), self.slope)


def score_function(h, head: Mapping[str, Tensor], form: str, wh: Tensor | None = None) -> ScoreFunction:
    """Build the score function of one head from its parameters.

    ``head`` maps the short names (``W``, ``a_src``, ... ) to tensors. ``wh`` may
    pass a precomputed ``h @ W`` for the ``gat`` form.
    """
    if form == "gat":
        if wh is None:
            wh = project(h, head["W"])
        return ScoreFunction("gat", ad.matmul(wh, head["a_src"]), ad.matmul(wh, head["a_dst"]))
    if form == "mlp":
        return ScoreFunction("mlp", project(h, head["Wr_src"]), project(h, head["Wr_dst"]), head["omega"])
    raise ValueError(f"unknown attention form {form!r}")


def attention_scores(h, head: Mapping[str, Tensor], g: Graph, form: str) -> Tensor:
    """One raw score per arc of ``g``, aligned with ``g.indices``."""
    if h.shape[0] != g.num_nodes:
        raise ad.ShapeError(f"attention_scores: {h.shape[0]} feature rows for {g.num_nodes} nodes")
    return score_function(h, head, form)(g.rows, g.indices)


@dataclass(frozen=True, eq=False)
class AttentionMatrix:
    """Row-stochastic weights on the arcs of ``graph`` (one per head per layer)."""

    graph: Graph
    values: Tensor

    @property
    def weights(self) -> np.ndarray:
        return self.values.value

    def row_sums(self) -> np.ndarray:
        return np.bincount(self.graph.rows, weights=self.weights, minlength=self.graph.num_nodes)

    def to_scipy(self) -> sparse.csr_matrix:
        return self.graph.to_scipy(self.weights)

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def detach(self) -> "AttentionMatrix":
        return AttentionMatrix(self.graph, self.values.detach())


def neighborhood_softmax(scores: Tensor, g: Graph) -> AttentionMatrix:
    n, rows = g.num_nodes, g.rows
    # the row max is a constant shift: it cancels in the ratio, so no gradient path is needed
    row_max = ad.segment_max(scores.detach(), rows, n)
    ex = ad.exp(ad.add(scores, -ad.gather_rows(row_max, rows).value))
    denom = ad.segment_sum(ex, rows, n)
    return AttentionMatrix(g, ad.div(ex, ad.gather_rows(denom, rows)))


def top_k_mask(attn: AttentionMatrix, k: int) -> np.ndarray:
    """Arcs that rank among the ``k`` largest weights of their row.

    Ties at the cutoff go to the lower neighbor id.
    """
    g = attn.graph
    order = np.lexsort((g.indices, -attn.weights, g.rows))
    rank = np.empty(g.num_arcs, dtype=np.int64)
    rank[order] = np.arange(g.num_arcs) - g.indptr[g.rows[order]]
    return rank < k


def top_k_select(attn: AttentionMatrix, k: int | None, renormalize: bool = True) -> AttentionMatrix:
    if k is None:
        return attn
    if k < 1:
        raise ValueError("k must be >= 1")
    keep = top_k_mask(attn, k)
    if keep.all():
        return attn
    g = attn.graph
    masked = ad.mul(attn.values, keep.astype(np.float64))
    if not renormalize:
        return AttentionMatrix(g, masked)
    denom = ad.segment_sum(masked, g.rows, g.num_nodes)
    return AttentionMatrix(g, ad.div(masked, ad.gather_rows(denom, g.rows)))


def attention_dropout(attn: AttentionMatrix, p: float, rng) -> AttentionMatrix:
    """Zero each weight with probability ``p`` and rescale survivors by ``1/(1-p)``.

    A row that loses every arc keeps its self-loop (or, lacking one, its first arc).
    """
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must lie in [0, 1)")
    if p == 0.0:
        return attn
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    g = attn.graph
    keep = rng.random(g.num_arcs) >= p
    alive = np.bincount(g.rows, weights=keep, minlength=g.num_nodes) > 0
    dead_rows = np.flatnonzero(~alive & (np.diff(g.indptr) > 0))
    if dead_rows.size:
        rescue = g.indptr[dead_rows].copy()
        loops = np.flatnonzero(g.self_loop_mask)
        loop_of = np.full(g.num_nodes, -1)
        loop_of[g.rows[loops]] = loops
        has_loop = loop_of[dead_rows] >= 0
        rescue[has_loop] = loop_of[dead_rows[has_loop]]
        keep[rescue] = True
    return AttentionMatrix(g, ad.mul(attn.values, keep / (1.0 - p)))


def activate(x: Tensor, activation: str) -> Tensor:
    if activation == "elu":
        return ad.elu(x)
    if activation == "identity":
        return x
    raise ValueError(f"unknown activation {activation!r}")


def aggregate(attn: AttentionMatrix, h, w: Tensor | None = None, activation: str = "identity") -> Tensor:
    """``activation(Attn @ (h W))``; with ``w=None`` ``h`` is taken as already transformed."""
    g = attn.graph
    hw = h if w is None else project(h, w)
    if hw.shape[0] != g.num_nodes:
        raise ad.ShapeError(f"aggregate: {hw.shape[0]} rows for {g.num_nodes} nodes")
    out = ad.sparse_dense_matmul(attn.values, g.rows, g.indices, g.num_nodes, hw)
    return activate(out, activation)


@dataclass
class LayerResult:
    output: Tensor
    attentions: list[AttentionMatrix]  # the weights actually used for aggregation
    scores: list[ScoreFunction]


def layer_forward(h, params: Mapping[str, Tensor], config: LayerConfig, g: Graph,
                  training: bool = False, rng=None, prefix: str = "layer0") -> LayerResult:
    n_rows = h.shape[0]
    if n_rows != g.num_nodes or h.shape[1] != config.in_dim:
        raise ad.ShapeError(f"layer_forward: input {h.shape} vs ({g.num_nodes}, {config.in_dim})")
    use_dropout = training and config.attention_dropout > 0.0
    if use_dropout and rng is None:
        raise ValueError("training with attention dropout needs an rng")
    head_out, attentions, scores = [], [], []
    for k in range(config.heads):
        names = head_param_names(prefix, k, config.attention_form)
        head = {short: params[full] for short, full in names.items()}
        wh = project(h, head["W"])
        phi = score_function(h, head, config.attention_form, wh=wh)
        attn = neighborhood_softmax(phi(g.rows, g.indices), g)
        if use_dropout:
            attn = attention_dropout(attn, config.attention_dropout, rng)
        attn = top_k_select(attn, config.top_k, config.renormalize_top_k)
        head_out.append(aggregate(attn, wh))
        attentions.append(attn)
        scores.append(phi)

    if config.head_merge == "concat":
        merged = head_out[0] if len(head_out) == 1 else ad.concat_columns(head_out)
    else:
        merged = head_out[0]
        for extra in head_out[1:]:
            merged = ad.add(merged, extra)
        if len(head_out) > 1:
            merged = ad.scale(merged, 1.0 / len(head_out))

    if config.residual:
        if config.needs_residual_projection:
            merged = ad.add(merged, project(h, params[f"{prefix}.res"]))
        else:
            skip = Tensor(h.toarray()) if sparse.issparse(h) else h
            merged = ad.add(merged, skip)
    return LayerResult(activate(merged, config.activation), attentions, scores)


def network_forward(x, params: Mapping[str, Tensor], configs: list[LayerConfig], g: Graph,
                    training: bool = False, rng=None) -> tuple[Tensor, list[LayerResult]]:
    """Run a stack of layers; parameters of layer ``l`` are prefixed ``layer{l}``."""
    h = x
    results = []
    for l, config in enumerate(configs):
        res = layer_forward(h, params, config, g, training=training, rng=rng, prefix=f"layer{l}")
        results.append(res)
        h = res.output
    return h, results
