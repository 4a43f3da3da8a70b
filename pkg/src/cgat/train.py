"""Full-batch training, evaluation and multi-seed runs."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np
from scipy import sparse

from . import autodiff as ad
from .attention import LayerConfig, init_layer_params, network_forward
from .autodiff import Tensor
from .constraints import (MarginConfig, boundary_margin_loss, boundary_triples, classification_loss,
                          node_importance, structure_margin_loss, structure_triples, total_loss)
from .graph import Dataset, Graph, add_self_loops
from .seeding import DROPOUT, INIT, SAMPLING, make_rng

log = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run.

    ``hidden_dims`` and ``heads`` give the per-head width and head count of each
    hidden layer (an int applies to all of them); the output layer has
    ``output_heads`` heads of width ``num_classes`` averaged together.
    ``k=None`` disables top-k aggregation. ``dropout`` is attention dropout.
    """

    depth: int = 2
    hidden_dims: int | tuple[int, ...] = 32
    heads: int | tuple[int, ...] = 8
    output_heads: int = 1
    k: int | None = None
    margin: MarginConfig = field(default_factory=MarginConfig)
    learning_rate: float = 0.005
    l2_weight: float = 0.0005
    max_epochs: int = 1000
    early_stop_window: int = 100
    seed: int = 0
    dropout: float = 0.0
    attention_form: Literal["gat", "mlp"] = "mlp"
    residual: bool = False
    feature_norm: Literal["auto", "row", "none"] = "auto"

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if self.learning_rate <= 0 or self.l2_weight < 0:
            raise ValueError("learning rate must be positive and l2 non-negative")
        if self.max_epochs < 0 or self.early_stop_window < 1:
            raise ValueError("max_epochs must be >= 0 and early_stop_window >= 1")
        if isinstance(self.margin, dict):
            object.__setattr__(self, "margin", MarginConfig(**self.margin))
        for name in ("hidden_dims", "heads"):
            v = getattr(self, name)
            if isinstance(v, list):
                object.__setattr__(self, name, tuple(v))

    def per_hidden(self, name: str) -> tuple[int, ...]:
        v = getattr(self, name)
        n_hidden = self.depth - 1
        if isinstance(v, int):
            return (v,) * n_hidden
        if len(v) != n_hidden:
            raise ValueError(f"{name} lists {len(v)} values for {n_hidden} hidden layers")
        return tuple(v)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "margin" in d and isinstance(d["margin"], dict):
            d["margin"] = MarginConfig(**d["margin"])
        return cls(**d)


def gat_config(**overrides) -> TrainConfig:
    """Plain GAT: concatenation-form attention, no margin losses, full neighborhoods."""
    base = TrainConfig(attention_form="gat", k=None,
                       margin=MarginConfig(lambda_g=0.0, lambda_b=0.0, sampler="uniform"))
    return replace(base, **overrides)


def cgat_config(**overrides) -> TrainConfig:
    """Constrained GAT: MLP attention, both margin losses, top-4 aggregation."""
    return replace(TrainConfig(attention_form="mlp", k=4, margin=MarginConfig()), **overrides)


def build_layers(in_dim: int, num_classes: int, config: TrainConfig) -> list[LayerConfig]:
    layers = []
    d = in_dim
    for width, heads in zip(config.per_hidden("hidden_dims"), config.per_hidden("heads")):
        lc = LayerConfig(in_dim=d, heads=heads, head_dim=width, activation="elu", head_merge="concat",
                         residual=config.residual, attention_form=config.attention_form,
                         top_k=config.k, attention_dropout=config.dropout)
        layers.append(lc)
        d = lc.out_dim
    layers.append(LayerConfig(in_dim=d, heads=config.output_heads, head_dim=num_classes,
                              activation="identity", head_merge="mean", residual=config.residual,
                              attention_form=config.attention_form, top_k=config.k,
                              attention_dropout=config.dropout))
    return layers


def init_params(layers: list[LayerConfig], seed: int) -> dict[str, np.ndarray]:
    rng = make_rng(seed, INIT)
    params: dict[str, np.ndarray] = {}
    for l, lc in enumerate(layers):
        params.update(init_layer_params(lc, f"layer{l}", rng))
    return params


def prepare_features(features: np.ndarray, mode: str = "auto"):
    """Row-normalize non-negative features (``auto``) and go sparse when mostly zero."""
    x = np.asarray(features, dtype=np.float64)
    if mode == "row" or (mode == "auto" and (x >= 0).all()):
        s = x.sum(axis=1, keepdims=True)
        x = np.divide(x, s, out=np.zeros_like(x), where=s > 0)
    elif mode not in ("auto", "none", "row"):
        raise ValueError(f"unknown feature normalization {mode!r}")
    if np.count_nonzero(x) < 0.25 * x.size:
        return sparse.csr_matrix(x)
    return Tensor(x)


@dataclass
class Model:
    layers: list[LayerConfig]
    params: dict[str, np.ndarray]
    feature_norm: str = "auto"

    def forward(self, features, graph: Graph, training: bool = False, rng=None):
        x = features if (sparse.issparse(features) or isinstance(features, Tensor)) \
            else prepare_features(features, self.feature_norm)
        leaves = {k: Tensor(v) for k, v in self.params.items()}
        return network_forward(x, leaves, self.layers, add_self_loops(graph), training=training, rng=rng)

    def predict(self, dataset: Dataset, graph: Graph | None = None) -> np.ndarray:
        logits, _ = self.forward(dataset.features, graph if graph is not None else dataset.graph)
        return logits.value


# ------------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = ADAM_EPS

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState,
              lr: float, l2: float = 0.0):
    """One bias-corrected Adam update in place; ``l2 * param`` is added to each gradient."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient for parameter {name}")
        if l2:
            g = g + l2 * p
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# --------------------------------------------------------------------- metrics

def accuracy(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ValueError("accuracy over an empty split")
    return float((np.argmax(logits[idx], axis=1) == labels[idx]).mean())


def micro_f1(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ValueError("micro-F1 over an empty split")
    pred = logits[idx] > 0.0  # sigmoid(z) > 0.5
    true = labels[idx].astype(bool)
    tp = int((pred & true).sum())
    fp = int((pred & ~true).sum())
    fn = int((~pred & true).sum())
    return 2 * tp / (2 * tp + fp + fn) if tp else 0.0


def _np_classification_loss(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    idx = np.flatnonzero(mask)
    z = logits[idx]
    if labels.ndim == 1:
        z = z - z.max(axis=1, keepdims=True)
        lsm = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return float(-lsm[np.arange(idx.size), labels[idx]].mean())
    y = labels[idx]
    return float((np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z))) - y * z).mean())


@dataclass
class Metrics:
    split: str
    accuracy: float | None = None
    micro_f1: float | None = None
    l_c: float = 0.0
    l_g: float = 0.0
    l_b: float = 0.0

    @property
    def value(self) -> float:
        return self.accuracy if self.accuracy is not None else self.micro_f1


def score_logits(logits: np.ndarray, dataset: Dataset, split: str) -> Metrics:
    mask = dataset.mask(split)
    if not mask.any():
        raise ValueError(f"split {split!r} is empty")
    m = Metrics(split, l_c=_np_classification_loss(logits, dataset.labels, mask))
    if dataset.multi_label:
        m.micro_f1 = micro_f1(logits, dataset.labels, mask)
    else:
        m.accuracy = accuracy(logits, dataset.labels, mask)
    return m


def evaluate(model: Model, dataset: Dataset, split: str, graph: Graph | None = None) -> Metrics:
    """Inference-mode metrics on ``split``; ``graph`` overrides the dataset graph."""
    return score_logits(model.predict(dataset, graph), dataset, split)


# ---------------------------------------------------------------------- training

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    l_c: float
    l_g: float
    l_b: float
    train_metric: float
    val_metric: float
    val_loss: float


@dataclass
class TrainResult:
    model: Model
    history: list[EpochRecord]
    best_epoch: int
    best_val: float | None

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.history]


def margin_losses(results, graph: Graph, labels: np.ndarray, known: np.ndarray,
                  margin: MarginConfig, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    """Structure and boundary hinge losses on every layer's first head, summed over layers.

    Negative-sampling weights are the column sums of the same head's attention
    from this forward pass, detached from the gradient.
    """
    l_g: Tensor = Tensor(0.0)
    l_b: Tensor = Tensor(0.0)
    for res in results:
        phi = res.scores[0]
        if margin.lambda_g:
            w = node_importance(res.attentions[0]) if margin.sampler == "adaptive" else None
            trip = structure_triples(graph, labels, known, margin, rng, weights=w)
            l_g = ad.add(l_g, structure_margin_loss(phi, trip, margin.zeta_g))
        if margin.lambda_b:
            trip = boundary_triples(graph, labels, known, margin, rng)
            l_b = ad.add(l_b, boundary_margin_loss(phi, trip, margin.zeta_b))
    return l_g, l_b


def _improved(val: float, val_loss: float, best_val: float, best_loss: float) -> bool:
    return val > best_val or (val == best_val and val_loss < best_loss)


def train(dataset: Dataset, config: TrainConfig, graph: Graph | None = None) -> TrainResult:
    """Train on ``dataset`` (or on ``graph`` in place of its graph).

    Stops once validation accuracy / micro-F1 has not improved for
    ``early_stop_window`` epochs (equal metric with lower validation loss counts
    as an improvement) and returns the parameters of the best epoch.
    """
    if not dataset.train_mask.any() or not dataset.val_mask.any():
        raise ValueError("training needs non-empty train and validation masks")
    g = add_self_loops(graph if graph is not None else dataset.graph)
    x = prepare_features(dataset.features, config.feature_norm)
    layers = build_layers(dataset.features.shape[1], dataset.num_classes, config)
    params = init_params(layers, config.seed)
    state = OptimizerState.zeros_like(params)
    labels, train_mask = dataset.labels, dataset.train_mask

    history: list[EpochRecord] = []
    best_params = {k: v.copy() for k, v in params.items()}
    best_epoch, best_val, best_loss = -1, -math.inf, math.inf
    stale = 0
    for epoch in range(config.max_epochs):
        leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
        logits, results = network_forward(x, leaves, layers, g, training=True,
                                          rng=make_rng(config.seed, DROPOUT, epoch))
        l_c = classification_loss(logits, labels, train_mask)
        l_g, l_b = margin_losses(results, g, labels, train_mask, config.margin,
                                 make_rng(config.seed, SAMPLING, epoch))
        loss = total_loss(l_c, l_g, l_b, config.margin)
        if not np.isfinite(loss.value):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
        grads = ad.backward(loss, leaves)

        if config.dropout > 0:
            eval_logits, _ = network_forward(x, {k: Tensor(v) for k, v in params.items()}, layers, g)
            eval_logits = eval_logits.value
        else:
            eval_logits = logits.value
        tr = score_logits(eval_logits, dataset, "train")
        va = score_logits(eval_logits, dataset, "val")
        history.append(EpochRecord(epoch, float(loss.value), float(l_c.value), float(l_g.value),
                                   float(l_b.value), tr.value, va.value, va.l_c))
        if _improved(va.value, va.l_c, best_val, best_loss):
            best_epoch, best_val, best_loss = epoch, va.value, va.l_c
            best_params = {k: v.copy() for k, v in params.items()}
            stale = 0
        else:
            stale += 1
            if stale >= config.early_stop_window:
                break
        adam_step(params, grads, state, config.learning_rate, config.l2_weight)

    model = Model(layers, best_params if best_epoch >= 0 else params, config.feature_norm)
    log.debug("trained %d epochs, best epoch %d (val %.4f)", len(history), best_epoch, best_val)
    return TrainResult(model, history, best_epoch, None if best_epoch < 0 else best_val)


@dataclass
class RunSummary:
    metric: str
    values: list[float]
    results: list[TrainResult] = field(default_factory=list, repr=False)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values, ddof=1)) if len(self.values) > 1 else 0.0


def multi_run(dataset: Dataset, config: TrainConfig, runs: int = 10, train_graph: Graph | None = None,
              test_graph: Graph | None = None, keep_results: bool = False) -> RunSummary:
    """Train ``runs`` times with seeds ``config.seed + r``; summarize the test metric."""
    if runs < 1:
        raise ValueError("runs must be at least 1")
    values, kept = [], []
    for r in range(runs):
        res = train(dataset, replace(config, seed=config.seed + r), graph=train_graph)
        m = evaluate(res.model, dataset, "test", graph=test_graph)
        values.append(m.value)
        if keep_results:
            kept.append(res)
    name = "micro_f1" if dataset.multi_label else "accuracy"
    return RunSummary(name, values, kept)


# ------------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "cgat-checkpoint/1"


def save_checkpoint(model: Model, path) -> None:
    """JSON: layer configs in order, then parameters in creation order with shapes and row-major values."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "feature_norm": model.feature_norm,
        "layers": [asdict(lc) for lc in model.layers],
        "params": [{"name": k, "shape": list(v.shape), "values": v.reshape(-1).tolist()}
                   for k, v in model.params.items()],
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path) -> Model:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a checkpoint: format {doc.get('format')!r}")
    layers = [LayerConfig(**lc) for lc in doc["layers"]]
    params = {p["name"]: np.asarray(p["values"], dtype=np.float64).reshape(p["shape"]) for p in doc["params"]}
    return Model(layers, params, doc.get("feature_norm", "auto"))
