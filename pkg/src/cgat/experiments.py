"""Experiment suites: classification, ablation, robustness, depth, k sweep and the spectral oracle.

Each suite returns an :class:`ExperimentResult`; :func:`write_result` turns it
into ``<name>.csv`` (plus any curve files) and a ``<name>.json`` sidecar with
the resolved spec and training configs. Output depends only on the spec, so
re-running with the same spec rewrites identical bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .constraints import MarginConfig
from .graph import (Dataset, Graph, PerturbationSpec, add_self_loops, generate_sbm, load_dataset, perturb_edges,
                    random_connected_graph)
from .seeding import PERTURB, make_rng
from .spectral import (InvariantError, chain_collapse, check_transition_matrix, delta_curve, lazy_walk,
                       mixing_bound, power_convergence, random_attention, random_walk_matrix,
                       stationary_distribution, verify_prop1, write_curve_csv)
from .train import RunSummary, TrainConfig, cgat_config, evaluate, gat_config, train

EXPERIMENTS = ("classify", "ablation", "robustness", "depth", "ksweep", "oracle")
PROTOCOLS = ("test_add", "train_drop", "train_add")
MODELS = {"gat": gat_config, "cgat": cgat_config}

# sparse noisy SBM: features alone are ambiguous, the block structure resolves them
DEFAULT_SBM = {"classes": 3, "nodes_per_class": 100, "p_in": 0.06, "p_out": 0.003,
               "feature_dim": 8, "feature_shift": 0.5, "feature_noise": 1.0}


@dataclass
class ExperimentSpec:
    experiment: str
    dataset: str | None = None
    sbm: dict | None = None
    overrides: dict = field(default_factory=dict)
    gat: dict = field(default_factory=dict)
    cgat: dict = field(default_factory=dict)
    runs: int = 10
    seed: int = 0
    ratios: list = field(default_factory=lambda: [0.0, 0.1, 0.3, 0.5])
    protocols: list = field(default_factory=lambda: list(PROTOCOLS))
    depths: list = field(default_factory=lambda: [2, 4, 6, 8])
    ks: list = field(default_factory=lambda: [1, 2, 4, 6, 8, 10, 20])
    noise_ratio: float = 0.1
    out: str = "results"

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}; choose from {', '.join(EXPERIMENTS)}")
        if self.runs < 1:
            raise ValueError("runs must be at least 1")
        sweep = {"robustness": "ratios", "depth": "depths", "ksweep": "ks"}.get(self.experiment)
        if sweep and not getattr(self, sweep):
            raise ValueError(f"{self.experiment} needs a non-empty {sweep} list")
        bad = set(self.protocols) - set(PROTOCOLS)
        if bad:
            raise ValueError(f"unknown robustness protocol(s) {sorted(bad)}")
        if self.dataset is not None and self.sbm is not None:
            raise ValueError("give either a dataset path or an SBM spec, not both")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment spec field(s): {sorted(unknown)}")
        return cls(**d)

    def load_data(self) -> Dataset:
        if self.dataset is not None:
            return load_dataset(self.dataset)
        params = dict(DEFAULT_SBM)
        params.update(self.sbm or {})
        params.setdefault("seed", self.seed)
        return generate_sbm(**params)

    def model_config(self, model: str, **extra) -> TrainConfig:
        if model not in MODELS:
            raise ValueError(f"unknown model {model!r}")
        cfg = MODELS[model](seed=self.seed)
        for d in (self.overrides, getattr(self, model), extra):
            cfg = apply_overrides(cfg, d)
        return cfg


def apply_overrides(cfg: TrainConfig, d: dict) -> TrainConfig:
    """``replace`` with partial ``margin`` dicts merged into the existing margin config."""
    d = dict(d)
    if "margin" in d:
        m = d.pop("margin")
        margin = m if isinstance(m, MarginConfig) else MarginConfig(**{**asdict(cfg.margin), **m})
        cfg = replace(cfg, margin=margin)
    unknown = set(d) - {f.name for f in fields(TrainConfig)}
    if unknown:
        raise ValueError(f"unknown training option(s): {sorted(unknown)}")
    return replace(cfg, **d) if d else cfg


@dataclass
class ExperimentResult:
    name: str
    header: list[str]
    rows: list[list]
    curves: dict[str, tuple[list[str], list[list]]] = field(default_factory=dict)
    configs: dict[str, dict] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    passed: bool = True


def write_result(result: ExperimentResult, spec: ExperimentSpec, out_dir=None) -> list[Path]:
    out = Path(out_dir if out_dir is not None else spec.out)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / f"{result.name}.csv"]
    write_curve_csv(written[0], result.header, result.rows)
    for fname, (header, rows) in sorted(result.curves.items()):
        written.append(out / fname)
        write_curve_csv(written[-1], header, rows)
    sidecar = {
        "experiment": result.name,
        "spec": {k: v for k, v in asdict(spec).items() if k != "out"},  # location-independent
        "configs": result.configs,
        "summary": result.summary,
        "passed": result.passed,
        "files": [p.name for p in written],
    }
    side = out / f"{result.name}.json"
    side.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return written + [side]


def _summary(values) -> tuple[float, float]:
    s = RunSummary("", list(values))
    return s.mean, s.std


def _metric_name(ds: Dataset) -> str:
    return "micro_f1" if ds.multi_label else "accuracy"


def _perturbed(g: Graph, mode: str, ratio: float, seed: int) -> Graph:
    return perturb_edges(g, PerturbationSpec(mode, ratio, seed))


def _train_run(ds: Dataset, cfg: TrainConfig, run: int, graph: Graph | None = None):
    return train(ds, replace(cfg, seed=cfg.seed + run), graph=graph)


# ----------------------------------------------------------------- classification

def run_classify(spec: ExperimentSpec) -> ExperimentResult:
    ds = spec.load_data()
    rows, configs = [], {}
    for model in MODELS:
        cfg = spec.model_config(model)
        configs[model] = cfg.to_dict()
        vals = [evaluate(_train_run(ds, cfg, r).model, ds, "test").value for r in range(spec.runs)]
        rows.append([ds.name, model, _metric_name(ds), *_summary(vals), spec.runs])
    return ExperimentResult("classify", ["dataset", "model", "metric", "mean", "std", "runs"], rows, configs=configs)


ABLATIONS = (
    ("full", {}),
    ("no_structure_loss", {"margin": {"lambda_g": 0.0}}),
    ("no_boundary_loss", {"margin": {"lambda_b": 0.0}}),
    ("no_top_k", {"k": None}),
    ("uniform_negatives", {"margin": {"sampler": "uniform"}}),
)


def run_ablation(spec: ExperimentSpec) -> ExperimentResult:
    ds = spec.load_data()
    rows, configs = [], {}
    for variant, change in ABLATIONS:
        cfg = spec.model_config("cgat", **change)
        configs[variant] = cfg.to_dict()
        vals = [evaluate(_train_run(ds, cfg, r).model, ds, "test").value for r in range(spec.runs)]
        rows.append([variant, _metric_name(ds), *_summary(vals), spec.runs])
    return ExperimentResult("ablation", ["variant", "metric", "mean", "std", "runs"], rows, configs=configs)


# --------------------------------------------------------------------- robustness

def robustness_values(ds: Dataset, cfg: TrainConfig, protocol: str, ratios, runs: int,
                      seed: int) -> dict[float, list[float]]:
    """Test metric per ratio and run. Run ``r`` perturbs with seed ``seed + r``."""
    vals: dict[float, list[float]] = {float(q): [] for q in ratios}
    for r in range(runs):
        if protocol == "test_add":
            model = _train_run(ds, cfg, r).model
            for q in ratios:
                g = _perturbed(ds.graph, "add", q, seed + r)
                vals[float(q)].append(evaluate(model, ds, "test", graph=g).value)
        else:
            mode = "drop" if protocol == "train_drop" else "add"
            for q in ratios:
                g = _perturbed(ds.graph, mode, q, seed + r)
                vals[float(q)].append(evaluate(_train_run(ds, cfg, r, g).model, ds, "test").value)
    return vals


def run_robustness(spec: ExperimentSpec) -> ExperimentResult:
    ds = spec.load_data()
    rows, configs, drops = [], {}, {}
    for protocol in spec.protocols:
        for model in MODELS:
            cfg = spec.model_config(model)
            configs[model] = cfg.to_dict()
            vals = robustness_values(ds, cfg, protocol, spec.ratios, spec.runs, spec.seed)
            for q in spec.ratios:
                rows.append([protocol, float(q), model, *_summary(vals[float(q)])])
            lo, hi = float(min(spec.ratios)), float(max(spec.ratios))
            drops[f"{protocol}/{model}"] = float(np.mean(vals[lo]) - np.mean(vals[hi]))
    return ExperimentResult("robustness", ["protocol", "ratio", "model", "mean", "std"], rows,
                            configs=configs, summary={"drop_first_to_last_ratio": drops})


# -------------------------------------------------------------------------- depth

def run_depth(spec: ExperimentSpec) -> ExperimentResult:
    ds = spec.load_data()
    rows, curve_rows, configs = [], [], {}
    for depth in spec.depths:
        for model in MODELS:
            cfg = spec.model_config(model, depth=int(depth))
            configs[f"{model}/depth{depth}"] = cfg.to_dict()
            vals = []
            for r in range(spec.runs):
                res = _train_run(ds, cfg, r)
                vals.append(evaluate(res.model, ds, "test").value)
                for h in res.history:
                    curve_rows.append([model, int(depth), r, h.epoch, h.loss, h.l_c,
                                       1.0 - h.train_metric, 1.0 - h.val_metric])
            rows.append([int(depth), model, *_summary(vals)])
    curves = {"depth_curves.csv": (["model", "depth", "run", "epoch", "loss", "classification_loss",
                                    "train_error", "val_error"], curve_rows)}
    return ExperimentResult("depth", ["depth", "model", "mean", "std"], rows, curves=curves, configs=configs)


# ------------------------------------------------------------------------ k sweep

def run_k_sweep(spec: ExperimentSpec) -> ExperimentResult:
    """C-GAT per k on the clean graph and on a graph with ``noise_ratio`` added edges."""
    ds = spec.load_data()
    rows, configs, peaks = [], {}, {}
    for graph_name in ("clean", "noisy"):
        means = {}
        for k in spec.ks:
            cfg = spec.model_config("cgat", k=int(k))
            configs[f"k{k}"] = cfg.to_dict()
            vals = []
            for r in range(spec.runs):
                g = ds.graph if graph_name == "clean" else _perturbed(ds.graph, "add", spec.noise_ratio, spec.seed + r)
                vals.append(evaluate(_train_run(ds, cfg, r, g).model, ds, "test", graph=g).value)
            mean, std = _summary(vals)
            means[int(k)] = mean
            rows.append([graph_name, int(k), mean, std])
        peaks[graph_name] = max(means, key=lambda k: (means[k], -k))
    return ExperimentResult("ksweep", ["graph", "k", "mean", "std"], rows, configs=configs,
                            summary={"peak_k": peaks})


# ------------------------------------------------------------------------- oracle

def oracle_graphs(seed: int) -> dict[str, Graph]:
    """Small connected, self-looped graphs used by the oracle suite."""
    path = Graph.from_edges(10, [(i, i + 1) for i in range(9)], self_loops=True)
    k4 = Graph.from_edges(4, [(i, j) for i in range(4) for j in range(i + 1, 4)], self_loops=True)
    return {
        "complete4": k4,
        "path10": path,
        "random10": random_connected_graph(10, 0.2, make_rng(seed, PERTURB, 10), self_loops=True),
        "random20": random_connected_graph(20, 0.15, make_rng(seed, PERTURB, 20), self_loops=True),
    }


CHAIN_LENGTH = 200  # long enough for the 10-path to mix


def chain_collapse_trials(rng: np.random.Generator, trials: int = 100, length: int = 20,
                          extra_p: float = 0.4) -> float:
    """Fraction of random chains whose row dispersion at ``length`` is below 1% of its first value.

    Graphs have 5 to 20 nodes: a random spanning tree, ``extra_p`` extra edges
    and self-loops.
    """
    hits = 0
    for _ in range(trials):
        g = random_connected_graph(int(rng.integers(5, 21)), extra_p, rng, self_loops=True)
        d = chain_collapse([random_attention(g, rng) for _ in range(length)], graph=g).dispersions
        hits += d[-1] < 0.01 * d[0]
    return hits / trials


def _trained_attentions(seed: int):
    """Attention matrices of a briefly trained C-GAT on a small SBM."""
    ds = generate_sbm(3, 10, 0.6, 0.05, 4, 2.0, seed=seed)
    cfg = cgat_config(seed=seed, hidden_dims=4, heads=2, max_epochs=20, k=3)
    model = train(ds, cfg).model
    _, results = model.forward(ds.features, ds.graph)
    return add_self_loops(ds.graph), [a for res in results for a in res.attentions]


def run_oracle(spec: ExperimentSpec, inject=None) -> ExperimentResult:
    """Spectral checks on bundled graphs and on trained attention matrices.

    ``inject`` adds an extra matrix (e.g. a deliberately broken one) to the
    Laplacian-smoothing identity check.
    """
    rng = make_rng(spec.seed, PERTURB, 0)
    rows: list[list] = []
    curves: dict[str, tuple[list[str], list[list]]] = {}

    def record(check, subject, value, threshold, ok):
        rows.append([check, subject, float(value), float(threshold), bool(ok)])

    graphs = oracle_graphs(spec.seed)
    for name, g in graphs.items():
        x = rng.standard_normal((g.num_nodes, 3))
        attn = random_attention(g, rng)
        record("laplacian_smoothing_identity", name, verify_prop1(attn, x), 1e-12, verify_prop1(attn, x) < 1e-12)

        p = random_walk_matrix(g)
        pi = stationary_distribution(g)
        conv = power_convergence(p, pi, tol=1e-8, t_max=10_000)
        record("stationary_convergence", name, conv.error, 1e-8, conv.converged)

        chain = chain_collapse([random_attention(g, rng) for _ in range(CHAIN_LENGTH)], graph=g)
        ratio = chain.dispersions[-1] / chain.dispersions[0] if chain.dispersions[0] > 0 else 0.0
        record("chain_collapse_ratio", name, ratio, 0.01, ratio < 0.01)

        lazy = lazy_walk(p)
        t_max = 0
        for c in (0.5, 1.0, 2.0):
            bound = mixing_bound(g, c)
            t_max = max(t_max, bound.t_star)
            d = delta_curve(lazy, pi, bound.t_star)[-1]
            record(f"mixing_bound_c{c:g}", name, d, math.exp(-c), d <= math.exp(-c))
        curves[f"delta_{name}.csv"] = (["t", "delta"], [[t + 1, v] for t, v in enumerate(delta_curve(lazy, pi, t_max))])

    frac = chain_collapse_trials(rng)
    record("chain_collapse_trials", "random_n5-20", frac, 0.95, frac >= 0.95)

    g_tr, attns = _trained_attentions(spec.seed)
    x = rng.standard_normal((g_tr.num_nodes, 3))
    for i, a in enumerate(attns):
        try:
            dev = verify_prop1(a, x)
            record("trained_attention_identity", f"head{i}", dev, 1e-12, dev < 1e-12)
        except InvariantError:
            record("trained_attention_identity", f"head{i}", math.nan, 1e-12, False)

    if inject is not None:
        try:
            check_transition_matrix(inject)
            dev = verify_prop1(inject, rng.standard_normal((np.shape(inject)[0], 3)))
            record("injected_matrix", "row_stochastic", dev, 1e-12, dev < 1e-12)
        except InvariantError as err:
            record("injected_matrix", err.invariant or str(err), math.nan, 1e-12, False)

    passed = all(r[-1] for r in rows)
    return ExperimentResult("oracle", ["check", "subject", "value", "threshold", "passed"], rows,
                            curves=curves, summary={"checks": len(rows), "failed": sum(not r[-1] for r in rows)},
                            passed=passed)


RUNNERS = {
    "classify": run_classify,
    "ablation": run_ablation,
    "robustness": run_robustness,
    "depth": run_depth,
    "ksweep": run_k_sweep,
    "oracle": run_oracle,
}


def run_experiment(spec: ExperimentSpec, **kwargs) -> ExperimentResult:
    return RUNNERS[spec.experiment](spec, **kwargs)
