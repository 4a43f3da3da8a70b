"""Random-walk checks for attention-as-smoothing.

Dense numpy on small graphs. A transition matrix here is any non-negative
square matrix with unit row sums; attention matrices qualify, and so does
``D^-1 A`` of a self-looped graph.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import AttentionMatrix, neighborhood_softmax
from .autodiff import Tensor
from .graph import Graph, graph_properties

ROW_SUM_TOL = 1e-12


class InvariantError(ValueError):
    """A matrix or graph does not satisfy a precondition of the check it was given to."""

    def __init__(self, message: str, invariant: str | None = None):
        super().__init__(message)
        self.invariant = invariant


def _dense(p) -> np.ndarray:
    if isinstance(p, AttentionMatrix):
        return p.to_dense()
    return np.asarray(p, dtype=np.float64)


def check_transition_matrix(p, tol: float = ROW_SUM_TOL) -> np.ndarray:
    p = _dense(p)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise InvariantError(f"transition matrix must be square, got {p.shape}", "square")
    if (p < 0).any():
        raise InvariantError("transition matrix has negative entries", "non_negative")
    dev = np.abs(p.sum(axis=1) - 1.0).max(initial=0.0)
    if dev > tol:
        raise InvariantError(f"row sums deviate from 1 by {dev:.3e} (row-stochastic invariant)", "row_stochastic")
    return p


def random_walk_matrix(g: Graph) -> np.ndarray:
    """``P = D^-1 A`` with binary ``A`` (self-loops count once)."""
    deg = g.degree()
    if (deg == 0).any():
        raise InvariantError(f"node {int(np.flatnonzero(deg == 0)[0])} is isolated; add self-loops first")
    return g.to_dense() / deg[:, None]


def random_walk_laplacian(a) -> np.ndarray:
    """``L_rw = D^-1 (D - A)`` for a (weighted) adjacency or attention matrix."""
    a = _dense(a)
    d = a.sum(axis=1)
    if (d <= 0).any():
        raise InvariantError("zero row in adjacency; L_rw undefined")
    return np.eye(a.shape[0]) - a / d[:, None]


def laplacian_smoothing(x, lambda_s: float, g: Graph) -> np.ndarray:
    """``y_i = (1 - lambda) x_i + lambda * mean-over-neighbors``, i.e. ``(I - lambda L_rw) X``."""
    if not 0.0 < lambda_s <= 1.0:
        raise ValueError(f"smoothing strength must lie in (0, 1], got {lambda_s}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != g.num_nodes:
        raise ValueError(f"{x.shape[0]} feature rows for {g.num_nodes} nodes")
    p = random_walk_matrix(g)
    return (1.0 - lambda_s) * x + lambda_s * (p @ x)


def verify_prop1(attn, x) -> float:
    """Max abs gap between ``Attn X`` and ``(I - L_rw) X`` with ``L_rw`` built from ``Attn``."""
    a = check_transition_matrix(attn)
    x = np.asarray(x, dtype=np.float64)
    lrw = random_walk_laplacian(a)
    return float(np.abs(a @ x - (np.eye(a.shape[0]) - lrw) @ x).max(initial=0.0))


def stationary_distribution(g: Graph) -> np.ndarray:
    props = graph_properties(g)
    if not props.connected:
        raise InvariantError(f"graph is disconnected ({props.num_components} components)")
    if props.bipartite:
        raise InvariantError("graph is bipartite; the walk is periodic")
    deg = props.degrees.astype(np.float64)
    return deg / deg.sum()


@dataclass
class ConvergenceReport:
    converged: bool
    steps: int
    error: float  # max_i ||row_i - pi||_1 at the last step examined
    errors: list[float] = field(default_factory=list, repr=False)


def power_convergence(p, pi, tol: float = 1e-8, t_max: int = 10_000) -> ConvergenceReport:
    """Multiply by ``P`` until every row is within ``tol`` (L1) of ``pi``.

    ``steps`` counts multiplications applied to the input: an input that is
    already within tolerance reports 0, and ``P^(t+1)`` is examined at step ``t``.
    """
    p = check_transition_matrix(p)
    pi = np.asarray(pi, dtype=np.float64)
    q = p.copy()
    errors = []
    for t in range(t_max + 1):
        err = float(np.abs(q - pi[None, :]).sum(axis=1).max())
        errors.append(err)
        if err < tol:
            return ConvergenceReport(True, t, err, errors)
        if t < t_max:
            q = q @ p
    return ConvergenceReport(False, t_max, errors[-1], errors)


def row_dispersion(q: np.ndarray) -> float:
    """max over row pairs of the L1 distance between rows."""
    q = np.asarray(q, dtype=np.float64)
    best = 0.0
    for start in range(0, q.shape[0], 256):
        block = q[start:start + 256]
        best = max(best, float(np.abs(block[:, None, :] - q[None, :, :]).sum(axis=2).max()))
    return best


@dataclass
class SmoothnessReport:
    dispersions: list[float] = field(default_factory=list)
    within: float | None = None
    between: float | None = None
    ratio: float | None = None
    limit_matches_degree: bool | None = None
    notes: list[str] = field(default_factory=list)


def chain_collapse(ps, graph: Graph | None = None) -> SmoothnessReport:
    """Row dispersion of every prefix product ``P1 P2 ... Pt``.

    With ``graph`` given, each matrix must be supported on its arcs; otherwise
    all matrices must share the support of the first. When ``graph`` is given
    the final product is compared with the degree distribution and the outcome
    recorded (it need not match for heterogeneous chains).
    """
    mats = [check_transition_matrix(p) for p in ps]
    if not mats:
        return SmoothnessReport()
    allowed = graph.to_dense() > 0 if graph is not None else mats[0] > 0
    for t, m in enumerate(mats):
        if m.shape != allowed.shape or ((m > 0) & ~allowed).any():
            raise InvariantError(f"matrix {t} has support outside the reference pattern")
        if graph is None and not np.array_equal(m > 0, allowed):
            raise InvariantError(f"matrix {t} does not share the support of matrix 0")
    report = SmoothnessReport()
    q = np.eye(mats[0].shape[0])
    for m in mats:
        q = q @ m
        report.dispersions.append(row_dispersion(q))
    if graph is not None:
        deg = graph.degree() / graph.degree().sum()
        gap = float(np.abs(q - deg[None, :]).sum(axis=1).max())
        report.limit_matches_degree = gap < 1e-6
        if not report.limit_matches_degree:
            report.notes.append(f"limit rows differ from degree distribution by {gap:.3e} (L1)")
    return report


def lazy_walk(p) -> np.ndarray:
    p = _dense(p)
    return 0.5 * (np.eye(p.shape[0]) + p)


def delta_curve(p, pi, t_max: int) -> list[float]:
    """``Delta(t)`` for ``t = 1..t_max``: chi-square distance of ``P^t`` rows from ``pi``, maxed over rows."""
    p = check_transition_matrix(p)
    pi = np.asarray(pi, dtype=np.float64)
    if (pi <= 0).any():
        raise InvariantError("stationary distribution has a zero entry")
    out = []
    q = np.eye(p.shape[0])
    for _ in range(t_max):
        q = q @ p
        out.append(float(np.sqrt((((q - pi[None, :]) ** 2) / pi[None, :]).sum(axis=1)).max()))
    return out


def delta_t(p, pi, t: int) -> float:
    if t < 0:
        raise ValueError("t must be non-negative")
    if t == 0:
        pi = np.asarray(pi, dtype=np.float64)
        if (pi <= 0).any():
            raise InvariantError("stationary distribution has a zero entry")
        q = np.eye(len(pi))
        return float(np.sqrt((((q - pi[None, :]) ** 2) / pi[None, :]).sum(axis=1)).max())
    return delta_curve(p, pi, t)[-1]


def normalized_laplacian_spectrum(g: Graph) -> np.ndarray:
    """Eigenvalues of ``I - D^-1/2 A D^-1/2`` (same spectrum as ``L_rw``), ascending."""
    deg = g.degree().astype(np.float64)
    if (deg == 0).any():
        raise InvariantError("isolated node; normalized Laplacian undefined")
    inv = 1.0 / np.sqrt(deg)
    sym = np.eye(g.num_nodes) - inv[:, None] * g.to_dense() * inv[None, :]
    return np.linalg.eigvalsh(sym)


@dataclass
class MixingBound:
    t_star: int
    spectral_gap: float
    min_pi: float


def mixing_bound(g: Graph, c: float) -> MixingBound:
    """Steps after which the lazy walk is within ``e^-c`` of stationarity.

    ``t* = ceil((2 / lambda_1) * (-log min pi + 2c))`` with ``lambda_1`` the
    second-smallest normalized-Laplacian eigenvalue.
    """
    if c <= 0:
        raise ValueError("c must be positive")
    lam = normalized_laplacian_spectrum(g)
    gap = float(lam[1]) if lam.size > 1 else 1.0
    if gap <= 1e-10:
        raise InvariantError("spectral gap is zero: graph is disconnected")
    deg = g.degree().astype(np.float64)
    min_pi = float(deg.min() / deg.sum())
    t_star = math.ceil((2.0 / gap) * (-math.log(min_pi) + 2.0 * c))
    return MixingBound(t_star, gap, min_pi)


def oversmoothing_metric(features, labels) -> SmoothnessReport:
    """Mean pairwise Euclidean distance within and between classes, and their ratio."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if y.ndim != 1:
        raise ValueError("oversmoothing metric needs single-label class ids")
    n = x.shape[0]
    within_sum = between_sum = 0.0
    within_n = between_n = 0
    sq = (x ** 2).sum(axis=1)
    for start in range(0, n, 512):
        xb = x[start:start + 512]
        d2 = sq[start:start + 512, None] + sq[None, :] - 2.0 * xb @ x.T
        d = np.sqrt(np.maximum(d2, 0.0))
        rows = np.arange(start, start + xb.shape[0])
        upper = rows[:, None] < np.arange(n)[None, :]
        same = y[rows][:, None] == y[None, :]
        within_sum += d[upper & same].sum()
        within_n += int((upper & same).sum())
        between_sum += d[upper & ~same].sum()
        between_n += int((upper & ~same).sum())
    report = SmoothnessReport()
    report.within = within_sum / within_n if within_n else 0.0
    if between_n:
        report.between = between_sum / between_n
        report.ratio = report.within / report.between if report.between > 0 else None
    else:
        report.notes.append("single class: between-class distance undefined")
    return report


def write_curve_csv(path, header: list[str], rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.12g}" if isinstance(v, float) else v for v in row])


def random_attention(g: Graph, rng: np.random.Generator, scale: float = 1.0) -> AttentionMatrix:
    """Neighborhood softmax of Gaussian scores: a row-stochastic matrix supported on ``g``."""
    return neighborhood_softmax(Tensor(scale * rng.standard_normal(g.num_arcs)), g)
