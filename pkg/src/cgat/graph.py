"""Graphs, datasets, synthetic generators and edge perturbation.

A :class:`Graph` is an immutable undirected graph in CSR form: every
undirected edge ``{i, j}`` is stored as the two arcs ``(i, j)`` and ``(j, i)``,
a self-loop as the single arc ``(i, i)``. Neighbor lists are sorted and
duplicate free, so an arc can be addressed by its position in ``indices``.

Dataset files are JSON (optionally gzip-compressed) documents::

    {
      "name": "cora",                     # optional
      "nodes": 2708,                      # node count N
      "edges": [[0, 633], [0, 1862], ...],  # undirected pairs, ids in [0, N)
      "features": [[0, 1, ...], ...],     # N rows of d values
      "labels": [3, 4, ...],              # class ids, or N rows of 0/1 (multi-label)
      "num_classes": 7,                   # optional, single-label only
      "masks": {"train": [...], "val": [...], "test": [...]},  # node-id lists
      "graph_index": [0, 0, 1, ...]       # optional, for files holding several graphs
    }

Edges listed in one direction only are symmetrized on load.
"""

from __future__ import annotations

import gzip
import json
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Literal

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .seeding import PERTURB, SBM, SPLIT, make_rng


class DatasetError(ValueError):
    """Raised when a dataset file or in-memory dataset violates its contract."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    num_nodes: int
    indptr: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "indptr", _readonly(np.asarray(self.indptr, dtype=np.int64)))
        object.__setattr__(self, "indices", _readonly(np.asarray(self.indices, dtype=np.int64)))
        if self.indptr.shape != (self.num_nodes + 1,) or self.indptr[-1] != self.indices.size:
            raise ValueError("indptr does not match num_nodes / arc count")

    @classmethod
    def from_edges(cls, num_nodes: int, edges, self_loops: bool = False) -> "Graph":
        """Build a graph from a sequence of (u, v) pairs; direction is ignored."""
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= num_nodes):
            raise DatasetError(f"edge endpoint outside [0, {num_nodes})")
        u, v = e[:, 0], e[:, 1]
        src = np.concatenate([u, v])
        dst = np.concatenate([v, u])
        if self_loops:
            loop = np.arange(num_nodes, dtype=np.int64)
            src = np.concatenate([src, loop])
            dst = np.concatenate([dst, loop])
        return cls._from_arcs(num_nodes, src, dst)

    @classmethod
    def _from_arcs(cls, num_nodes: int, src: np.ndarray, dst: np.ndarray) -> "Graph":
        keys = np.unique(src * num_nodes + dst)
        rows, cols = np.divmod(keys, num_nodes)
        indptr = np.zeros(num_nodes + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=num_nodes), out=indptr[1:])
        return cls(num_nodes, indptr, cols)

    @property
    def num_arcs(self) -> int:
        return int(self.indices.size)

    @cached_property
    def rows(self) -> np.ndarray:
        """Source node of every arc, aligned with ``indices``."""
        return _readonly(np.repeat(np.arange(self.num_nodes, dtype=np.int64), np.diff(self.indptr)))

    @cached_property
    def arc_keys(self) -> np.ndarray:
        """Sorted ``i * N + j`` codes of all arcs, for vectorized membership tests."""
        return _readonly(self.rows * self.num_nodes + self.indices)

    @cached_property
    def self_loop_mask(self) -> np.ndarray:
        return _readonly(self.rows == self.indices)

    @property
    def num_self_loops(self) -> int:
        return int(self.self_loop_mask.sum())

    @property
    def num_edges(self) -> int:
        """Undirected edges, self-loops excluded."""
        return (self.num_arcs - self.num_self_loops) // 2

    @property
    def has_self_loops(self) -> bool:
        return self.num_self_loops == self.num_nodes

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    def has_arcs(self, src, dst) -> np.ndarray:
        """Vectorized ``(src[t], dst[t]) in arcs``."""
        keys = np.asarray(src, dtype=np.int64) * self.num_nodes + np.asarray(dst, dtype=np.int64)
        pos = np.searchsorted(self.arc_keys, keys)
        pos = np.minimum(pos, max(self.num_arcs - 1, 0))
        if self.num_arcs == 0:
            return np.zeros(keys.shape, dtype=bool)
        return self.arc_keys[pos] == keys

    def edge_list(self) -> np.ndarray:
        """Undirected non-self-loop edges as (u, v) rows with u < v."""
        keep = self.rows < self.indices
        return np.stack([self.rows[keep], self.indices[keep]], axis=1)

    def to_scipy(self, values=None) -> sparse.csr_matrix:
        data = np.ones(self.num_arcs) if values is None else np.asarray(values, dtype=np.float64)
        return sparse.csr_matrix((data, self.indices, self.indptr), shape=(self.num_nodes, self.num_nodes))

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def without_self_loops(self) -> "Graph":
        keep = ~self.self_loop_mask
        return Graph._from_arcs(self.num_nodes, self.rows[keep], self.indices[keep])

    def permute(self, perm) -> "Graph":
        """Relabel node ``i`` as ``perm[i]``."""
        perm = np.asarray(perm, dtype=np.int64)
        return Graph._from_arcs(self.num_nodes, perm[self.rows], perm[self.indices])

    def __eq__(self, other) -> bool:
        return (isinstance(other, Graph) and self.num_nodes == other.num_nodes
                and np.array_equal(self.indptr, other.indptr)
                and np.array_equal(self.indices, other.indices))

    def __repr__(self) -> str:
        return (f"Graph(num_nodes={self.num_nodes}, num_edges={self.num_edges}, "
                f"self_loops={self.num_self_loops})")


def add_self_loops(g: Graph) -> Graph:
    if g.has_self_loops:
        return g
    loop = np.arange(g.num_nodes, dtype=np.int64)
    return Graph._from_arcs(g.num_nodes, np.concatenate([g.rows, loop]), np.concatenate([g.indices, loop]))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Graph plus node features, labels and disjoint train/val/test masks.

    ``labels`` is an int vector of class ids (single-label) or an ``N x L``
    0/1 matrix (multi-label).
    """

    graph: Graph
    features: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    num_classes: int = 0
    name: str = ""
    graph_index: np.ndarray | None = None

    def __post_init__(self):
        n = self.graph.num_nodes
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != n:
            raise DatasetError(f"features must have {n} rows, got shape {feats.shape}")
        labels = np.asarray(self.labels)
        if labels.ndim == 1:
            labels = labels.astype(np.int64)
            if labels.shape[0] != n:
                raise DatasetError(f"expected {n} labels, got {labels.shape[0]}")
            num_classes = self.num_classes or (int(labels.max()) + 1 if n else 0)
            if n and (labels.min() < 0 or labels.max() >= num_classes):
                raise DatasetError(f"label out of range [0, {num_classes})")
        elif labels.ndim == 2:
            if labels.shape[0] != n:
                raise DatasetError(f"expected {n} label rows, got {labels.shape[0]}")
            if not np.isin(labels, (0, 1)).all():
                raise DatasetError("multi-label entries must be 0 or 1")
            labels = labels.astype(np.int64)
            num_classes = labels.shape[1]
        else:
            raise DatasetError("labels must be a vector or a matrix")
        masks = [np.asarray(m, dtype=bool) for m in (self.train_mask, self.val_mask, self.test_mask)]
        for m in masks:
            if m.shape != (n,):
                raise DatasetError(f"mask must have length {n}")
        if (masks[0] & masks[1]).any() or (masks[0] & masks[2]).any() or (masks[1] & masks[2]).any():
            raise DatasetError("train/val/test masks overlap")
        object.__setattr__(self, "features", _readonly(feats))
        object.__setattr__(self, "labels", _readonly(labels))
        object.__setattr__(self, "num_classes", int(num_classes))
        for name, m in zip(("train_mask", "val_mask", "test_mask"), masks):
            object.__setattr__(self, name, _readonly(m))

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    @property
    def multi_label(self) -> bool:
        return self.labels.ndim == 2

    def mask(self, split: str) -> np.ndarray:
        try:
            return {"train": self.train_mask, "val": self.val_mask, "test": self.test_mask}[split]
        except KeyError:
            raise ValueError(f"unknown split {split!r}") from None

    def with_graph(self, graph: Graph) -> "Dataset":
        if graph.num_nodes != self.num_nodes:
            raise DatasetError("replacement graph has a different node count")
        return Dataset(graph, self.features, self.labels, self.train_mask, self.val_mask,
                       self.test_mask, self.num_classes, self.name, self.graph_index)


def _open_text(path: Path, mode: str):
    if path.suffix == ".gz":
        return gzip.open(path, mode + "t", encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def load_dataset(path, format: str = "edge-list-json") -> Dataset:
    if format != "edge-list-json":
        raise ValueError(f"unsupported dataset format {format!r}")
    path = Path(path)
    try:
        with _open_text(path, "r") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError, EOFError) as exc:
        raise DatasetError(f"cannot parse {path}: {exc}") from exc
    return dataset_from_dict(doc)


def dataset_from_dict(doc: dict) -> Dataset:
    try:
        n = int(doc["nodes"])
        edges = doc.get("edges", [])
        features = np.asarray(doc["features"], dtype=np.float64).reshape(n, -1)
        labels = np.asarray(doc["labels"])
        masks = doc["masks"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed dataset document: {exc}") from exc
    graph = Graph.from_edges(n, edges)
    mask_arrays = []
    for split in ("train", "val", "test"):
        idx = np.asarray(masks.get(split, []), dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise DatasetError(f"{split} mask refers to a node outside [0, {n})")
        m = np.zeros(n, dtype=bool)
        m[idx] = True
        mask_arrays.append(m)
    gi = doc.get("graph_index")
    return Dataset(graph, features, labels, *mask_arrays, num_classes=int(doc.get("num_classes", 0)),
                   name=str(doc.get("name", "")), graph_index=None if gi is None else np.asarray(gi))


def dataset_to_dict(ds: Dataset) -> dict:
    feats = ds.features
    as_int = np.array_equal(feats, np.round(feats))
    doc = {
        "name": ds.name,
        "nodes": ds.num_nodes,
        "edges": ds.graph.edge_list().tolist(),
        "features": feats.astype(np.int64).tolist() if as_int else feats.tolist(),
        "labels": ds.labels.tolist(),
        "masks": {s: np.flatnonzero(ds.mask(s)).tolist() for s in ("train", "val", "test")},
    }
    if not ds.multi_label:
        doc["num_classes"] = ds.num_classes
    if ds.graph_index is not None:
        doc["graph_index"] = np.asarray(ds.graph_index).tolist()
    return doc


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    with _open_text(path, "w") as fh:
        json.dump(dataset_to_dict(ds), fh, separators=(",", ":"))


@dataclass(frozen=True)
class PerturbationSpec:
    mode: Literal["add", "drop"]
    ratio: float
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("add", "drop"):
            raise ValueError(f"mode must be 'add' or 'drop', got {self.mode!r}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"ratio must lie in [0, 1], got {self.ratio}")


def perturb_edges(g: Graph, spec: PerturbationSpec) -> Graph:
    """Randomly add or drop undirected edges.

    ``add`` picks ``ceil(ratio * N)`` distinct nodes and gives each one new edge
    to a uniformly chosen current non-neighbor (the endpoint may be any node).
    ``drop`` removes ``ceil(ratio * M)`` of the ``M`` non-self-loop edges.
    Self-loops are never touched.
    """
    if spec.ratio == 0.0:
        return g
    rng = make_rng(spec.seed, PERTURB)
    n = g.num_nodes
    if spec.mode == "drop":
        edges = g.edge_list()
        if len(edges) == 0:
            raise ValueError("graph has no non-self-loop edges to drop")
        count = min(math.ceil(spec.ratio * len(edges)), len(edges))
        drop = rng.choice(len(edges), size=count, replace=False)
        keep = np.ones(len(edges), dtype=bool)
        keep[drop] = False
        kept = edges[keep]
        loops = g.rows[g.self_loop_mask]
        src = np.concatenate([kept[:, 0], kept[:, 1], loops])
        dst = np.concatenate([kept[:, 1], kept[:, 0], loops])
        return Graph._from_arcs(n, src, dst)

    if g.num_edges == n * (n - 1) // 2:
        raise ValueError("cannot add edges to a complete graph")
    count = min(math.ceil(spec.ratio * n), n)
    chosen = rng.choice(n, size=count, replace=False)
    adj = [set(g.neighbors(i).tolist()) for i in range(n)]
    new_u, new_v = [], []
    for u in chosen.tolist():
        taken = adj[u]
        free = n - 1 - len(taken - {u})
        if free == 0:
            continue
        # rejection is cheap while the node is far from saturated
        if free > n // 4:
            while True:
                v = int(rng.integers(n))
                if v != u and v not in taken:
                    break
        else:
            cand = np.setdiff1d(np.arange(n), np.fromiter(taken | {u}, dtype=np.int64))
            v = int(cand[rng.integers(cand.size)])
        adj[u].add(v)
        adj[v].add(u)
        new_u.append(u)
        new_v.append(v)
    nu = np.asarray(new_u, dtype=np.int64)
    nv = np.asarray(new_v, dtype=np.int64)
    return Graph._from_arcs(n, np.concatenate([g.rows, nu, nv]), np.concatenate([g.indices, nv, nu]))


def random_split(n: int, sizes, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Disjoint boolean masks of the given sizes from a seeded permutation."""
    if sum(sizes) > n:
        raise ValueError("split sizes exceed node count")
    perm = make_rng(seed, SPLIT).permutation(n)
    masks = []
    start = 0
    for size in sizes:
        m = np.zeros(n, dtype=bool)
        m[perm[start:start + size]] = True
        masks.append(m)
        start += size
    return tuple(masks)


def generate_sbm(classes: int, nodes_per_class: int, p_in: float, p_out: float,
                 feature_dim: int, feature_shift: float, multi_label: bool = False,
                 seed: int = 0, feature_noise: float = 1.0) -> Dataset:
    """Stochastic block model with Gaussian class-conditional features.

    Node ``i`` of block ``c`` gets features ``N(0, feature_noise^2 I)`` shifted by
    ``feature_shift`` along axis ``c % feature_dim``. Splits are 60/20/20.
    """
    if not 0.0 <= p_out < p_in <= 1.0:
        raise ValueError(f"need 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}")
    if classes < 1 or nodes_per_class < 1 or feature_dim < 1:
        raise ValueError("classes, nodes_per_class and feature_dim must be positive")
    rng = make_rng(seed, SBM)
    n = classes * nodes_per_class
    block = np.repeat(np.arange(classes), nodes_per_class)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(block[iu] == block[ju], p_in, p_out)
    hit = rng.random(iu.size) < prob
    graph = Graph.from_edges(n, np.stack([iu[hit], ju[hit]], axis=1))

    features = feature_noise * rng.standard_normal((n, feature_dim))
    features[np.arange(n), block % feature_dim] += feature_shift
    if multi_label:
        labels = (rng.random((n, classes)) < 0.2).astype(np.int64)
        labels[np.arange(n), block] = 1
    else:
        labels = block
    n_train = int(round(0.6 * n))
    n_val = int(round(0.2 * n))
    masks = random_split(n, (n_train, n_val, n - n_train - n_val), seed)
    return Dataset(graph, features, labels, *masks, num_classes=classes,
                   name=f"sbm-{classes}x{nodes_per_class}")


@dataclass(frozen=True)
class GraphProperties:
    degrees: np.ndarray
    components: np.ndarray  # component label per node
    num_components: int
    component_bipartite: np.ndarray = field(repr=False)

    @property
    def bipartite(self) -> bool:
        return bool(self.component_bipartite.all())

    @property
    def connected(self) -> bool:
        return self.num_components == 1

    def partition(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.components == c) for c in range(self.num_components)]


def graph_properties(g: Graph) -> GraphProperties:
    degrees = g.degree()
    ncomp, comp = csgraph.connected_components(g.to_scipy(), directed=False)
    color = np.full(g.num_nodes, -1, dtype=np.int64)
    comp_bip = np.ones(ncomp, dtype=bool)
    for start in range(g.num_nodes):
        if color[start] >= 0:
            continue
        color[start] = 0
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for v in g.neighbors(u):
                if color[v] < 0:
                    color[v] = 1 - color[u]
                    queue.append(v)
                elif color[v] == color[u]:
                    comp_bip[comp[u]] = False
    return GraphProperties(degrees, comp, int(ncomp), comp_bip)


def random_connected_graph(n: int, extra_p: float, seed, self_loops: bool = False) -> Graph:
    """Random spanning tree (each node links to an earlier one) plus ``G(n, extra_p)`` edges."""
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed, SBM, 1)
    if n < 1:
        raise ValueError("need at least one node")
    tree = [(int(rng.integers(i)), i) for i in range(1, n)]
    iu, ju = np.triu_indices(n, k=1)
    hit = rng.random(iu.size) < extra_p
    edges = np.concatenate([np.array(tree, dtype=np.int64).reshape(-1, 2),
                            np.stack([iu[hit], ju[hit]], axis=1)])
    return Graph.from_edges(n, edges, self_loops=self_loops)
