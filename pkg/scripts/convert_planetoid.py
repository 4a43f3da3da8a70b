"""Convert public citation-network dumps to the package's JSON dataset format.

Two inputs are understood:

* the LINQS text release (``<name>.content`` + ``<name>.cites``), e.g. Cora;
* the Planetoid pickles (``ind.<name>.{x,tx,allx,y,ty,ally,graph,test.index}``),
  e.g. Citeseer and Pubmed.

Supervised split: 500 validation and 1000 test nodes, every other labeled node
trains. Planetoid dumps use their published test index and the 500 nodes that
follow the labeled training block for validation; the text release has no
canonical ordering, so its split is a seeded permutation.

    python scripts/convert_planetoid.py linqs data/raw/cora cora data/cora.json.gz
    python scripts/convert_planetoid.py planetoid data/raw/citeseer citeseer data/citeseer.json.gz
"""

from __future__ import annotations

import argparse
import pickle
import sys
import warnings
from pathlib import Path

import numpy as np
from scipy import sparse

from cgat.graph import Dataset, Graph, random_split, save_dataset

VAL_SIZE, TEST_SIZE = 500, 1000


def convert_linqs(root: Path, name: str, seed: int = 0) -> Dataset:
    ids, feats, classes = [], [], []
    with open(root / f"{name}.content", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if parts:
                ids.append(parts[0])
                feats.append([int(v) for v in parts[1:-1]])
                classes.append(parts[-1])
    index = {pid: i for i, pid in enumerate(ids)}
    class_names = sorted(set(classes))
    labels = np.array([class_names.index(c) for c in classes], dtype=np.int64)
    edges, skipped = [], 0
    with open(root / f"{name}.cites", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if len(parts) != 2:
                continue
            if parts[0] in index and parts[1] in index:
                edges.append((index[parts[0]], index[parts[1]]))
            else:
                skipped += 1
    if skipped:
        print(f"skipped {skipped} citations to unknown papers", file=sys.stderr)
    n = len(ids)
    edges = np.array([e for e in edges if e[0] != e[1]], dtype=np.int64).reshape(-1, 2)
    train, val, test = random_split(n, (n - VAL_SIZE - TEST_SIZE, VAL_SIZE, TEST_SIZE), seed)
    return Dataset(Graph.from_edges(n, edges), np.array(feats, dtype=np.float64), labels,
                   train, val, test, num_classes=len(class_names), name=name)


def _load_pickle(path: Path):
    with open(path, "rb") as fh, warnings.catch_warnings():
        warnings.simplefilter("ignore", DeprecationWarning)
        return pickle.load(fh, encoding="latin1")


def convert_planetoid(root: Path, name: str) -> Dataset:
    part = {k: _load_pickle(root / f"ind.{name}.{k}") for k in ("x", "y", "tx", "ty", "allx", "ally", "graph")}
    test_index = np.loadtxt(root / f"ind.{name}.test.index", dtype=np.int64)
    test_sorted = np.sort(test_index)
    lo, hi = int(test_sorted[0]), int(test_sorted[-1])

    tx = sparse.csr_matrix(part["tx"])
    ty = np.asarray(part["ty"])
    full = hi - lo + 1
    if full != tx.shape[0]:  # citeseer: isolated test nodes missing from the dump
        tx_full = sparse.lil_matrix((full, tx.shape[1]))
        tx_full[test_sorted - lo] = tx
        ty_full = np.zeros((full, ty.shape[1]))
        ty_full[test_sorted - lo] = ty
        tx, ty = tx_full.tocsr(), ty_full

    features = sparse.vstack([sparse.csr_matrix(part["allx"]), tx]).tolil()
    onehot = np.vstack([np.asarray(part["ally"]), ty])
    features[test_index] = features[test_sorted]
    onehot[test_index] = onehot[test_sorted]
    n = features.shape[0]
    labels = onehot.argmax(axis=1).astype(np.int64)
    has_label = onehot.sum(axis=1) > 0

    edges = [(i, j) for i, nbrs in part["graph"].items() for j in nbrs if i != j and j < n and i < n]
    graph = Graph.from_edges(n, np.array(edges, dtype=np.int64).reshape(-1, 2))

    test = np.zeros(n, dtype=bool)
    test[test_index[:TEST_SIZE]] = True
    n_labeled_train = np.asarray(part["y"]).shape[0]
    val = np.zeros(n, dtype=bool)
    val[n_labeled_train:n_labeled_train + VAL_SIZE] = True
    val &= ~test
    train = has_label & ~val & ~test
    return Dataset(graph, features.toarray(), labels, train, val, test,
                   num_classes=onehot.shape[1], name=name)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("kind", choices=["linqs", "planetoid"])
    ap.add_argument("root", type=Path, help="directory holding the raw files")
    ap.add_argument("name", help="dataset stem, e.g. cora")
    ap.add_argument("out", type=Path, help="output .json or .json.gz")
    ap.add_argument("--seed", type=int, default=0, help="split seed for the text release")
    args = ap.parse_args(argv)
    if args.kind == "linqs":
        ds = convert_linqs(args.root, args.name, args.seed)
    else:
        ds = convert_planetoid(args.root, args.name)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, args.out)
    print(f"{ds.name}: {ds.num_nodes} nodes, {ds.graph.num_edges} edges, {ds.num_classes} classes, "
          f"{ds.features.shape[1]} features, split {ds.train_mask.sum()}/{ds.val_mask.sum()}/{ds.test_mask.sum()}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
