"""Graph data model, dataset ingestion, split generation, and graph indicators.

Datasets are ingested from a plain-text directory format (see
``docs/datasets.md``): ``graph.json`` metadata, ``edges.tsv`` edge pairs,
``features.tsv`` sparse feature triplets and ``labels.tsv`` node labels.
Edges are undirected; input files may list an edge in either or both
orientations and duplicates are normalized away on load.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.sparse as sp

SPLIT_SCHEMES = ("h2gcn_48_20_32", "gcn_20_per_class")


class DatasetError(ValueError):
    """Raised when a dataset directory violates the documented format."""


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected graph with node features and optional per-node labels.

    ``edges`` stores every undirected edge exactly once as ``(u, v)`` with
    ``u < v``; the adjacency index (``adj_indptr``/``adj_indices``) is the
    CSR-style symmetric closure of it, sorted within each row.  Instances
    are immutable after construction and safe to share across threads;
    equality is identity (fields hold arrays).
    """

    num_nodes: int
    edges: np.ndarray        # (m, 2) int64, u < v, deduplicated, no self-loops
    adj_indptr: np.ndarray   # (n + 1,) int64
    adj_indices: np.ndarray  # (2m,) int64, sorted per row
    features: np.ndarray     # (n, F) float64
    labels: np.ndarray | None  # (n,) int64, -1 marks an unlabeled node
    num_classes: int
    num_features: int
    name: str = "graph"
    small: bool = False

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def degrees(self) -> np.ndarray:
        """Per-node degree d_{v,1}."""
        return np.diff(self.adj_indptr)

    def neighbors(self, v: int) -> np.ndarray:
        """Sorted 1-hop neighborhood N_1(v)."""
        return self.adj_indices[self.adj_indptr[v] : self.adj_indptr[v + 1]]

    def fully_labeled(self) -> bool:
        return self.labels is not None and bool(np.all(self.labels >= 0))

    @classmethod
    def build(
        cls,
        num_nodes: int,
        edges,
        features: np.ndarray,
        labels=None,
        num_classes: int = 0,
        name: str = "graph",
        small: bool = False,
    ) -> "Graph":
        """Construct a validated Graph from a raw (possibly messy) edge list.

        Edges are symmetrized and deduplicated; self-loops are dropped with
        a warning.  Raises :class:`DatasetError` on out-of-range node ids,
        label ids >= ``num_classes`` or a feature matrix of the wrong shape.
        """
        n = int(num_nodes)
        if n < 0:
            raise DatasetError("num_nodes must be non-negative")
        raw = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
        raw = raw.reshape(-1, 2)
        if raw.size and (raw.min() < 0 or raw.max() >= n):
            raise DatasetError(f"edge endpoint out of range [0, {n})")
        loops = raw[:, 0] == raw[:, 1]
        if loops.any():
            warnings.warn(f"dropping {int(loops.sum())} self-loop(s) from input edges", stacklevel=2)
            raw = raw[~loops]
        if raw.size:
            canon = np.sort(raw, axis=1)
            canon = np.unique(canon, axis=0)
        else:
            canon = np.empty((0, 2), dtype=np.int64)

        feats = np.ascontiguousarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != n:
            raise DatasetError(f"features must be an (n, F) matrix with n={n}, got {feats.shape}")
        num_features = feats.shape[1]

        lab = None
        if labels is not None:
            lab = np.asarray(labels, dtype=np.int64).reshape(-1)
            if lab.shape[0] != n:
                raise DatasetError("labels must have one entry per node")
            if lab.size and lab.max(initial=-1) >= num_classes:
                raise DatasetError(f"label id >= num_classes ({num_classes})")
            if lab.size and lab.min(initial=0) < -1:
                raise DatasetError("label ids must be >= 0 (or -1 for unlabeled)")

        indptr, indices = _symmetric_csr(n, canon)
        return cls(
            num_nodes=n,
            edges=canon,
            adj_indptr=indptr,
            adj_indices=indices,
            features=feats,
            labels=lab,
            num_classes=int(num_classes),
            num_features=int(num_features),
            name=name,
            small=bool(small),
        )


def _symmetric_csr(n: int, edges: np.ndarray):
    """CSR (indptr, indices) of the symmetric adjacency, rows sorted."""
    if edges.size == 0:
        return np.zeros(n + 1, dtype=np.int64), np.empty(0, dtype=np.int64)
    row = np.concatenate([edges[:, 0], edges[:, 1]])
    col = np.concatenate([edges[:, 1], edges[:, 0]])
    order = np.lexsort((col, row))
    row, col = row[order], col[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, row + 1, 1)
    np.cumsum(indptr, out=indptr)
    return indptr, col.astype(np.int64)


@dataclass(frozen=True, eq=False)
class Hoods:
    """Exact 1-hop and 2-hop neighborhoods with their sizes.

    ``n2`` holds nodes reachable in exactly two steps, excluding the node
    itself and its direct neighbors.
    """

    n1_indptr: np.ndarray
    n1_indices: np.ndarray
    n2_indptr: np.ndarray
    n2_indices: np.ndarray
    d1: np.ndarray
    d2: np.ndarray

    def n1(self, v: int) -> np.ndarray:
        return self.n1_indices[self.n1_indptr[v] : self.n1_indptr[v + 1]]

    def n2(self, v: int) -> np.ndarray:
        return self.n2_indices[self.n2_indptr[v] : self.n2_indptr[v + 1]]


def build_neighborhoods(g: Graph) -> Hoods:
    """Compute N_1 and N_2 for every node.

    N_2(v) = (union of neighbors of neighbors) minus ({v} union N_1(v)).
    """
    n = g.num_nodes
    a = sp.csr_matrix(
        (np.ones(len(g.adj_indices)), g.adj_indices, g.adj_indptr), shape=(n, n)
    )
    a2 = a @ a
    a2.setdiag(0)
    a2 = a2 - a2.multiply(a)
    a2 = sp.csr_matrix(a2)
    a2.eliminate_zeros()
    a2.sort_indices()
    return Hoods(
        n1_indptr=g.adj_indptr,
        n1_indices=g.adj_indices,
        n2_indptr=a2.indptr.astype(np.int64),
        n2_indices=a2.indices.astype(np.int64),
        d1=np.diff(g.adj_indptr),
        d2=np.diff(a2.indptr).astype(np.int64),
    )


def average_degree(g: Graph) -> float:
    """Mean degree over all nodes, i.e. 2|E|/|V|."""
    if g.num_nodes == 0:
        raise ValueError("average degree is undefined for an empty graph")
    return 2.0 * g.num_edges / g.num_nodes


def _require_full_labels(g: Graph, what: str):
    if not g.fully_labeled():
        raise ValueError(f"{what} requires a label for every node")


def edge_homophily(g: Graph) -> float:
    """Fraction of edges whose endpoints share a label (each edge once)."""
    _require_full_labels(g, "edge homophily")
    if g.num_edges == 0:
        raise ValueError("edge homophily is undefined for a graph with no edges")
    y = g.labels
    return float(np.mean(y[g.edges[:, 0]] == y[g.edges[:, 1]]))


def node_homophily(g: Graph) -> np.ndarray:
    """Per-node fraction of incident edges joining a same-label neighbor.

    Isolated nodes get NaN (undefined) and are excluded from downstream
    analysis output.
    """
    _require_full_labels(g, "node homophily")
    n = g.num_nodes
    y = g.labels
    u, v = g.edges[:, 0], g.edges[:, 1]
    same = (y[u] == y[v]).astype(np.float64)
    hits = np.bincount(u, weights=same, minlength=n) + np.bincount(v, weights=same, minlength=n)
    deg = g.degrees.astype(np.float64)
    out = np.full(n, np.nan)
    np.divide(hits, deg, out=out, where=deg > 0)
    return out


@dataclass(frozen=True, eq=False)
class Split:
    """Disjoint train/validation/test node-id sets for one seed."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int
    scheme: str

    def validate(self, g: Graph):
        parts = [self.train, self.val, self.test]
        allids = np.concatenate(parts) if any(p.size for p in parts) else np.empty(0, dtype=np.int64)
        if allids.size and (allids.min() < 0 or allids.max() >= g.num_nodes):
            raise ValueError("split contains node ids outside the graph")
        if len(np.unique(allids)) != len(allids):
            raise ValueError("train/val/test sets are not pairwise disjoint")
        if g.labels is None or (self.train.size and np.any(g.labels[self.train] < 0)):
            raise ValueError("every training node must be labeled")


def make_split(g: Graph, scheme: str, seed: int) -> Split:
    """Generate a train/val/test split deterministically from ``seed``.

    ``h2gcn_48_20_32``: per label, shuffle and cut 48% train / 32% val /
    20% test (train and test counts floored, the remainder goes to val).
    ``gcn_20_per_class``: 20 train nodes per label, then 500 validation and
    1000 test nodes from the remaining pool (5/50/100 when the dataset is
    flagged small).
    """
    if scheme not in SPLIT_SCHEMES:
        raise ValueError(f"unknown split scheme {scheme!r}")
    _require_full_labels(g, f"split scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    y = g.labels
    train, val, test = [], [], []
    if scheme == "h2gcn_48_20_32":
        for c in range(g.num_classes):
            ids = np.flatnonzero(y == c)
            if ids.size == 0:
                continue
            perm = rng.permutation(ids)
            m = len(perm)
            n_tr = math.floor(0.48 * m)
            n_te = math.floor(0.20 * m)
            n_va = m - n_tr - n_te
            train.append(perm[:n_tr])
            val.append(perm[n_tr : n_tr + n_va])
            test.append(perm[n_tr + n_va :])
    else:
        per_class = 5 if g.small else 20
        n_val = 50 if g.small else 500
        n_test = 100 if g.small else 1000
        for c in range(g.num_classes):
            ids = np.flatnonzero(y == c)
            if ids.size < per_class:
                raise ValueError(
                    f"label {c} has {ids.size} nodes, fewer than the {per_class} required for training"
                )
            train.append(rng.permutation(ids)[:per_class])
        taken = np.concatenate(train)
        rest = np.setdiff1d(np.arange(g.num_nodes), taken)
        if rest.size < n_val + n_test:
            raise ValueError(
                f"need {n_val + n_test} non-train nodes for val/test, only {rest.size} available"
            )
        perm = rng.permutation(rest)
        val.append(perm[:n_val])
        test.append(perm[n_val : n_val + n_test])

    def _cat(parts):
        return np.sort(np.concatenate(parts)).astype(np.int64) if parts else np.empty(0, np.int64)

    split = Split(train=_cat(train), val=_cat(val), test=_cat(test), seed=int(seed), scheme=scheme)
    split.validate(g)
    return split


def save_split(split: Split, data_dir) -> Path:
    """Write ``splits/<scheme>_<seed>.json`` under the dataset directory."""
    out = Path(data_dir) / "splits"
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{split.scheme}_{split.seed}.json"
    payload = {k: getattr(split, k).tolist() for k in ("train", "val", "test")}
    path.write_text(json.dumps(payload))
    return path


def load_split(path, scheme: str | None = None, seed: int | None = None) -> Split:
    """Read a split file; scheme and seed default to filename inference."""
    path = Path(path)
    payload = json.loads(path.read_text())
    if scheme is None or seed is None:
        stem = path.stem
        matched = next((s for s in SPLIT_SCHEMES if stem.startswith(s + "_")), None)
        if matched is None:
            raise ValueError(f"cannot infer split scheme from filename {path.name!r}")
        tag = stem[len(matched) + 1 :]
        scheme = scheme if scheme is not None else matched
        if seed is None:
            seed = int(tag) if tag.lstrip("-").isdigit() else -1
    return Split(
        train=np.asarray(sorted(payload["train"]), dtype=np.int64),
        val=np.asarray(sorted(payload["val"]), dtype=np.int64),
        test=np.asarray(sorted(payload["test"]), dtype=np.int64),
        seed=int(seed),
        scheme=scheme,
    )


def resolve_split(g: Graph, data_dir, scheme: str, seed: int) -> Split:
    """Locate the split for (scheme, seed): a per-seed file if shipped, else
    a shared ``<scheme>_fixed.json`` file, else generate with `make_split`."""
    d = Path(data_dir)
    per_seed = d / "splits" / f"{scheme}_{seed}.json"
    fixed = d / "splits" / f"{scheme}_fixed.json"
    if per_seed.exists():
        split = load_split(per_seed, scheme=scheme, seed=seed)
    elif fixed.exists():
        split = load_split(fixed, scheme=scheme, seed=seed)
    else:
        return make_split(g, scheme, seed)
    split.validate(g)
    return split


def _read_tsv(path: Path, columns, dtypes) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, sep="\t", header=None, names=columns, dtype=dtypes)
    except pd.errors.EmptyDataError:
        df = pd.DataFrame({c: pd.Series(dtype=dtypes[c]) for c in columns})
    except (ValueError, FileNotFoundError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise DatasetError(f"{path}: {exc}") from exc
    return df


def load_graph(data_dir, row_normalize: bool = False) -> Graph:
    """Load a dataset directory into a validated :class:`Graph`.

    With ``row_normalize`` each feature row is divided by its L1 norm
    (zero rows are left untouched); default is the raw ingested features.
    """
    d = Path(data_dir)
    meta_path = d / "graph.json"
    if not meta_path.exists():
        raise FileNotFoundError(meta_path)
    meta = json.loads(meta_path.read_text())
    for key in ("num_nodes", "num_classes", "num_features"):
        if key not in meta:
            raise DatasetError(f"graph.json missing required key {key!r}")
    n = int(meta["num_nodes"])
    num_classes = int(meta["num_classes"])
    num_features = int(meta["num_features"])

    for fname in ("edges.tsv", "features.tsv", "labels.tsv"):
        if not (d / fname).exists():
            raise FileNotFoundError(d / fname)

    edges = _read_tsv(d / "edges.tsv", ["u", "v"], {"u": np.int64, "v": np.int64})
    feats = _read_tsv(
        d / "features.tsv",
        ["node", "dim", "value"],
        {"node": np.int64, "dim": np.int64, "value": np.float64},
    )
    labels = _read_tsv(d / "labels.tsv", ["node", "label"], {"node": np.int64, "label": np.int64})

    if len(feats) and (feats["node"].min() < 0 or feats["node"].max() >= n):
        raise DatasetError("features.tsv: node id out of range")
    if len(feats) and (feats["dim"].min() < 0 or feats["dim"].max() >= num_features):
        raise DatasetError("features.tsv: feature dimension out of range")
    x = np.zeros((n, num_features), dtype=np.float64)
    if len(feats):
        x[feats["node"].to_numpy(), feats["dim"].to_numpy()] = feats["value"].to_numpy()
    if row_normalize:
        norms = np.abs(x).sum(axis=1, keepdims=True)
        np.divide(x, norms, out=x, where=norms > 0)

    if len(labels) and (labels["node"].min() < 0 or labels["node"].max() >= n):
        raise DatasetError("labels.tsv: node id out of range")
    y = np.full(n, -1, dtype=np.int64)
    if len(labels):
        if labels["label"].min() < 0 or labels["label"].max() >= num_classes:
            raise DatasetError("labels.tsv: label id out of range")
        y[labels["node"].to_numpy()] = labels["label"].to_numpy()
    if np.any(y < 0):
        raise DatasetError("labels.tsv must assign a label to every node")

    return Graph.build(
        num_nodes=n,
        edges=edges[["u", "v"]].to_numpy() if len(edges) else np.empty((0, 2), np.int64),
        features=x,
        labels=y,
        num_classes=num_classes,
        name=str(meta.get("name", d.name)),
        small=bool(meta.get("small", False)),
    )
