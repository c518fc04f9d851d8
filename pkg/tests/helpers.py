"""Shared toy graphs, dataset writers and independent oracles for the tests."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from hmsf.graphdata import Graph, Split


def er_graph(n, p, seed, num_classes=3, feature_dim=6):
    """Erdos-Renyi graph with random features and labels."""
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(len(iu)) < p
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    features = rng.standard_normal((n, feature_dim))
    labels = rng.integers(0, num_classes, n)
    return Graph.build(n, edges, features, labels=labels, num_classes=num_classes)


def two_cluster_toy(noise=0.01, seed=7):
    """Two 10-node same-label cliques joined by one bridge edge."""
    edges = [(i, j) for i in range(10) for j in range(i + 1, 10)]
    edges += [(10 + i, 10 + j) for i in range(10) for j in range(i + 1, 10)]
    edges.append((0, 10))
    rng = np.random.default_rng(seed)
    x = np.zeros((20, 2))
    x[:10, 0] = 1.0
    x[10:, 1] = 1.0
    x += noise * rng.standard_normal((20, 2))
    labels = [0] * 10 + [1] * 10
    return Graph.build(20, edges, x, labels=labels, num_classes=2, name="two_cluster")


def two_cluster_split():
    return Split(
        train=np.array([0, 1, 10, 11]),
        val=np.array([2, 3, 12, 13]),
        test=np.array([4, 5, 6, 7, 14, 15, 16, 17]),
        seed=0,
        scheme="h2gcn_48_20_32",
    )


def planted_partition(
    classes=4,
    per_class=50,
    p_in=0.08,
    p_out=0.01,
    seed=0,
    name="toy",
    small=True,
    indicator_dims=4,
):
    """Block-model graph with class-indicative bag-of-words features."""
    n = classes * per_class
    labels = np.repeat(np.arange(classes), per_class)
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, k=1)
    same = labels[iu] == labels[ju]
    prob = np.where(same, p_in, p_out)
    keep = rng.random(len(iu)) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    fdim = classes * indicator_dims
    x = (rng.random((n, fdim)) < 0.05).astype(np.float64)
    for c in range(classes):
        rows = labels == c
        block = rng.random((rows.sum(), indicator_dims)) < 0.9
        x[np.ix_(rows, np.arange(c * indicator_dims, (c + 1) * indicator_dims))] = block
    return Graph.build(n, edges, x, labels=labels, num_classes=classes, name=name, small=small)


def write_dataset_dir(root, g: Graph) -> Path:
    """Materialize a Graph in the on-disk dataset format."""
    d = Path(root) / g.name
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "name": g.name,
        "num_nodes": g.num_nodes,
        "num_classes": g.num_classes,
        "num_features": g.num_features,
        "small": g.small,
    }
    (d / "graph.json").write_text(json.dumps(meta))
    (d / "edges.tsv").write_text(
        "".join(f"{u}\t{v}\n" for u, v in g.edges.tolist())
    )
    rows, dims = np.nonzero(g.features)
    (d / "features.tsv").write_text(
        "".join(
            f"{r}\t{c}\t{g.features[r, c]:.10g}\n" for r, c in zip(rows.tolist(), dims.tolist())
        )
    )
    (d / "labels.tsv").write_text(
        "".join(f"{v}\t{y}\n" for v, y in enumerate(g.labels.tolist()))
    )
    return d


# ---------------------------------------------------------------------------
# independent oracles


def brute_force_n2(g: Graph, v: int) -> set:
    """Enumerate all 2-step walk endpoints, minus self and direct neighbors."""
    reach = set()
    for u in g.neighbors(v):
        reach.update(g.neighbors(u).tolist())
    return reach - {v} - set(g.neighbors(v).tolist())


def brute_force_edge_homophily(g: Graph) -> float:
    hits = sum(1 for u, v in g.edges.tolist() if g.labels[u] == g.labels[v])
    return hits / len(g.edges)


def relerr(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(1e-6, np.abs(a) + np.abs(b)))) if a.size else 0.0


def grad_check(params, loss_fn, step=1e-5):
    """Compare tape gradients against central finite differences.

    ``loss_fn(params, tape)`` must return (loss, anchor tensor, gradient
    of the loss w.r.t. the anchor).  Returns the worst relative error
    over all parameter entries.
    """
    from hmsf import tensorcore as tc

    tensors = params.tensors()
    tape = tc.Tape()
    _, anchor, grad_anchor = loss_fn(params, tape)
    for t in tensors.values():
        t.zero_grad()
    anchor.add_grad(grad_anchor)
    tape.backward()

    worst = 0.0
    for t in tensors.values():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.value)
        numeric = np.zeros_like(t.value)
        flat, nflat = t.value.ravel(), numeric.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up, _, _ = loss_fn(params, None)
            flat[i] = orig - step
            down, _, _ = loss_fn(params, None)
            flat[i] = orig
            nflat[i] = (up - down) / (2 * step)
        worst = max(worst, relerr(analytic, numeric))
    return worst
