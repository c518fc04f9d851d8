"""Diagnostic studies: hop-aggregate feature variance and alpha-vs-homophily.

Both produce flat per-node records ready for CSV export; plotting is left
to external tooling.
"""

from __future__ import annotations

import numpy as np
import pandas as pd

from hmsf import tensorcore as tc
from hmsf.graphdata import Graph, Hoods


def hop_aggregate_variance(g: Graph, hoods: Hoods) -> pd.DataFrame:
    """Population variance of the 0/1/2-hop aggregated feature vectors.

    Hop 0 is the raw feature row; hop i aggregates neighbor features with
    the symmetric d^{-1/2} d^{-1/2} normalization and no self term.  The
    degree column holds d_{v,1} for hops 0 and 1 and d_{v,2} for hop 2;
    nodes without depth-i neighbors are omitted from that hop.  Variances
    are taken over the F vector components of the raw (unnormalized)
    features.
    """
    x = g.features
    frames = []
    nodes = np.arange(g.num_nodes, dtype=np.int64)
    frames.append(
        pd.DataFrame(
            {"node": nodes, "hop": 0, "degree": hoods.d1, "variance": x.var(axis=1)}
        )
    )
    for hop, depth_degree in ((1, hoods.d1), (2, hoods.d2)):
        op = tc.h2gcn_normalize(hoods, hop)
        agg = op.matmat(x)
        keep = depth_degree > 0
        frames.append(
            pd.DataFrame(
                {
                    "node": nodes[keep],
                    "hop": hop,
                    "degree": depth_degree[keep],
                    "variance": agg[keep].var(axis=1),
                }
            )
        )
    return pd.concat(frames, ignore_index=True)


def alpha_vs_homophily(g: Graph, alpha: np.ndarray, node_h: np.ndarray):
    """Pair trained alpha values with node-level homophily.

    Isolated nodes (NaN homophily) are dropped.  Returns (records,
    summary) where summary carries the means over the retained nodes.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    node_h = np.asarray(node_h, dtype=np.float64)
    if alpha.shape != (g.num_nodes,) or node_h.shape != (g.num_nodes,):
        raise ValueError("alpha and node homophily must have one entry per node")
    keep = ~np.isnan(node_h)
    records = pd.DataFrame(
        {
            "node": np.arange(g.num_nodes, dtype=np.int64)[keep],
            "node_homophily": node_h[keep],
            "alpha": alpha[keep],
        }
    )
    summary = {
        "count": int(keep.sum()),
        "mean_alpha": float(alpha[keep].mean()) if keep.any() else float("nan"),
        "mean_node_homophily": float(node_h[keep].mean()) if keep.any() else float("nan"),
    }
    return records, summary
