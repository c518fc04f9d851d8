"""Node-classification engine with degree/homophily-driven model selection.

Implements GCN, H2GCN and the CPF distillation student on a small
numpy-based reverse-mode tape, plus the two-step selection pipeline that
chooses a teacher by average degree and decides on distillation from the
estimated edge homophily ratio.
"""

from hmsf.graphdata import (
    Graph,
    Hoods,
    Split,
    average_degree,
    build_neighborhoods,
    edge_homophily,
    load_graph,
    make_split,
    node_homophily,
)
from hmsf.selection import (
    HmsfDecision,
    estimate_homophily,
    run_pipeline,
    select_final,
    select_teacher,
)

__version__ = "0.1.0"

__all__ = [
    "Graph",
    "Hoods",
    "Split",
    "HmsfDecision",
    "average_degree",
    "build_neighborhoods",
    "edge_homophily",
    "estimate_homophily",
    "load_graph",
    "make_split",
    "node_homophily",
    "run_pipeline",
    "select_final",
    "select_teacher",
    "__version__",
]
