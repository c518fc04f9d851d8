"""Two-step model selection: teacher by average degree, distillation by
estimated edge homophily.

Step 1 compares the average degree against the boundary ``beta`` and
trains the chosen teacher (GCN for dense graphs, H2GCN otherwise).
Step 2 estimates the edge homophily ratio from the trained teacher's
full-graph predictions and, when it clears the boundary ``gamma``,
distills the teacher into the CPF student; otherwise the teacher itself
is the final model.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np

from hmsf import cpf as cpfmod
from hmsf import models
from hmsf.graphdata import Graph, Split, average_degree, edge_homophily

TEACHER_KINDS = ("gcn", "h2gcn")


class PipelineError(RuntimeError):
    """An error raised by a specific pipeline stage."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def _stage(name: str):
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, exc) from exc


@dataclass
class HmsfDecision:
    """One per-seed decision record of the selection pipeline."""

    dataset: str
    seed: int
    beta: float
    gamma: float
    avg_degree: float
    teacher: str
    h_true: float
    h_estimated: float
    final: str  # "teacher" or "cpf"
    test_accuracy: float
    config_chosen: dict = field(default_factory=dict)

    def validate(self):
        if self.teacher not in TEACHER_KINDS:
            raise ValueError(f"unknown teacher kind {self.teacher!r}")
        if (self.teacher == "gcn") != (self.beta <= self.avg_degree):
            raise ValueError("teacher choice is inconsistent with the beta rule")
        if (self.final == "cpf") != (self.gamma <= self.h_estimated):
            raise ValueError("final choice is inconsistent with the gamma rule")

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["test_accuracy"] = round(100.0 * self.test_accuracy, 2)
        return rec


def select_teacher(avg_degree: float, beta: float) -> str:
    """GCN when beta <= average degree (boundary inclusive), else H2GCN."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    return "gcn" if beta <= avg_degree else "h2gcn"


def estimate_homophily(g: Graph, teacher_pred: np.ndarray) -> float:
    """Edge homophily ratio computed from predicted labels for all nodes.

    Predicted label = argmax of the prediction row (ties -> lowest class
    id); each undirected edge is counted once.
    """
    pred = np.asarray(teacher_pred)
    if pred.ndim != 2 or pred.shape[0] != g.num_nodes:
        raise ValueError("teacher predictions must have one row per node")
    if g.num_edges == 0:
        raise ValueError("homophily estimate is undefined for a graph with no edges")
    yhat = np.argmax(pred, axis=1)
    return float(np.mean(yhat[g.edges[:, 0]] == yhat[g.edges[:, 1]]))


def select_final(h_estimated: float, gamma: float) -> str:
    """CPF when gamma <= estimated homophily (boundary inclusive)."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie strictly between 0 and 1")
    return "cpf" if gamma <= h_estimated else "teacher"


def run_pipeline(
    graph: Graph,
    splits: dict[int, Split],
    beta: float,
    gamma: float,
    *,
    dataset_name: str | None = None,
    teacher_grids: dict | None = None,
    cpf_grids: dict | None = None,
    gnn_base: dict | None = None,
    cpf_base: dict | None = None,
    log: list | None = None,
):
    """Run the full selection pipeline over the given per-seed splits.

    The teacher grid search runs once on the smallest seed; the CPF grid
    search runs once on the first seed whose decision selects CPF.  Every
    seed gets its own teacher training run, homophily estimate and final
    decision.  Returns (decisions, summary dict).
    """
    name = dataset_name or graph.name
    seeds = sorted(splits)
    if not seeds:
        raise ValueError("no splits supplied")
    with _stage("indicators"):
        dbar = average_degree(graph)
        teacher_kind = select_teacher(dbar, beta)
        h_true = edge_homophily(graph)
    with _stage("teacher_grid_search"):
        teacher_cfg = models.grid_search(
            graph, splits[seeds[0]], teacher_kind, teacher_grids, base=gnn_base, log=log
        )

    cpf_cfg = None
    decisions = []
    for seed in seeds:
        with _stage(f"teacher_training(seed={seed})"):
            _, report = models.train_supervised(
                graph, splits[seed], models.with_seed(teacher_cfg, seed)
            )
        with _stage(f"homophily_estimate(seed={seed})"):
            h_est = estimate_homophily(graph, report.predictions)
            final = select_final(h_est, gamma)
        if final == "cpf":
            if cpf_cfg is None:
                with _stage(f"cpf_grid_search(seed={seed})"):
                    cpf_cfg = cpfmod.cpf_grid_search(
                        graph, splits[seed], report.predictions, cpf_grids, base=cpf_base
                    )
            with _stage(f"cpf_training(seed={seed})"):
                _, cpf_report = cpfmod.cpf_train(
                    graph, splits[seed], report.predictions, cpfmod.with_seed(cpf_cfg, seed)
                )
            test_acc = cpf_report.test_accuracy
        else:
            test_acc = report.test_accuracy
        decision = HmsfDecision(
            dataset=name,
            seed=seed,
            beta=float(beta),
            gamma=float(gamma),
            avg_degree=dbar,
            teacher=teacher_kind,
            h_true=h_true,
            h_estimated=h_est,
            final=final,
            test_accuracy=test_acc,
            config_chosen={
                "teacher": asdict(models.with_seed(teacher_cfg, seed)),
                "cpf": asdict(cpfmod.with_seed(cpf_cfg, seed)) if final == "cpf" else None,
            },
        )
        decision.validate()
        decisions.append(decision)

    accs = np.array([d.test_accuracy for d in decisions])
    summary = {
        "dataset": name,
        "beta": float(beta),
        "gamma": float(gamma),
        "avg_degree": dbar,
        "teacher": teacher_kind,
        "h_true": h_true,
        "seeds": seeds,
        "mean_test_accuracy": round(100.0 * float(accs.mean()), 2),
        "std_test_accuracy": round(100.0 * float(accs.std()), 2),
    }
    return decisions, summary


STRATEGIES = ("gcn", "h2gcn", "cpf_gcn", "cpf_h2gcn")


def run_strategy_matrix(
    graph: Graph,
    splits: dict[int, Split],
    *,
    teacher_grids: dict | None = None,
    cpf_grids: dict | None = None,
    gnn_base: dict | None = None,
    cpf_base: dict | None = None,
    strategies=STRATEGIES,
):
    """Train every strategy on every seed; the raw material for sweeps.

    Returns a dict mapping strategy name to {"config": ..., "per_seed":
    {seed: {"test_accuracy", "val_accuracy", "h_estimated"}}}, where
    ``h_estimated`` is present for the two bare teachers.
    """
    seeds = sorted(splits)
    matrix = {}
    teacher_preds = {}
    for kind in TEACHER_KINDS:
        wanted = kind in strategies or f"cpf_{kind}" in strategies
        if not wanted:
            continue
        cfg = models.grid_search(graph, splits[seeds[0]], kind, teacher_grids, base=gnn_base)
        per_seed = {}
        preds = {}
        for seed in seeds:
            _, report = models.train_supervised(graph, splits[seed], models.with_seed(cfg, seed))
            preds[seed] = report.predictions
            per_seed[seed] = {
                "test_accuracy": report.test_accuracy,
                "val_accuracy": report.best_val_accuracy,
                "h_estimated": estimate_homophily(graph, report.predictions),
            }
        teacher_preds[kind] = preds
        matrix[kind] = {"config": asdict(cfg), "per_seed": per_seed}
    for kind in TEACHER_KINDS:
        key = f"cpf_{kind}"
        if key not in strategies:
            continue
        preds = teacher_preds[kind]
        cfg = cpfmod.cpf_grid_search(
            graph, splits[seeds[0]], preds[seeds[0]], cpf_grids, base=cpf_base
        )
        per_seed = {}
        for seed in seeds:
            _, report = cpfmod.cpf_train(graph, splits[seed], preds[seed], cpfmod.with_seed(cfg, seed))
            per_seed[seed] = {
                "test_accuracy": report.test_accuracy,
                "val_accuracy": report.best_val_accuracy,
            }
        matrix[key] = {"config": asdict(cfg), "per_seed": per_seed}
    return matrix


def hmsf_from_matrix(matrix: dict, avg_degree: float, beta: float, gamma: float, metric: str = "test_accuracy"):
    """Evaluate the selection rule on a precomputed strategy matrix.

    Returns (per-seed accuracy dict, mean accuracy) under the given
    thresholds without retraining anything.
    """
    teacher_kind = select_teacher(avg_degree, beta)
    per_seed = {}
    for seed, cell in matrix[teacher_kind]["per_seed"].items():
        final = select_final(cell["h_estimated"], gamma)
        source = matrix[f"cpf_{teacher_kind}"] if final == "cpf" else matrix[teacher_kind]
        per_seed[seed] = source["per_seed"][seed][metric]
    mean = float(np.mean(list(per_seed.values())))
    return per_seed, mean
