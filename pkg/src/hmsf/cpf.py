"""CPF distillation student: parameterized label propagation plus an MLP.

The student output is built iteratively: starting from one-hot rows for
training nodes and uniform rows elsewhere, each of the K2 iterations
propagates the current matrix through confidence-softmax edge weights and
mixes the result with the MLP output through a per-node balance
parameter; training rows are reset to their one-hot labels after every
iteration.  The whole construction sits on the reverse-mode tape, so the
distillation loss differentiates through the propagation into the
confidence scores, the balance logits and the MLP weights.
"""

from __future__ import annotations

import time
import weakref
from dataclasses import asdict, dataclass, replace
from itertools import product
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from hmsf import tensorcore as tc
from hmsf.graphdata import Graph, Split
from hmsf.models import (
    MlpParams,
    TrainReport,
    checkpoint_arrays,
    evaluate,
    init_mlp,
    mlp_forward,
)

CPF_GRID = {"mlp_dropout": (0.5, 0.8), "lr": (0.01, 0.001), "weight_decay": (0.01, 0.001)}


@dataclass(frozen=True)
class CpfConfig:
    k2: int = 8
    mlp_dropout: float = 0.5
    plp_dropout: float = 0.8
    lr: float = 0.01
    weight_decay: float = 0.01
    hidden_dim: int = 64
    max_epochs: int = 2000
    patience: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.k2 < 1:
            raise ValueError("the propagation depth k2 must be at least 1")
        if not 0.0 <= self.mlp_dropout < 1.0 or not 0.0 <= self.plp_dropout < 1.0:
            raise ValueError("dropout rates must be in [0, 1)")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")


@dataclass
class CpfParams:
    """MLP weights plus per-node confidence scores and balance logits."""

    mlp: MlpParams
    confidence: tc.Tensor  # (n,)
    balance: tc.Tensor     # (n,) logits; alpha_v = sigmoid(balance_v)

    def tensors(self) -> dict:
        out = self.mlp.tensors()
        out["confidence"] = self.confidence
        out["balance"] = self.balance
        return out


def init_cpf(rng, graph: Graph, hidden_dim: int) -> CpfParams:
    """Glorot MLP, zero confidence scores, zero balance logits (alpha=0.5)."""
    return CpfParams(
        mlp=init_mlp(rng, graph.num_features, hidden_dim, graph.num_classes),
        confidence=tc.parameter(np.zeros(graph.num_nodes)),
        balance=tc.parameter(np.zeros(graph.num_nodes)),
    )


@dataclass(frozen=True, eq=False)
class PlpStructure:
    """Closed-neighborhood CSR pattern shared by all PLP evaluations."""

    indptr: np.ndarray
    indices: np.ndarray
    rowids: np.ndarray
    num_nodes: int


_STRUCTURE_CACHE = weakref.WeakKeyDictionary()


def plp_structure(g: Graph) -> PlpStructure:
    cached = _STRUCTURE_CACHE.get(g)
    if cached is None:
        indptr, indices = tc.closed_adjacency(g)
        rowids = np.repeat(np.arange(g.num_nodes, dtype=np.int64), np.diff(indptr))
        cached = PlpStructure(indptr=indptr, indices=indices, rowids=rowids, num_nodes=g.num_nodes)
        _STRUCTURE_CACHE[g] = cached
    return cached


def _plp_softmax(c: np.ndarray, struct: PlpStructure) -> np.ndarray:
    """Per-row softmax of confidence scores over each closed neighborhood."""
    vals = c[struct.indices]
    mx = np.maximum.reduceat(vals, struct.indptr[:-1])
    e = np.exp(vals - mx[struct.rowids])
    s = np.add.reduceat(e, struct.indptr[:-1])
    return e / s[struct.rowids]


def plp_weights(g: Graph, confidence) -> tc.SparseOperator:
    """Row-stochastic propagation weights w_uv = softmax of c over N_1(v)+{v}.

    Row v holds the weights of its closed neighborhood; an isolated node
    gets w_vv = 1.
    """
    c = np.asarray(confidence, dtype=np.float64)
    if c.shape != (g.num_nodes,):
        raise ValueError(f"confidence must have shape ({g.num_nodes},), got {c.shape}")
    struct = plp_structure(g)
    data = _plp_softmax(c, struct)
    return tc.SparseOperator(struct.indptr, struct.indices, data, g.num_nodes)


def _plp_propagate(tape, confidence: tc.Tensor, f: tc.Tensor, struct: PlpStructure, weights, csr):
    """One propagation step P @ F, differentiable in both F and c."""
    value = csr @ f.value
    needs = f.needs_grad or confidence.needs_grad
    out = tc.Tensor(value, needs_grad=needs)
    if tape is not None and needs:
        def fn():
            g = out.grad
            if g is None:
                return
            if f.needs_grad:
                f.add_grad(csr.T @ g)
            if confidence.needs_grad:
                per_row = (g * value).sum(axis=1)
                per_entry = (g[struct.rowids] * f.value[struct.indices]).sum(axis=1)
                contrib = weights * (per_entry - per_row[struct.rowids])
                confidence.add_grad(
                    np.bincount(struct.indices, weights=contrib, minlength=struct.num_nodes)
                )

        tape.record(fn)
    return out


def _clamp_rows(tape, x: tc.Tensor, rows: np.ndarray, values: np.ndarray) -> tc.Tensor:
    """Overwrite the given rows with constants; their gradient is cut."""
    value = x.value.copy()
    value[rows] = values
    out = tc.Tensor(value, needs_grad=x.needs_grad)
    if tape is not None and x.needs_grad:
        def fn():
            if out.grad is None:
                return
            g = out.grad.copy()
            g[rows] = 0.0
            x.add_grad(g)

        tape.record(fn)
    return out


def _mix_rows(tape, balance, prop: tc.Tensor, base: tc.Tensor, alpha_override=None) -> tc.Tensor:
    """Per-node convex combination alpha*prop + (1-alpha)*base."""
    alpha = expit(balance.value) if alpha_override is None else alpha_override
    value = alpha[:, None] * prop.value + (1.0 - alpha)[:, None] * base.value
    needs = prop.needs_grad or base.needs_grad or (balance is not None and balance.needs_grad)
    out = tc.Tensor(value, needs_grad=needs)
    if tape is not None and needs:
        def fn():
            g = out.grad
            if g is None:
                return
            if prop.needs_grad:
                prop.add_grad(alpha[:, None] * g)
            if base.needs_grad:
                base.add_grad((1.0 - alpha)[:, None] * g)
            if balance is not None and balance.needs_grad and alpha_override is None:
                gap = ((prop.value - base.value) * g).sum(axis=1)
                balance.add_grad(gap * alpha * (1.0 - alpha))

        tape.record(fn)
    return out


def cpf_forward(
    theta: CpfParams,
    graph: Graph,
    split: Split,
    cfg: CpfConfig,
    *,
    tape=None,
    rng=None,
    training: bool = False,
    structure: PlpStructure | None = None,
    force_alpha_zero: bool = False,
):
    """Run K2 propagation/mix iterations; returns (probabilities, tensor).

    Training rows are clamped to their one-hot labels after every
    iteration; PLP dropout hits the propagated term before the mix.  In
    eval mode every intermediate matrix is row-stochastic.
    """
    struct = structure if structure is not None else plp_structure(graph)
    n, c = graph.num_nodes, graph.num_classes
    onehot_train = tc.one_hot(graph.labels[split.train], c)
    start = np.full((n, c), 1.0 / c)
    start[split.train] = onehot_train
    f = tc.Tensor(start)

    _, mlp_logits = mlp_forward(
        theta.mlp, graph.features, tape=tape, rng=rng, training=training, dropout=cfg.mlp_dropout
    )
    ft = tc.row_softmax(tape, mlp_logits)

    weights = _plp_softmax(theta.confidence.value, struct)
    csr = sp.csr_matrix((weights, struct.indices, struct.indptr), shape=(n, n))
    alpha_override = np.zeros(n) if force_alpha_zero else None

    for _ in range(cfg.k2):
        prop = _plp_propagate(tape, theta.confidence, f, struct, weights, csr)
        prop = tc.dropout(tape, prop, cfg.plp_dropout, rng, training)
        f = _mix_rows(tape, theta.balance, prop, ft, alpha_override=alpha_override)
        f = _clamp_rows(tape, f, split.train, onehot_train)
    return f.value, f


def cpf_train(
    graph: Graph,
    split: Split,
    teacher_pred: np.ndarray,
    cfg: CpfConfig,
    *,
    force_alpha_zero: bool = False,
):
    """Distill the frozen teacher into the student; returns (params, report).

    Adam minimizes the L2 distillation loss over all non-training nodes.
    Early stopping watches the distillation loss restricted to the
    validation set; the kept model is the one at the stop epoch (also the
    epoch whose test accuracy is reported), so ``best_val_epoch`` equals
    ``final_epoch`` and ``best_val_loss_epoch`` records the loss minimum.
    """
    if teacher_pred.shape != (graph.num_nodes, graph.num_classes):
        raise ValueError("teacher prediction shape does not match the graph")
    unlabeled = np.setdiff1d(np.arange(graph.num_nodes), split.train)
    if unlabeled.size == 0:
        raise ValueError("no unlabeled nodes to distill on")
    start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    theta = init_cpf(rng, graph, cfg.hidden_dim)
    struct = plp_structure(graph)
    tensors = theta.tensors()
    state = tc.AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)

    labels = graph.labels
    report = TrainReport(best_val_epoch=0, final_epoch=0)
    best_val_loss = np.inf
    since_improve = 0

    for epoch in range(1, cfg.max_epochs + 1):
        tape = tc.Tape()
        _, out = cpf_forward(
            theta,
            graph,
            split,
            cfg,
            tape=tape,
            rng=rng,
            training=True,
            structure=struct,
            force_alpha_zero=force_alpha_zero,
        )
        loss, grad_out = tc.l2_distill_loss(out.value, teacher_pred, unlabeled)
        for t in tensors.values():
            t.zero_grad()
        out.add_grad(grad_out)
        tape.backward()
        grads = {
            name: t.grad if t.grad is not None else np.zeros_like(t.value)
            for name, t in tensors.items()
        }
        tc.adam_step(tensors, grads, state)

        eval_probs, _ = cpf_forward(
            theta, graph, split, cfg, structure=struct, force_alpha_zero=force_alpha_zero
        )
        val_loss, _ = tc.l2_distill_loss(eval_probs, teacher_pred, split.val)
        report.train_loss.append(loss)
        report.val_loss.append(val_loss)
        report.val_accuracy.append(evaluate(eval_probs, labels, split.val))
        report.final_epoch = epoch
        report.test_accuracy = evaluate(eval_probs, labels, split.test)
        report.predictions = eval_probs

        if val_loss < best_val_loss:
            best_val_loss = val_loss
            report.best_val_loss_epoch = epoch
            since_improve = 0
        else:
            since_improve += 1
        if since_improve >= max(cfg.patience, 1):
            break

    report.best_val_epoch = report.final_epoch
    report.best_val_accuracy = report.val_accuracy[-1]
    report.wall_time = time.perf_counter() - start
    return theta, report


def predict_cpf(graph: Graph, split: Split, theta: CpfParams, cfg: CpfConfig) -> np.ndarray:
    """Eval-mode student predictions (training rows stay clamped)."""
    probs, _ = cpf_forward(theta, graph, split, cfg)
    return probs


def extract_alpha(theta: CpfParams) -> np.ndarray:
    """Per-node balance alpha_v = sigmoid(balance logit), in (0, 1)."""
    return expit(theta.balance.value)


def cpf_grid_candidates(grids: dict | None = None, base: dict | None = None) -> list:
    defaults = dict(CPF_GRID)
    if grids:
        defaults.update({k: tuple(v) for k, v in grids.items()})
    base = dict(base or {})
    keys = [k for k in ("mlp_dropout", "lr", "weight_decay") if k in defaults]
    out = []
    for combo in product(*(defaults[k] for k in keys)):
        kwargs = dict(zip(keys, combo))
        kwargs.update(base)
        out.append(CpfConfig(**kwargs))
    return out


def cpf_grid_search(
    graph: Graph,
    split: Split,
    teacher_pred: np.ndarray,
    grids: dict | None = None,
    *,
    base: dict | None = None,
    log: list | None = None,
) -> CpfConfig:
    """Pick the student config with the best validation accuracy at stop."""
    candidates = cpf_grid_candidates(grids, base)
    if not candidates:
        raise ValueError("empty hyperparameter grid")
    best_cfg = None
    best_score = -np.inf
    for cfg in candidates:
        _, report = cpf_train(graph, split, teacher_pred, cfg)
        if log is not None:
            log.append(
                {
                    "config": asdict(cfg),
                    "val_accuracy": report.best_val_accuracy,
                    "test_accuracy": report.test_accuracy,
                }
            )
        if report.best_val_accuracy > best_score:
            best_score = report.best_val_accuracy
            best_cfg = cfg
    return best_cfg


def with_seed(cfg: CpfConfig, seed: int) -> CpfConfig:
    return replace(cfg, seed=seed)


def save_alpha(path, alpha: np.ndarray) -> Path:
    """Dump per-node alpha values as ``node<TAB>alpha`` lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{node}\t{value:.10g}" for node, value in enumerate(alpha)]
    path.write_text("\n".join(lines) + "\n")
    return path


def params_from_checkpoint(payload: dict):
    """Rebuild (CpfParams, CpfConfig) from a ``model_kind == "cpf"`` payload."""
    if payload["model_kind"] != "cpf":
        raise ValueError(f"expected a cpf checkpoint, got {payload['model_kind']!r}")
    cfg = CpfConfig(**payload["config"])
    arrays = checkpoint_arrays(payload)
    theta = CpfParams(
        mlp=MlpParams(
            w1=tc.parameter(arrays["w1"]),
            b1=tc.parameter(arrays["b1"]),
            w2=tc.parameter(arrays["w2"]),
            b2=tc.parameter(arrays["b2"]),
        ),
        confidence=tc.parameter(arrays["confidence"]),
        balance=tc.parameter(arrays["balance"]),
    )
    return theta, cfg
