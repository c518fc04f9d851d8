"""GCN, H2GCN and MLP definitions plus the shared supervised training loop.

Training is full batch: every epoch runs one forward/backward pass over
the whole graph, an Adam step, and an eval-mode pass for the validation
and test curves.  Early stopping watches the validation loss; model
selection picks the epoch with the highest validation accuracy (earliest
epoch on ties) and the returned parameters are the snapshot from that
epoch.
"""

from __future__ import annotations

import json
import time
import weakref
from dataclasses import asdict, dataclass, field, replace
from itertools import product
from pathlib import Path

import numpy as np

from hmsf import tensorcore as tc
from hmsf.graphdata import Graph, Split, build_neighborhoods

MODEL_KINDS = ("gcn", "h2gcn", "mlp")

# Hyperparameter grids searched on the validation set.  GNN learning rate
# is fixed at 0.01; H2GCN additionally varies its activation and depth.
GCN_GRID = {"dropout": (0.0, 0.5), "weight_decay": (0.0005, 0.00001)}
H2GCN_GRID = {
    "dropout": (0.0, 0.5),
    "weight_decay": (0.0005, 0.00001),
    "activation": ("relu", "none"),
    "layers": (1, 2),
}


@dataclass(frozen=True)
class TrainConfig:
    model_kind: str
    lr: float = 0.01
    weight_decay: float = 0.0005
    dropout: float = 0.0
    activation: str = "relu"
    hidden_dim: int = 64
    layers: int = 2
    max_epochs: int = 1000
    patience: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.model_kind!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")
        if self.activation not in tc.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class TrainReport:
    """Curves and selection outcome of one training session."""

    best_val_epoch: int
    final_epoch: int
    train_loss: list = field(repr=False, default_factory=list)
    val_loss: list = field(repr=False, default_factory=list)
    val_accuracy: list = field(repr=False, default_factory=list)
    test_accuracy: float = 0.0
    best_val_accuracy: float = 0.0
    best_val_loss_epoch: int = 0
    wall_time: float = 0.0
    predictions: np.ndarray | None = field(repr=False, default=None)


@dataclass
class GcnParams:
    """Weight chain W_0..W_{K1-1}; no biases, matching the original model."""

    weights: list

    def tensors(self) -> dict:
        return {f"w{k}": w for k, w in enumerate(self.weights)}


@dataclass
class H2gcnParams:
    w_embed: tc.Tensor  # F x p
    w_class: tc.Tensor  # (2^{K+1} - 1) p x |Y|
    rounds: int

    def tensors(self) -> dict:
        return {"w_embed": self.w_embed, "w_class": self.w_class}


@dataclass
class MlpParams:
    w1: tc.Tensor
    b1: tc.Tensor
    w2: tc.Tensor
    b2: tc.Tensor

    def tensors(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def init_gcn(rng, num_features: int, hidden_dim: int, num_classes: int) -> GcnParams:
    return GcnParams(
        weights=[
            tc.parameter(tc.glorot(rng, num_features, hidden_dim)),
            tc.parameter(tc.glorot(rng, hidden_dim, num_classes)),
        ]
    )


def init_h2gcn(rng, num_features: int, hidden_dim: int, num_classes: int, rounds: int) -> H2gcnParams:
    width = (2 ** (rounds + 1) - 1) * hidden_dim
    return H2gcnParams(
        w_embed=tc.parameter(tc.glorot(rng, num_features, hidden_dim)),
        w_class=tc.parameter(tc.glorot(rng, width, num_classes)),
        rounds=rounds,
    )


def init_mlp(rng, num_features: int, hidden_dim: int, num_classes: int) -> MlpParams:
    return MlpParams(
        w1=tc.parameter(tc.glorot(rng, num_features, hidden_dim)),
        b1=tc.parameter(np.zeros(hidden_dim)),
        w2=tc.parameter(tc.glorot(rng, hidden_dim, num_classes)),
        b2=tc.parameter(np.zeros(num_classes)),
    )


def _as_tensor(x) -> tc.Tensor:
    return x if isinstance(x, tc.Tensor) else tc.Tensor(x)


# Normalized operators depend only on the graph, so they are shared across
# the grid-search candidates and seeds that train on the same Graph object.
_OPERATOR_CACHE = weakref.WeakKeyDictionary()


def graph_operators(graph: Graph, kind: str) -> dict:
    ops = _OPERATOR_CACHE.setdefault(graph, {})
    if kind == "gcn" and "gcn" not in ops:
        ops["gcn"] = tc.gcn_normalize(graph)
    if kind == "h2gcn" and "h2gcn" not in ops:
        hoods = build_neighborhoods(graph)
        ops["h2gcn"] = (tc.h2gcn_normalize(hoods, 1), tc.h2gcn_normalize(hoods, 2))
    return ops


def gcn_forward(
    params: GcnParams,
    operator: tc.SparseOperator,
    x,
    *,
    tape=None,
    rng=None,
    training: bool = False,
    dropout: float = 0.0,
):
    """Two-layer graph convolution; returns (probabilities, logits tensor).

    Dropout is applied to the input of each layer in training mode; the
    hidden layer uses ReLU and the output layer feeds straight into the
    row softmax.  Each layer projects before aggregating (A (H W) rather
    than (A H) W), which is the same composition with far cheaper sparse
    products.
    """
    h = _as_tensor(x)
    last = len(params.weights) - 1
    for k, w in enumerate(params.weights):
        h = tc.dropout(tape, h, dropout, rng, training)
        h = tc.matmul(tape, h, w)
        h = tc.spmm(tape, operator, h)
        if k < last:
            h = tc.relu(tape, h)
    return tc.softmax(h.value), h


def h2gcn_forward(
    params: H2gcnParams,
    s1: tc.SparseOperator,
    s2: tc.SparseOperator,
    x,
    *,
    tape=None,
    rng=None,
    training: bool = False,
    dropout: float = 0.0,
    activation: str = "relu",
):
    """Depth-separated aggregation; returns (probabilities, logits tensor).

    Round k maps the previous representation R to CONCAT(S1 R, S2 R), so
    the concatenation of all rounds has width (2^{K+1} - 1) p.  Dropout
    hits only the final concatenated representation.
    """
    act = tc.ACTIVATIONS[activation]
    r0 = act(tape, tc.matmul(tape, _as_tensor(x), params.w_embed))
    reps = [r0]
    cur = r0
    for _ in range(params.rounds):
        cur = tc.concat_cols(tape, [tc.spmm(tape, s1, cur), tc.spmm(tape, s2, cur)])
        reps.append(cur)
    final = tc.concat_cols(tape, reps)
    final = tc.dropout(tape, final, dropout, rng, training)
    logits = tc.matmul(tape, final, params.w_class)
    return tc.softmax(logits.value), logits


def mlp_forward(
    params: MlpParams,
    x,
    *,
    tape=None,
    rng=None,
    training: bool = False,
    dropout: float = 0.0,
):
    """Two-layer MLP over raw features; graph structure plays no part."""
    h = tc.dropout(tape, _as_tensor(x), dropout, rng, training)
    h = tc.relu(tape, tc.add_bias(tape, tc.matmul(tape, h, params.w1), params.b1))
    h = tc.dropout(tape, h, dropout, rng, training)
    logits = tc.add_bias(tape, tc.matmul(tape, h, params.w2), params.b2)
    return tc.softmax(logits.value), logits


def evaluate(pred: np.ndarray, labels: np.ndarray, mask) -> float:
    """Accuracy of argmax predictions over ``mask`` (ties -> lowest class)."""
    mask = np.asarray(mask)
    if mask.size == 0:
        raise ValueError("evaluate over an empty mask")
    return float(np.mean(np.argmax(pred[mask], axis=1) == labels[mask]))


def build_model(graph: Graph, cfg: TrainConfig, rng):
    """Initialize parameters and a forward closure for ``cfg.model_kind``."""
    x = tc.Tensor(graph.features)
    if cfg.model_kind == "gcn":
        params = init_gcn(rng, graph.num_features, cfg.hidden_dim, graph.num_classes)
        op = graph_operators(graph, "gcn")["gcn"]

        def forward(tape, frng, training):
            return gcn_forward(
                params, op, x, tape=tape, rng=frng, training=training, dropout=cfg.dropout
            )

    elif cfg.model_kind == "h2gcn":
        params = init_h2gcn(rng, graph.num_features, cfg.hidden_dim, graph.num_classes, cfg.layers)
        s1, s2 = graph_operators(graph, "h2gcn")["h2gcn"]

        def forward(tape, frng, training):
            return h2gcn_forward(
                params,
                s1,
                s2,
                x,
                tape=tape,
                rng=frng,
                training=training,
                dropout=cfg.dropout,
                activation=cfg.activation,
            )

    else:
        params = init_mlp(rng, graph.num_features, cfg.hidden_dim, graph.num_classes)

        def forward(tape, frng, training):
            return mlp_forward(
                params, x, tape=tape, rng=frng, training=training, dropout=cfg.dropout
            )

    return params, forward


def train_supervised(graph: Graph, split: Split, cfg: TrainConfig):
    """Train one model with Adam and early stopping; returns (params, report).

    The validation loss drives early stopping; the reported test accuracy
    and returned parameters come from the epoch with the best validation
    accuracy.
    """
    if split.train.size == 0:
        raise ValueError("cannot train on an empty train set")
    start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    params, forward = build_model(graph, cfg, rng)
    tensors = params.tensors()
    state = tc.AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)

    labels = graph.labels
    report = TrainReport(best_val_epoch=0, final_epoch=0)
    best_val_acc = -np.inf
    best_val_loss = np.inf
    since_improve = 0
    snapshot = None

    for epoch in range(1, cfg.max_epochs + 1):
        tape = tc.Tape()
        probs, logits = forward(tape, rng, True)
        loss, grad_logits = tc.cross_entropy(probs, labels, split.train)
        for t in tensors.values():
            t.zero_grad()
        logits.add_grad(grad_logits)
        tape.backward()
        grads = {
            name: t.grad if t.grad is not None else np.zeros_like(t.value)
            for name, t in tensors.items()
        }
        tc.adam_step(tensors, grads, state)

        eval_probs, _ = forward(None, None, False)
        val_loss, _ = tc.cross_entropy(eval_probs, labels, split.val)
        val_acc = evaluate(eval_probs, labels, split.val)
        report.train_loss.append(loss)
        report.val_loss.append(val_loss)
        report.val_accuracy.append(val_acc)
        report.final_epoch = epoch

        if val_acc > best_val_acc:
            best_val_acc = val_acc
            report.best_val_epoch = epoch
            report.test_accuracy = evaluate(eval_probs, labels, split.test)
            report.predictions = eval_probs
            snapshot = {name: t.value.copy() for name, t in tensors.items()}
        if val_loss < best_val_loss:
            best_val_loss = val_loss
            report.best_val_loss_epoch = epoch
            since_improve = 0
        else:
            since_improve += 1
        if since_improve >= max(cfg.patience, 1):
            break

    for name, t in tensors.items():
        t.value = snapshot[name]
    report.best_val_accuracy = best_val_acc
    report.wall_time = time.perf_counter() - start
    return params, report


def predict(graph: Graph, model_kind: str, params, cfg: TrainConfig) -> np.ndarray:
    """Eval-mode predictions for every node in the graph."""
    if model_kind == "gcn":
        probs, _ = gcn_forward(params, graph_operators(graph, "gcn")["gcn"], graph.features)
    elif model_kind == "h2gcn":
        s1, s2 = graph_operators(graph, "h2gcn")["h2gcn"]
        probs, _ = h2gcn_forward(params, s1, s2, graph.features, activation=cfg.activation)
    elif model_kind == "mlp":
        probs, _ = mlp_forward(params, graph.features)
    else:
        raise ValueError(f"unknown model kind {model_kind!r}")
    return probs


def grid_candidates(model_kind: str, grids: dict | None = None, base: dict | None = None) -> list:
    """Deterministically ordered candidate configs for the grid search."""
    defaults = dict(H2GCN_GRID if model_kind == "h2gcn" else GCN_GRID)
    if grids:
        defaults.update({k: tuple(v) for k, v in grids.items()})
    base = dict(base or {})
    keys = [k for k in ("dropout", "weight_decay", "activation", "layers") if k in defaults]
    out = []
    for combo in product(*(defaults[k] for k in keys)):
        kwargs = dict(zip(keys, combo))
        kwargs.update(base)
        out.append(TrainConfig(model_kind=model_kind, **kwargs))
    return out


def grid_search(
    graph: Graph,
    split: Split,
    model_kind: str,
    grids: dict | None = None,
    *,
    base: dict | None = None,
    log: list | None = None,
) -> TrainConfig:
    """Pick the config with the best validation accuracy (ties -> first).

    ``base`` overrides non-grid fields (seed, epochs, hidden_dim...);
    ``log``, when given, collects one record per candidate.
    """
    candidates = grid_candidates(model_kind, grids, base)
    if not candidates:
        raise ValueError("empty hyperparameter grid")
    best_cfg = None
    best_score = -np.inf
    for cfg in candidates:
        _, report = train_supervised(graph, split, cfg)
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


def with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=seed)


CHECKPOINT_VERSION = 1


def save_checkpoint(path, model_kind: str, params, config) -> Path:
    """Write a JSON checkpoint: kind, config, shapes, flat arrays."""
    tensors = params.tensors()
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_kind": model_kind,
        "config": asdict(config) if not isinstance(config, dict) else config,
        "shapes": {k: list(t.value.shape) for k, t in tensors.items()},
        "arrays": {k: t.value.ravel().tolist() for k, t in tensors.items()},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload))
    return path


def load_checkpoint(path) -> dict:
    payload = json.loads(Path(path).read_text())
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version in {path}")
    return payload


def checkpoint_arrays(payload: dict) -> dict:
    return {
        k: np.asarray(payload["arrays"][k], dtype=np.float64).reshape(payload["shapes"][k])
        for k in payload["arrays"]
    }


def params_from_checkpoint(payload: dict):
    """Rebuild (params, TrainConfig) for a gcn/h2gcn/mlp checkpoint."""
    kind = payload["model_kind"]
    cfg = TrainConfig(**payload["config"])
    arrays = checkpoint_arrays(payload)
    if kind == "gcn":
        weights = [tc.parameter(arrays[f"w{k}"]) for k in range(len(arrays))]
        return GcnParams(weights=weights), cfg
    if kind == "h2gcn":
        return (
            H2gcnParams(
                w_embed=tc.parameter(arrays["w_embed"]),
                w_class=tc.parameter(arrays["w_class"]),
                rounds=cfg.layers,
            ),
            cfg,
        )
    if kind == "mlp":
        return (
            MlpParams(
                w1=tc.parameter(arrays["w1"]),
                b1=tc.parameter(arrays["b1"]),
                w2=tc.parameter(arrays["w2"]),
                b2=tc.parameter(arrays["b2"]),
            ),
            cfg,
        )
    raise ValueError(f"checkpoint holds unknown model kind {kind!r}")
