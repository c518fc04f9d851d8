"""Experiment harness: indicators, training, distillation, selection, analysis.

Each command writes its outputs plus a ``manifest.json`` (dataset hash,
hyperparameters, seeds, package version) into the chosen output
directory; reruns with an identical manifest produce identical CSVs.
Accuracies in CSV/JSON outputs are percentages rounded to two decimals.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import multiprocessing
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pandas as pd

import hmsf
from hmsf import analysis as analysismod
from hmsf import cpf as cpfmod
from hmsf import models, selection
from hmsf.graphdata import (
    average_degree,
    build_neighborhoods,
    edge_homophily,
    load_graph,
    node_homophily,
    resolve_split,
)

SCHEMES = {"h2gcn": "h2gcn_48_20_32", "gcn": "gcn_20_per_class"}


def parse_seeds(spec: str) -> list[int]:
    """Accept "0..9", "0,2,5" or a single integer."""
    spec = spec.strip()
    if ".." in spec:
        lo, hi = spec.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(tok) for tok in spec.split(",") if tok]


def resolve_data_dir(arg: str) -> Path:
    p = Path(arg)
    if p.is_dir():
        return p
    root = os.environ.get("HMSF_DATA_ROOT")
    if root and (Path(root) / arg).is_dir():
        return Path(root) / arg
    raise FileNotFoundError(f"dataset directory {arg!r} not found (HMSF_DATA_ROOT={root!r})")


def dataset_hash(data_dir: Path) -> str:
    h = hashlib.sha256()
    names = ["graph.json", "edges.tsv", "features.tsv", "labels.tsv"]
    names += sorted(str(p.relative_to(data_dir)) for p in (data_dir / "splits").glob("*.json"))
    for name in names:
        path = data_dir / name
        if path.exists():
            h.update(name.encode())
            h.update(path.read_bytes())
    return h.hexdigest()


def pct(x: float) -> float:
    return float(round(100.0 * float(x), 2))


def write_manifest(out_dir: Path, command: str, data_dir: Path, params: dict, seeds=None):
    manifest = {
        "command": command,
        "package_version": hmsf.__version__,
        "dataset_hash": dataset_hash(data_dir),
        "params": params,
        "seeds": seeds or [],
        "blas_threads": {
            var: os.environ.get(var)
            for var in (
                "OMP_NUM_THREADS",
                "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS",
                "NUMBA_NUM_THREADS",
            )
        },
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def results_csv(rows: list[dict], out_path: Path, acc_key: str = "test_accuracy"):
    """Per-seed rows plus trailing mean/std rows, stable column order."""
    df = pd.DataFrame(rows)
    accs = np.array([r[acc_key] for r in rows], dtype=np.float64)
    for label, value in (("mean", accs.mean()), ("std", accs.std())):
        tail = {k: "" for k in df.columns}
        tail.update({"seed": label, acc_key: round(float(value), 2)})
        df = pd.concat([df, pd.DataFrame([tail])], ignore_index=True)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(out_path, index=False)
    return float(accs.mean()), float(accs.std())


def _out_dir(args) -> Path:
    return Path(args.out) if args.out else Path("runs") / args.command


def _grid_overrides(args, keys: dict) -> dict | None:
    grids = {}
    for flag, grid_key in keys.items():
        value = getattr(args, flag)
        if value:
            grids[grid_key] = tuple(value)
    return grids or None


# ---------------------------------------------------------------------------
# indicators


def cmd_indicators(args) -> None:
    data_dir = resolve_data_dir(args.data)
    g = load_graph(data_dir)
    record = {
        "dataset": g.name,
        "nodes": g.num_nodes,
        "edges": g.num_edges,
        "classes": g.num_classes,
        "features": g.num_features,
        "average_degree": round(average_degree(g), 2),
        "edge_homophily": round(edge_homophily(g), 2),
    }
    if args.teacher:
        payload = models.load_checkpoint(args.teacher)
        params, cfg = models.params_from_checkpoint(payload)
        pred = models.predict(g, payload["model_kind"], params, cfg)
        record["estimated_homophily"] = round(selection.estimate_homophily(g, pred), 2)
    for key, value in record.items():
        print(f"{key}={value}")
    if args.out:
        out = _out_dir(args)
        out.mkdir(parents=True, exist_ok=True)
        (out / "indicators.json").write_text(json.dumps(record, indent=2, sort_keys=True))
        write_manifest(out, "indicators", data_dir, {"data": str(data_dir)})


# ---------------------------------------------------------------------------
# train


def _train_worker(payload):
    graph, split, cfg = payload
    params, report = models.train_supervised(graph, split, cfg)
    return params, report


def _fanout(jobs: int, worker, payloads: list):
    if jobs <= 1:
        return [worker(p) for p in payloads]
    # spawn: the parallel SpMM threading layer is not fork-safe
    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
        return list(pool.map(worker, payloads))


def cmd_train(args) -> None:
    data_dir = resolve_data_dir(args.data)
    g = load_graph(data_dir, row_normalize=args.row_normalize)
    scheme = SCHEMES[args.scheme]
    seeds = parse_seeds(args.seeds)
    splits = {s: resolve_split(g, data_dir, scheme, s) for s in seeds}
    out = _out_dir(args)

    base = {
        "seed": seeds[0],
        "hidden_dim": args.hidden_dim,
        "lr": args.lr,
        "max_epochs": args.max_epochs,
        "patience": args.patience,
    }
    grids = _grid_overrides(
        args,
        {
            "dropout_grid": "dropout",
            "wd_grid": "weight_decay",
            "activation_grid": "activation",
            "k_grid": "layers",
        },
    )
    search_log = []
    cfg = models.grid_search(g, splits[seeds[0]], args.model, grids, base=base, log=search_log)

    payloads = [(g, splits[s], models.with_seed(cfg, s)) for s in seeds]
    results = _fanout(args.jobs, _train_worker, payloads)

    rows = []
    for seed, (params, report) in zip(seeds, results):
        ckpt = out / "checkpoints" / f"{args.model}_{args.scheme}_seed{seed}.json"
        models.save_checkpoint(ckpt, args.model, params, models.with_seed(cfg, seed))
        rows.append(
            {
                "dataset": g.name,
                "model": args.model,
                "scheme": args.scheme,
                "seed": seed,
                "test_accuracy": pct(report.test_accuracy),
                "val_accuracy": pct(report.best_val_accuracy),
                "best_val_epoch": report.best_val_epoch,
                "final_epoch": report.final_epoch,
            }
        )
    mean, std = results_csv(rows, out / "results.csv")
    (out / "grid_search.json").write_text(
        json.dumps({"chosen": asdict(cfg), "candidates": search_log}, indent=2)
    )
    write_manifest(
        out,
        "train",
        data_dir,
        {
            "data": str(data_dir),
            "model": args.model,
            "scheme": args.scheme,
            "row_normalize": args.row_normalize,
            "base": base,
            "grids": {k: list(v) for k, v in (grids or {}).items()},
        },
        seeds,
    )
    print(f"{args.model} on {g.name} ({args.scheme} splits): {mean:.2f} +- {std:.2f}")


# ---------------------------------------------------------------------------
# distill


def _teacher_for_seed(teacher_arg: str, scheme_alias: str, seed: int) -> Path:
    p = Path(teacher_arg)
    if p.is_file():
        return p
    if p.is_dir():
        hits = sorted(p.glob(f"*_{scheme_alias}_seed{seed}.json"))
        if len(hits) == 1:
            return hits[0]
        raise FileNotFoundError(
            f"expected exactly one teacher checkpoint for seed {seed} in {p}, found {len(hits)}"
        )
    raise FileNotFoundError(f"teacher checkpoint {teacher_arg!r} not found")


def _load_teacher_predictions(g, ckpt_path: Path):
    payload = models.load_checkpoint(ckpt_path)
    kind = payload["model_kind"]
    params, cfg = models.params_from_checkpoint(payload)
    try:
        pred = models.predict(g, kind, params, cfg)
    except ValueError as exc:
        raise ValueError(f"checkpoint/model mismatch for {ckpt_path}: {exc}") from exc
    return kind, pred


def _distill_worker(payload):
    graph, split, teacher_pred, cfg, force_alpha_zero = payload
    return cpfmod.cpf_train(graph, split, teacher_pred, cfg, force_alpha_zero=force_alpha_zero)


def cmd_distill(args) -> None:
    data_dir = resolve_data_dir(args.data)
    g = load_graph(data_dir, row_normalize=args.row_normalize)
    scheme = SCHEMES[args.scheme]
    seeds = parse_seeds(args.seeds)
    splits = {s: resolve_split(g, data_dir, scheme, s) for s in seeds}
    out = _out_dir(args)

    teacher_kind = None
    teacher_preds = {}
    for seed in seeds:
        kind, pred = _load_teacher_predictions(g, _teacher_for_seed(args.teacher, args.scheme, seed))
        teacher_kind = teacher_kind or kind
        if kind != teacher_kind:
            raise ValueError(f"mixed teacher kinds under {args.teacher!r}: {kind} vs {teacher_kind}")
        teacher_preds[seed] = pred

    base = {
        "seed": seeds[0],
        "k2": args.k2,
        "plp_dropout": args.plp_dropout,
        "hidden_dim": args.hidden_dim,
        "max_epochs": args.max_epochs,
        "patience": args.patience,
    }
    grids = _grid_overrides(
        args, {"mlp_dropout_grid": "mlp_dropout", "lr_grid": "lr", "wd_grid": "weight_decay"}
    )
    search_log = []
    cfg = cpfmod.cpf_grid_search(
        g, splits[seeds[0]], teacher_preds[seeds[0]], grids, base=base, log=search_log
    )

    payloads = [
        (g, splits[s], teacher_preds[s], cpfmod.with_seed(cfg, s), args.force_alpha_zero)
        for s in seeds
    ]
    results = _fanout(args.jobs, _distill_worker, payloads)

    model_name = f"cpf({teacher_kind})"
    rows = []
    for seed, (theta, report) in zip(seeds, results):
        models.save_checkpoint(
            out / "checkpoints" / f"cpf_{teacher_kind}_{args.scheme}_seed{seed}.json",
            "cpf",
            theta,
            cpfmod.with_seed(cfg, seed),
        )
        cpfmod.save_alpha(out / "alpha" / f"seed{seed}.tsv", cpfmod.extract_alpha(theta))
        rows.append(
            {
                "dataset": g.name,
                "model": model_name,
                "scheme": args.scheme,
                "seed": seed,
                "test_accuracy": pct(report.test_accuracy),
                "val_accuracy": pct(report.best_val_accuracy),
                "best_val_epoch": report.best_val_epoch,
                "final_epoch": report.final_epoch,
            }
        )
    mean, std = results_csv(rows, out / "results.csv")
    (out / "grid_search.json").write_text(
        json.dumps({"chosen": asdict(cfg), "candidates": search_log}, indent=2)
    )
    write_manifest(
        out,
        "distill",
        data_dir,
        {
            "data": str(data_dir),
            "teacher": str(args.teacher),
            "teacher_kind": teacher_kind,
            "scheme": args.scheme,
            "row_normalize": args.row_normalize,
            "force_alpha_zero": args.force_alpha_zero,
            "base": base,
            "grids": {k: list(v) for k, v in (grids or {}).items()},
        },
        seeds,
    )
    print(f"{model_name} on {g.name} ({args.scheme} splits): {mean:.2f} +- {std:.2f}")


# ---------------------------------------------------------------------------
# select


def _gnn_base(args, seeds) -> dict:
    return {
        "seed": seeds[0],
        "hidden_dim": args.hidden_dim,
        "lr": args.lr,
        "max_epochs": args.gnn_max_epochs,
        "patience": args.gnn_patience,
    }


def _cpf_base(args, seeds) -> dict:
    return {
        "seed": seeds[0],
        "k2": args.k2,
        "plp_dropout": args.plp_dropout,
        "hidden_dim": args.hidden_dim,
        "max_epochs": args.cpf_max_epochs,
        "patience": args.cpf_patience,
    }


def _teacher_grids(args) -> dict | None:
    return _grid_overrides(
        args,
        {
            "dropout_grid": "dropout",
            "wd_grid": "weight_decay",
            "activation_grid": "activation",
            "k_grid": "layers",
        },
    )


def _cpf_grids(args) -> dict | None:
    return _grid_overrides(
        args,
        {
            "cpf_mlp_dropout_grid": "mlp_dropout",
            "cpf_lr_grid": "lr",
            "cpf_wd_grid": "weight_decay",
        },
    )


def cmd_select(args) -> None:
    data_dir = resolve_data_dir(args.data)
    g = load_graph(data_dir, row_normalize=args.row_normalize)
    scheme = SCHEMES[args.scheme]
    seeds = parse_seeds(args.seeds)
    splits = {s: resolve_split(g, data_dir, scheme, s) for s in seeds}
    out = _out_dir(args)

    decisions, summary = selection.run_pipeline(
        g,
        splits,
        args.beta,
        args.gamma,
        teacher_grids=_teacher_grids(args),
        cpf_grids=_cpf_grids(args),
        gnn_base=_gnn_base(args, seeds),
        cpf_base=_cpf_base(args, seeds),
    )
    out.mkdir(parents=True, exist_ok=True)
    (out / "decisions.json").write_text(
        json.dumps([d.to_record() for d in decisions], indent=2)
    )
    rows = [
        {
            "dataset": d.dataset,
            "model": "hmsf",
            "scheme": args.scheme,
            "seed": d.seed,
            "teacher": d.teacher,
            "final": d.final,
            "h_estimated": round(d.h_estimated, 4),
            "test_accuracy": pct(d.test_accuracy),
        }
        for d in decisions
    ]
    results_csv(rows, out / "results.csv")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    write_manifest(
        out,
        "select",
        data_dir,
        {
            "data": str(data_dir),
            "scheme": args.scheme,
            "beta": args.beta,
            "gamma": args.gamma,
            "row_normalize": args.row_normalize,
            "gnn_base": _gnn_base(args, seeds),
            "cpf_base": _cpf_base(args, seeds),
        },
        seeds,
    )
    print(
        f"hmsf on {g.name}: teacher={summary['teacher']} "
        f"mean={summary['mean_test_accuracy']:.2f} +- {summary['std_test_accuracy']:.2f}"
    )


# ---------------------------------------------------------------------------
# sweep


def cmd_sweep(args) -> None:
    data_dir = resolve_data_dir(args.data)
    g = load_graph(data_dir, row_normalize=args.row_normalize)
    scheme = SCHEMES[args.scheme]
    seeds = parse_seeds(args.seeds)
    splits = {s: resolve_split(g, data_dir, scheme, s) for s in seeds}
    out = _out_dir(args)

    matrix = selection.run_strategy_matrix(
        g,
        splits,
        teacher_grids=_teacher_grids(args),
        cpf_grids=_cpf_grids(args),
        gnn_base=_gnn_base(args, seeds),
        cpf_base=_cpf_base(args, seeds),
    )
    dbar = average_degree(g)
    rows = []
    best = None
    for beta in args.betas:
        for gamma in args.gammas:
            _, mean_val = selection.hmsf_from_matrix(matrix, dbar, beta, gamma, "val_accuracy")
            _, mean_test = selection.hmsf_from_matrix(matrix, dbar, beta, gamma, "test_accuracy")
            rows.append(
                {
                    "beta": beta,
                    "gamma": gamma,
                    "mean_val_accuracy": pct(mean_val),
                    "mean_test_accuracy": pct(mean_test),
                }
            )
            if best is None or mean_val > best[0]:
                best = (mean_val, beta, gamma, mean_test)
    out.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows).to_csv(out / "sweep.csv", index=False)
    strategy_means = {
        name: pct(float(np.mean([c["test_accuracy"] for c in matrix[name]["per_seed"].values()])))
        for name in selection.STRATEGIES
    }
    (out / "best.json").write_text(
        json.dumps(
            {
                "beta": best[1],
                "gamma": best[2],
                "mean_val_accuracy": pct(best[0]),
                "mean_test_accuracy": pct(best[3]),
                "strategy_means": strategy_means,
            },
            indent=2,
            sort_keys=True,
        )
    )
    write_manifest(
        out,
        "sweep",
        data_dir,
        {
            "data": str(data_dir),
            "scheme": args.scheme,
            "betas": list(args.betas),
            "gammas": list(args.gammas),
            "row_normalize": args.row_normalize,
        },
        seeds,
    )
    print(f"best (beta, gamma) on {g.name}: ({best[1]}, {best[2]}) val={pct(best[0]):.2f}")


# ---------------------------------------------------------------------------
# analyze


def cmd_analyze(args) -> None:
    data_dir = resolve_data_dir(args.data)
    g = load_graph(data_dir)  # raw features by design
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "variance":
        hoods = build_neighborhoods(g)
        df = analysismod.hop_aggregate_variance(g, hoods)
        df.to_csv(out / "variance.csv", index=False)
        meta = {"variance": "population", "features": "raw (no row normalization)"}
        (out / "variance_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        print(f"wrote {len(df)} variance records for {g.name}")
    else:
        if not args.cpf:
            raise ValueError("--cpf checkpoint is required for the alpha analysis")
        payload = models.load_checkpoint(args.cpf)
        theta, _ = cpfmod.params_from_checkpoint(payload)
        alpha = cpfmod.extract_alpha(theta)
        records, summary = analysismod.alpha_vs_homophily(g, alpha, node_homophily(g))
        records.to_csv(out / "alpha.csv", index=False)
        (out / "alpha_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        print(f"mean alpha on {g.name}: {summary['mean_alpha']:.4f} over {summary['count']} nodes")
    write_manifest(
        out,
        "analyze",
        data_dir,
        {"data": str(data_dir), "kind": args.kind, "cpf": str(args.cpf) if args.cpf else None},
    )


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hmsf",
        description="Node classification with degree/homophily-driven model selection",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--data", required=True, help="dataset directory or name under HMSF_DATA_ROOT")
        p.add_argument("--out", default=None, help="output directory (default: runs/<command>)")

    p = sub.add_parser("indicators", help="print dataset indicators")
    add_common(p)
    p.add_argument("--teacher", default=None, help="teacher checkpoint for the homophily estimate")
    p.set_defaults(func=cmd_indicators)

    p = sub.add_parser("train", help="train a supervised model over seeds")
    add_common(p)
    p.add_argument("--model", required=True, choices=models.MODEL_KINDS)
    p.add_argument("--scheme", default="h2gcn", choices=sorted(SCHEMES))
    p.add_argument("--seeds", default="0..9")
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--max-epochs", type=int, default=1000)
    p.add_argument("--patience", type=int, default=200)
    p.add_argument("--dropout-grid", type=float, nargs="+", default=None)
    p.add_argument("--wd-grid", type=float, nargs="+", default=None)
    p.add_argument("--activation-grid", nargs="+", default=None, choices=["relu", "none"])
    p.add_argument("--k-grid", type=int, nargs="+", default=None)
    p.add_argument("--row-normalize", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", help="distill a trained teacher into the CPF student")
    add_common(p)
    p.add_argument("--teacher", required=True, help="checkpoint file or checkpoint directory")
    p.add_argument("--scheme", default="h2gcn", choices=sorted(SCHEMES))
    p.add_argument("--seeds", default="0..9")
    p.add_argument("--k2", type=int, default=8)
    p.add_argument("--plp-dropout", type=float, default=0.8)
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--max-epochs", type=int, default=2000)
    p.add_argument("--patience", type=int, default=200)
    p.add_argument("--mlp-dropout-grid", type=float, nargs="+", default=None)
    p.add_argument("--lr-grid", type=float, nargs="+", default=None)
    p.add_argument("--wd-grid", type=float, nargs="+", default=None)
    p.add_argument("--force-alpha-zero", action="store_true", help="debug: pin alpha to 0")
    p.add_argument("--row-normalize", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_distill)

    def add_select_like(p):
        add_common(p)
        p.add_argument("--scheme", default="h2gcn", choices=sorted(SCHEMES))
        p.add_argument("--seeds", default="0..9")
        p.add_argument("--hidden-dim", type=int, default=64)
        p.add_argument("--lr", type=float, default=0.01)
        p.add_argument("--gnn-max-epochs", type=int, default=1000)
        p.add_argument("--gnn-patience", type=int, default=200)
        p.add_argument("--dropout-grid", type=float, nargs="+", default=None)
        p.add_argument("--wd-grid", type=float, nargs="+", default=None)
        p.add_argument("--activation-grid", nargs="+", default=None, choices=["relu", "none"])
        p.add_argument("--k-grid", type=int, nargs="+", default=None)
        p.add_argument("--k2", type=int, default=8)
        p.add_argument("--plp-dropout", type=float, default=0.8)
        p.add_argument("--cpf-max-epochs", type=int, default=2000)
        p.add_argument("--cpf-patience", type=int, default=200)
        p.add_argument("--cpf-mlp-dropout-grid", type=float, nargs="+", default=None)
        p.add_argument("--cpf-lr-grid", type=float, nargs="+", default=None)
        p.add_argument("--cpf-wd-grid", type=float, nargs="+", default=None)
        p.add_argument("--row-normalize", action="store_true")

    p = sub.add_parser("select", help="run the two-step selection pipeline")
    add_select_like(p)
    p.add_argument("--beta", type=float, default=10.0)
    p.add_argument("--gamma", type=float, default=0.6)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("sweep", help="sensitivity sweep over beta/gamma boundaries")
    add_select_like(p)
    p.add_argument("--betas", type=float, nargs="+", default=[2.0, 10.0, 50.0, 100.0])
    p.add_argument("--gammas", type=float, nargs="+", default=[0.2, 0.4, 0.6, 0.8])
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="write the variance or alpha analysis CSV")
    p.add_argument("kind", choices=["variance", "alpha"])
    add_common(p)
    p.add_argument("--cpf", default=None, help="trained CPF checkpoint (alpha analysis)")
    p.set_defaults(func=cmd_analyze)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
        return 0
    except selection.PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # surface the failing stage, exit nonzero
        print(f"[{args.command}] error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
