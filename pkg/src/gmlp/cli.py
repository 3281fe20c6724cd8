"""Command-line surface: train, eval, synth, analyze, complexity.

Exit codes: 0 success, 1 usage or configuration problem, 2 runtime failure
(diverged training, corrupt checkpoint, I/O trouble). All commands are
deterministic under a fixed config and seed; wall-clock timings are kept out
of the deterministic artifacts.

``GMLP_OUT_DIR`` provides the default output directory when a config or
command line does not name one.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import analysis
from .checkpoint import LoadedCheckpoint, load_checkpoint, save_checkpoint, save_model
from .config import OUT_DIR_ENV, RunConfig, load_config
from .data import (
    Dataset,
    halfnoise_generate,
    load_csv,
    normalize,
    save_csv,
    save_norm_stats,
    split,
    synth_bayes_optimal,
    synth_generate,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    GmlpError,
    TrainingDiverged,
)
from .layers import RoutingParams
from .metrics import MetricsWriter
from .model import build, count_complexity, parse_arch
from .tensor import Tensor
from .training import accuracy, config_to_dict, fit, per_class_accuracy
from .analysis import discretize_routing, sparsity_report


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# data assembly for train


def _load_run_data(cfg: RunConfig):
    seed = cfg.train.seed
    if cfg.data == "synth":
        full = synth_generate(cfg.synth_net(), cfg.synth_n, seed=cfg.synth_seed)
        train, test = split(full, cfg.test_fraction, seed=cfg.synth_seed)
    elif cfg.data == "halfnoise":
        full = halfnoise_generate(
            cfg.halfnoise_n,
            cfg.halfnoise_signal,
            cfg.halfnoise_noise,
            cfg.halfnoise_classes,
            seed=cfg.halfnoise_seed,
        )
        train, test = split(full, cfg.test_fraction, seed=cfg.halfnoise_seed)
    else:
        label: str | int = cfg.label_column
        if isinstance(label, str) and label.lstrip("-").isdigit():
            label = int(label)
        train = load_csv(cfg.train_csv, label_column=label, has_header=cfg.has_header)
        if cfg.test_csv:
            test = load_csv(cfg.test_csv, label_column=label, has_header=cfg.has_header)
        else:
            train, test = split(train, cfg.test_fraction, seed=seed)
    if cfg.train.val_fraction > 0:
        train, val = split(train, cfg.train.val_fraction, seed=seed)
    else:
        val = train
    return train, val, test


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out_dir = args.out_dir or cfg.resolve_out_dir()
    os.makedirs(out_dir, exist_ok=True)

    train, val, test = _load_run_data(cfg)
    (train_n, val_n, test_n), stats = normalize(train, val, test)
    save_norm_stats(stats, os.path.join(out_dir, "norm_stats.json"))

    spec = parse_arch(cfg.arch, d=train_n.d, seed=cfg.train.seed, branching=cfg.branching)
    if spec.n_classes != train_n.n_classes:
        raise ConfigError(
            f"arch outputs {spec.n_classes} classes but data has {train_n.n_classes}"
        )
    model = build(spec)
    metadata = {
        "config": cfg.to_dict(),
        "norm_stats": stats,
        "n_train": train_n.n,
        "n_val": val_n.n if cfg.train.val_fraction > 0 else 0,
        "n_test": test_n.n,
    }

    with MetricsWriter(
        os.path.join(out_dir, "metrics.csv"), os.path.join(out_dir, "timing.csv")
    ) as writer:
        result = fit(model, train_n, val_n, cfg.train, test=test_n, on_epoch=writer.write)

    table = discretize_routing(model.routing) if model.routing is not None else None
    save_model(
        os.path.join(out_dir, "model_final.ckpt"),
        model,
        metadata={**metadata, "checkpoint": "final", "epochs_run": len(result.records)},
        routing_table=table,
    )
    if result.best_state is not None:
        best_tau = result.records[result.best_epoch].tau
        best_table = None
        arrays = result.best_state
        psi = dict(arrays).get("gsel.psi")
        if psi is not None:
            routing = RoutingParams(Tensor(psi), best_tau, spec.k, spec.m, spec.d)
            best_table = discretize_routing(routing)
        save_checkpoint(
            os.path.join(out_dir, "model_best.ckpt"),
            spec,
            arrays,
            best_tau,
            metadata={
                **metadata,
                "checkpoint": "best_validation",
                "best_epoch": result.best_epoch,
            },
            routing_table=best_table,
        )

    report = {
        "epochs_run": len(result.records),
        "best_epoch": result.best_epoch,
        "best_val_accuracy": result.best_val_accuracy,
        "final_val_accuracy": result.records[-1].val_accuracy if result.records else None,
        "final_test_accuracy": accuracy(model, test_n),
        "final_tau": result.final_tau,
        "final_sparsity": sparsity_report(model.routing) if model.routing else None,
        "wall_time_seconds": result.records[-1].wall_time if result.records else 0.0,
    }
    _write_json(os.path.join(out_dir, "train_report.json"), report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# eval


def _normalized_from_manifest(ds: Dataset, manifest: dict) -> Dataset:
    stats = manifest.get("metadata", {}).get("norm_stats")
    if not stats:
        return ds
    names = ds.feature_names or [f"f{j}" for j in range(ds.d)]
    mu = np.zeros(ds.d)
    sigma = np.ones(ds.d)
    for j, name in enumerate(names):
        if name in stats:
            mu[j] = stats[name]["mu"]
            sigma[j] = stats[name]["sigma"]
    safe = np.where(sigma == 0.0, 1.0, sigma)
    xn = (ds.X - mu) / safe
    xn[:, sigma == 0.0] = 0.0
    return Dataset(xn, ds.y, ds.n_classes, ds.feature_names, ds.split_tag)


def _predict_threaded(model, X: np.ndarray, hard: bool, threads: int, chunk: int = 2048):
    mode = "hard" if hard else "relaxed"
    spans = [(s, min(s + chunk, X.shape[0])) for s in range(0, X.shape[0], chunk)]

    def run(span):
        lo, hi = span
        return model.forward(Tensor(X[lo:hi]), training=False, mode=mode).data.argmax(axis=1)

    if threads <= 1 or len(spans) <= 1:
        parts = [run(s) for s in spans]
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(run, spans))  # ordered, deterministic reduction
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def _load_eval_dataset(args, manifest) -> Dataset:
    label: str | int = args.label_column
    if isinstance(label, str) and label.lstrip("-").isdigit():
        label = int(label)
    ds = load_csv(args.data, label_column=label, has_header=not args.no_header)
    expected_d = manifest["d"]
    if ds.d != expected_d:
        raise DataError(f"dataset has {ds.d} features but the model expects {expected_d}")
    return _normalized_from_manifest(ds, manifest)


def cmd_eval(args) -> int:
    loaded = load_checkpoint(args.checkpoint)
    ds = _load_eval_dataset(args, loaded.manifest)
    model = loaded.model

    pred = _predict_threaded(model, ds.X, hard=False, threads=args.threads)
    report = {
        "checkpoint": str(args.checkpoint),
        "n_samples": ds.n,
        "accuracy": float((pred == ds.y).mean()),
        "per_class_accuracy": {
            str(c): float((pred[ds.y == c] == c).mean())
            for c in range(ds.n_classes)
            if (ds.y == c).any()
        },
        "temperature": model.temperature,
    }
    if args.hard_routing:
        hard_pred = _predict_threaded(model, ds.X, hard=True, threads=args.threads)
        report["hard_routing_accuracy"] = float((hard_pred == ds.y).mean())
    print(json.dumps(report, indent=2, sort_keys=True))
    if args.out:
        _write_json(args.out, report)
    return 0


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    out_dir = args.out_dir or os.environ.get(OUT_DIR_ENV, "") or "gmlp-out"
    os.makedirs(out_dir, exist_ok=True)
    net_kw = {}
    if args.root_prob:
        vals = [float(v) for v in args.root_prob.split(",")]
        net_kw["root_prob"] = np.full(6, vals[0]) if len(vals) == 1 else np.asarray(vals)
    if args.xor_fidelity is not None:
        net_kw["xor_fidelity"] = args.xor_fidelity
    if args.target_rule:
        net_kw["target_rule"] = np.asarray([float(v) for v in args.target_rule.split(",")])
    from .data import SynthBayesNet

    net = SynthBayesNet(**net_kw)
    full = synth_generate(net, args.n, seed=args.seed)
    train, test = split(full, args.test_fraction, seed=args.seed)
    save_csv(train, os.path.join(out_dir, "train.csv"))
    save_csv(test, os.path.join(out_dir, "test.csv"))
    oracle = synth_bayes_optimal(net)
    report = {
        "optimal_accuracy": oracle.optimal_accuracy,
        "label_marginal": oracle.label_marginal,
        "n_train": train.n,
        "n_test": test.n,
        "seed": args.seed,
        "xor_fidelity": net.xor_fidelity,
        "root_prob": [float(v) for v in net.root_prob],
        "target_rule": [float(v) for v in net.target_rule],
    }
    _write_json(os.path.join(out_dir, "oracle.json"), report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# analyze


def cmd_analyze(args) -> int:
    loaded = load_checkpoint(args.checkpoint)
    model = loaded.model
    if model.routing is None:
        raise ConfigError("analysis needs a group-connected model")
    out_dir = args.out_dir or os.environ.get(OUT_DIR_ENV, "") or "gmlp-out"
    os.makedirs(out_dir, exist_ok=True)

    table = loaded.routing_table or discretize_routing(model.routing)
    counts = analysis.selection_heatmap(table)
    analysis.save_heatmap_csv(counts, os.path.join(out_dir, "selection_heatmap.csv"))
    graph = analysis.group_graph(table)
    analysis.save_edge_list(graph, os.path.join(out_dir, "group_graph.txt"))
    summary = {
        "sparsity_fraction": sparsity_report(model.routing),
        "temperature": model.temperature,
        "k": table.k,
        "m": table.m,
        "d": table.d,
        "slot_to_feature": [int(v) for v in table.slot_to_feature],
        "total_edge_weight": graph.total_weight,
    }
    _write_json(os.path.join(out_dir, "sparsity.json"), summary)

    if args.data:
        ds = _load_eval_dataset(args, loaded.manifest)
        report = analysis.correlation_analysis(model, ds)
        analysis.save_histogram_csv(report, os.path.join(out_dir, "correlation_histograms.csv"))
        np.savetxt(
            os.path.join(out_dir, "correlation_matrix.csv"), report.corr, delimiter=","
        )
        summary["zero_variance_slots"] = report.zero_variance_slots
        _write_json(os.path.join(out_dir, "sparsity.json"), summary)
    else:
        print("note: no dataset supplied; correlation analysis skipped", file=sys.stderr)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# complexity


def cmd_complexity(args) -> int:
    spec = parse_arch(args.arch, d=args.input_features, branching=args.branching)
    report = count_complexity(spec).to_dict()
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="gmlp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a key=value config file")
    p.add_argument("config")
    p.add_argument("--out-dir", default="", help="override the config's output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a CSV dataset")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True, help="CSV dataset path")
    p.add_argument("--label-column", default="label")
    p.add_argument("--no-header", action="store_true")
    p.add_argument("--hard-routing", action="store_true",
                   help="also report accuracy under discretized routing")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default="", help="write the report JSON here too")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate the synthetic dataset and its oracle report")
    p.add_argument("--out-dir", default="")
    p.add_argument("--n", type=int, default=6400)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--root-prob", default="", help="scalar or 6 comma-separated values")
    p.add_argument("--xor-fidelity", type=float, default=None)
    p.add_argument("--target-rule", default="", help="4 comma-separated P(1|count) values")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("analyze", help="export routing analyses for a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--data", default="", help="CSV dataset for correlation analysis")
    p.add_argument("--label-column", default="label")
    p.add_argument("--no-header", action="store_true")
    p.add_argument("--out-dir", default="")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("complexity", help="closed-form cost figures for an architecture")
    p.add_argument("arch")
    p.add_argument("--input-features", "-d", type=int, required=True)
    p.add_argument("--branching", type=int, default=2)
    p.set_defaults(func=cmd_complexity)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, GmlpError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
