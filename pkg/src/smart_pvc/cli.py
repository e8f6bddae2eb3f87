"""Command-line entry point: ``smart-pvc <command> [options]``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from dataclasses import fields, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from smart_pvc import __version__
from smart_pvc.data import (
    apply_partial_alignment,
    dataset_files,
    generate_synthetic,
    load_dataset_dir,
    save_dataset,
    zscore_views,
)
from smart_pvc.errors import ConfigError, DataError, SmartError
from smart_pvc.graph import export_graph, graph_purity
from smart_pvc.nn import load_checkpoint, save_checkpoint
from smart_pvc.trainer import (
    METRICS,
    VARIANTS,
    Networks,
    TrainConfig,
    compare_matching_runs,
    evaluate,
    run_ablation_suite,
    sweep_alignment,
    train,
    write_csv,
    write_loss_log,
)

log = logging.getLogger("smart_pvc")

RUN_FILES = ("metrics.json", "loss_log.csv", "graph_edges.csv", "graph_meta.json", "checkpoint.bin", "config_echo.yaml")


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, inputs, artifacts, started: str) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "inputs": {str(p): sha256(p) for p in inputs},
        "artifacts": sorted(str(Path(a).name) for a in artifacts),
        "started": started,
        "finished": _now(),
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    return out


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# ---------------------------------------------------------------- config

CONFIG_FLAGS = {
    # flag dest -> TrainConfig field
    "d": "d",
    "hidden": "hidden_dims",
    "projector_hidden": "projector_hidden",
    "activation": "activation",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "lr": "lr",
    "lambda1": "lambda1",
    "lambda2": "lambda2",
    "tau": "tau",
    "eval_every": "eval_every",
    "rec_batch_scaling": "rec_batch_scaling",
    "graph_mode": "graph_mode",
    "graph_block_size": "graph_block_size",
    "kmeans_restarts": "kmeans_restarts",
    "kmeans_max_iter": "kmeans_max_iter",
    "kmeans_tol": "kmeans_tol",
}
RUN_KEYS = ("eta",)


def load_config_file(path) -> dict:
    """Flat ``key: value`` YAML file whose keys are TrainConfig fields (plus ``eta``)."""
    try:
        with open(path) as fh:
            values = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid config syntax: {exc}") from None
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: expected a flat key-value mapping")
    known = {f.name for f in fields(TrainConfig)} | set(RUN_KEYS)
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}")
    nested = [k for k, v in values.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"{path}: nested values are not allowed ({nested})")
    return values


def resolve_config(args) -> tuple[TrainConfig, dict]:
    """File values first, then CLI flags; returns (TrainConfig, run options)."""
    values = load_config_file(args.config) if getattr(args, "config", None) else {}
    run = {k: values.pop(k) for k in RUN_KEYS if k in values}
    for dest, key in CONFIG_FLAGS.items():
        v = getattr(args, dest, None)
        if v is not None:
            values[key] = v
    if getattr(args, "ablate", None):
        values["ablation"] = sorted({a for item in args.ablate for a in item.split(",") if a})
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    if getattr(args, "eta", None) is not None:
        run["eta"] = args.eta
    run.setdefault("eta", 1.0)
    try:
        cfg = TrainConfig.from_dict(values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    cfg.validate()
    if not 0.0 < float(run["eta"]) <= 1.0:
        raise ConfigError(f"eta must lie in (0, 1], got {run['eta']}")
    return cfg, run


def _load_data(args, cfg: TrainConfig | None = None):
    if not args.data:
        raise ConfigError("--data is required")
    ds = load_dataset_dir(args.data)
    views, labels = dataset_files(args.data)
    return zscore_views(ds), [*views, labels]


# --------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    started = _now()
    seed = 0 if args.seed is None else args.seed
    dims = args.dims
    if len(dims) != args.views:
        raise ConfigError(f"--dims has {len(dims)} entries but --views is {args.views}")
    out = Path(args.out_dir or args.out or "data")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    ds = generate_synthetic(args.n, args.k, args.views, dims, args.sep, args.noise, seed)
    paths = save_dataset(ds, out, args.format)
    config = {
        "n": args.n, "k": args.k, "views": args.views, "dims": dims,
        "sep": args.sep, "noise": args.noise, "seed": seed, "format": args.format,
    }
    write_manifest(out, "gen-data", config, [], paths, started)
    log.info("wrote %d files to %s", len(paths), out)
    return 0


def _save_run(out: Path, nets: Networks, ds, cfg: TrainConfig, run: dict, ev, train_log=None) -> list[Path]:
    paths = []
    metrics = ev.metrics()
    metrics["eta"] = run["eta"]
    metrics["n_aligned"] = ds.n_aligned
    metrics["views"] = ds.n_views
    with open(out / "metrics.json", "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
    paths.append(out / "metrics.json")
    if train_log is not None:
        write_loss_log(out / "loss_log.csv", train_log)
        paths.append(out / "loss_log.csv")
    export_graph(
        ev.graphs[0], out / "graph_edges.csv", out / "graph_meta.json",
        graph_purity(ev.graphs[0], ds.labels, ds.view_labels(1)),
        extra={"view_pair": [1, 2], "purity_mean_over_pairs": ev.purity},
    )
    paths += [out / "graph_edges.csv", out / "graph_meta.json"]
    echo = {**cfg.to_dict(), **run}
    save_checkpoint(out / "checkpoint.bin", nets.named(), echo)
    with open(out / "config_echo.yaml", "w") as fh:
        yaml.safe_dump(echo, fh, sort_keys=True)
    paths += [out / "checkpoint.bin", out / "config_echo.yaml"]
    return paths


def cmd_train(args) -> int:
    started = _now()
    cfg, run = resolve_config(args)
    ds, inputs = _load_data(args)
    ds = apply_partial_alignment(ds, run["eta"], cfg.seed) if run["eta"] < 1.0 else ds
    out = _out_dir(args, "run")
    result = train(ds, cfg, evaluate_fn=(lambda n: evaluate(n, ds, cfg)) if cfg.eval_every else None)
    ev = evaluate(result.networks, ds, cfg)
    paths = _save_run(out, result.networks, ds, cfg, run, ev, result.log)
    write_manifest(out, "train", {**cfg.to_dict(), **run}, inputs, paths, started)
    print(json.dumps({k: ev.metrics()[k] for k in METRICS}))
    return 0


def _load_run(run_dir) -> tuple[Networks, TrainConfig, dict]:
    run_dir = Path(run_dir)
    if not (run_dir / "checkpoint.bin").exists():
        raise DataError(f"{run_dir}: no checkpoint.bin")
    nets, echo = load_checkpoint(run_dir / "checkpoint.bin")
    run = {k: echo.pop(k) for k in RUN_KEYS if k in echo}
    return Networks.from_named(nets), TrainConfig.from_dict(echo), run


def cmd_evaluate(args) -> int:
    started = _now()
    nets, cfg, run = _load_run(args.run)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    ds, inputs = _load_data(args)
    ds = apply_partial_alignment(ds, run.get("eta", 1.0), cfg.seed) if run.get("eta", 1.0) < 1.0 else ds
    out = _out_dir(args, str(Path(args.run) / "eval"))
    ev = evaluate(nets, ds, cfg)
    paths = _save_run(out, nets, ds, cfg, {"eta": run.get("eta", 1.0)}, ev)
    write_manifest(out, "evaluate", {**cfg.to_dict(), **run}, [*inputs, Path(args.run) / "checkpoint.bin"], paths, started)
    print(json.dumps({k: ev.metrics()[k] for k in METRICS}))
    return 0


def _sidecar(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def cmd_ablate(args) -> int:
    started = _now()
    cfg, run = resolve_config(args)
    ds, inputs = _load_data(args)
    out = _out_dir(args, "ablation")
    variants = [v for item in args.variants for v in item.split(",") if v]
    table = run_ablation_suite(
        ds, cfg, variants, args.seeds, run["eta"],
        runs_csv=out / "ablation_runs.csv", table_csv=out / "ablation_table.csv", n_jobs=args.threads,
    )
    _sidecar(out / "ablation_table.json", {"eta": run["eta"], "seeds": args.seeds, "rows": table})
    paths = [out / "ablation_runs.csv", out / "ablation_table.csv", out / "ablation_table.json"]
    write_manifest(out, "ablate", {**cfg.to_dict(), **run, "variants": variants, "seeds": args.seeds}, inputs, paths, started)
    return 0


def cmd_sweep(args) -> int:
    started = _now()
    cfg, run = resolve_config(args)
    ds, inputs = _load_data(args)
    out = _out_dir(args, "sweep")
    table = sweep_alignment(
        ds, cfg, args.etas, args.seeds,
        runs_csv=out / "sweep_runs.csv", table_csv=out / "sweep_table.csv", n_jobs=args.threads,
    )
    _sidecar(out / "sweep_table.json", {"etas": args.etas, "seeds": args.seeds, "rows": table})
    paths = [out / "sweep_runs.csv", out / "sweep_table.csv", out / "sweep_table.json"]
    write_manifest(out, "sweep-alignment", {**cfg.to_dict(), "etas": args.etas, "seeds": args.seeds}, inputs, paths, started)
    return 0


def cmd_compare(args) -> int:
    started = _now()
    ds, inputs = _load_data(args)
    if args.run:
        nets, cfg, run = _load_run(args.run)
        if args.eta is not None:
            run["eta"] = args.eta
        seeds = args.seeds or [cfg.seed]
        inputs.append(Path(args.run) / "checkpoint.bin")
    else:
        nets = None
        cfg, run = resolve_config(args)
        seeds = args.seeds or [cfg.seed]
    out = _out_dir(args, "compare")
    runs, table = compare_matching_runs(ds, cfg, run.get("eta", 1.0), seeds, args.method, nets, args.threads)
    write_csv(out / "compare_runs.csv", runs)
    write_csv(out / "compare_matching.csv", table)
    _sidecar(out / "compare_matching.json", {"eta": run.get("eta", 1.0), "method": args.method, "seeds": seeds, "rows": table})
    paths = [out / "compare_runs.csv", out / "compare_matching.csv", out / "compare_matching.json"]
    write_manifest(out, "compare-matching", {**cfg.to_dict(), **run, "method": args.method}, inputs, paths, started)
    for row in table:
        print(row["path"], " ".join(f"{k}={row[f'{k}_mean']:.4f}" for k in METRICS))
    return 0


def cmd_selfcheck(args) -> int:
    from smart_pvc.selfcheck import run_selfcheck

    started = _now()
    out = _out_dir(args, "selfcheck")
    report = run_selfcheck(seed=args.seed or 0, fault=args.inject_fault)
    with open(out / "selfcheck.json", "w") as fh:
        json.dump([r.as_dict() for r in report], fh, indent=2)
    for r in report:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<40} max_err={r.max_error:.3e} tol={r.tol:.1e}")
    write_manifest(out, "selfcheck", {"seed": args.seed or 0, "fault": args.inject_fault}, [], [out / "selfcheck.json"], started)
    return 0 if all(r.passed for r in report) else 1


# ----------------------------------------------------------------- parser


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training configuration (overrides --config)")
    g.add_argument("--d", type=int, help="latent dimension")
    g.add_argument("--hidden", type=_int_list, help="hidden widths, e.g. 1024,1024")
    g.add_argument("--projector-hidden", dest="projector_hidden", type=_int_list)
    g.add_argument("--activation", choices=["relu", "tanh"])
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--lambda1", type=float)
    g.add_argument("--lambda2", type=float)
    g.add_argument("--tau", type=float)
    g.add_argument("--eval-every", dest="eval_every", type=int)
    g.add_argument("--rec-batch-scaling", dest="rec_batch_scaling", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--graph-mode", dest="graph_mode", choices=["batch", "global"])
    g.add_argument("--graph-block-size", dest="graph_block_size", type=int)
    g.add_argument("--kmeans-restarts", dest="kmeans_restarts", type=int)
    g.add_argument("--kmeans-max-iter", dest="kmeans_max_iter", type=int)
    g.add_argument("--kmeans-tol", dest="kmeans_tol", type=float)
    g.add_argument("--ablate", action="append", help="ablation switch(es), comma-separated or repeated")
    g.add_argument("--eta", type=float, help="alignment rate in (0, 1]")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key-value YAML config file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="smart-pvc", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic multi-view dataset")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--views", type=int, default=2)
    p.add_argument("--dims", type=_int_list, default=[20, 15])
    p.add_argument("--sep", type=float, default=4.0)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--format", choices=["csv", "bin"], default="csv")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train and evaluate one model")
    p.add_argument("--data", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="re-evaluate a trained run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common], help="ablation table over variants and seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--variants", action="append", default=None, help=f"from {sorted(VARIANTS)}")
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4])
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-alignment", parents=[common], help="metrics across alignment rates")
    p.add_argument("--data", required=True)
    p.add_argument("--etas", type=_float_list, default=[0.3, 0.5, 0.7, 1.0])
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4])
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare-matching", parents=[common], help="graph matching fusion vs Euclidean re-pairing")
    p.add_argument("--data", required=True)
    p.add_argument("--run", help="reuse a trained run directory instead of training")
    p.add_argument("--seeds", type=_int_list, default=None)
    p.add_argument("--method", choices=["nearest", "hungarian"], default="nearest")
    _add_train_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("selfcheck", parents=[common], help="gradient, covariance and metric oracle checks")
    p.add_argument("--inject-fault", dest="inject_fault", choices=["grad", "metric"], default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    if args.command == "ablate" and not args.variants:
        args.variants = ["rec_only", "rec+vda", "full"]
    try:
        return args.func(args)
    except SmartError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
