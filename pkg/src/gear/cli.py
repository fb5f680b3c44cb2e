"""Command-line entry point: ``gear {verify|train|bench|ablate|corrupt}``."""
from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

MODES = ("verify", "train", "bench", "ablate", "corrupt")
EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
CONFIG_KEYS = {"mode", "data", "train", "verify", "bench", "ablate", "corrupt", "out"}


class ConfigError(ValueError):
    pass


def load_config(path: str | None, mode: str) -> dict:
    """Read the JSON run config; an absent ``--config`` means all defaults."""
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(doc) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    if doc.get("mode", mode) != mode:
        raise ConfigError(f"{path}: config is for mode {doc['mode']!r}, not {mode!r}")
    data = doc.get("data", {})
    for key in ("source_csv", "target_csv"):
        if key in data:
            ref = (p.parent / data[key]) if not Path(data[key]).is_absolute() else Path(data[key])
            if not ref.is_file():
                raise ConfigError(f"{path}: {key} {data[key]!r} does not exist")
            data[key] = str(ref)
    return doc


def _train_config(doc: dict, seed: int | None):
    from .train import ConfigError as TrainConfigError
    from .train import TrainConfig

    try:
        cfg = TrainConfig.from_dict(doc.get("train", {}))
    except TrainConfigError as exc:
        raise ConfigError(str(exc)) from exc
    return replace(cfg, seed=seed) if seed is not None else cfg


def _datasets(doc: dict, seed: int | None):
    from .data import DataError, SyntheticPair, SyntheticPairSpec, generate_synthetic_pair, load_csv

    data = doc.get("data", {})
    if "target_csv" in data:
        try:
            target = load_csv(data["target_csv"], name="target")
            source = load_csv(data["source_csv"], name="source") if "source_csv" in data else None
        except DataError as exc:
            raise ConfigError(str(exc)) from exc
        if source is not None:
            # unrelated files: no shared feature rows
            source = replace(source, ids=source.ids + len(target))
        return SyntheticPair(source, target, float("nan"))
    spec = dict(data.get("synthetic", {}))
    if "noise" in spec:
        spec["noise"] = tuple(spec["noise"])
    if "hidden" in spec:
        spec["hidden"] = tuple(spec["hidden"])
    if seed is not None and "seed" not in spec:
        spec["seed"] = seed
    try:
        return generate_synthetic_pair(SyntheticPairSpec(**spec))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synthetic spec: {exc}") from exc


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def _run_verify(doc, args, out: Path) -> int:
    from .experiments import run_verify

    opts = doc.get("verify", {})
    report = run_verify(int(opts.get("n_modules", 20)), int(opts.get("seed", args.seed or 0)))
    _write_json(out / "verify_report.json", report.to_dict())
    for c in report.checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.check_name}: {c.max_rel_err:.3e} (tol {c.tolerance:g})")
    return EXIT_OK if report.passed else EXIT_FAIL


def _fold_outputs(out: Path, prefix: str, rep) -> None:
    (out / f"{prefix}history_fold{rep.fold}.jsonl").write_text(rep.history_jsonl(), encoding="utf-8")


def _run_train(doc, args, out: Path) -> int:
    from .model import build_model, model_to_dict
    from .train import ConfigError as TrainConfigError
    from .train import aggregate, split_fold, stl_config, train
    from .data import fold_indices

    cfg = _train_config(doc, args.seed)
    pair = _datasets(doc, args.seed)
    try:
        folds = fold_indices(len(pair.target), cfg.folds, cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    baseline = bool(doc.get("train", {}).get("single_task", False))
    if pair.source is None and not baseline:
        cfg = stl_config(cfg)
    reports, times = [], {}
    arch = replace(cfg.arch, features=pair.target.n_features)
    for k, val_idx in enumerate(folds):
        data = split_fold(pair.source, pair.target, val_idx)
        try:
            model, rep = train(build_model(arch, cfg.seed * 1000 + k, cfg.weights), data, cfg, fold=k)
        except TrainConfigError as exc:
            raise ConfigError(str(exc)) from exc
        reports.append(rep)
        times[f"fold{k}"] = rep.wall_time
        _fold_outputs(out, "", rep)
        _write_json(out / f"model_fold{k}.json", model_to_dict(model))
        print(f"fold {k}: best val RMSE {rep.best_val_rmse:.4f} at epoch {rep.best_epoch}")
    cv = aggregate(reports)
    _write_json(out / "train_report.json", {"config": cfg.to_dict(), **cv.to_dict()})
    print(f"RMSE {cv.mean_rmse:.4f} +- {cv.std_rmse:.4f}")
    args.timings.update(times)
    return EXIT_OK if not any(r.aborted for r in reports) else EXIT_FAIL


def _run_bench(doc, args, out: Path) -> int:
    from .bench import bench

    opts = doc.get("bench", {})
    report = bench(
        tuple(opts.get("dims", (2, 4, 8))),
        tuple(opts.get("batches", (1, 10, 30))),
        int(opts.get("repetitions", 3)),
        int(opts.get("n_layers", 3)),
        int(opts.get("seed", args.seed or 0)),
    )
    # wall times are measurements, so this report is not byte-stable across runs
    _write_json(out / "bench_report.json", report.to_dict())
    for r in report.rows:
        print(f"dim {r.dim} batch {r.batch}: time x{r.time_ratio:.1f}, memory x{r.memory_ratio:.2f} (numeric/analytic)")
    return EXIT_OK


def _run_ablate(doc, args, out: Path) -> int:
    from .experiments import ablation

    cfg = _train_config(doc, args.seed)
    pair = _datasets(doc, args.seed)
    n = args.seeds if args.seeds is not None else int(doc.get("ablate", {}).get("seeds", 5))
    if n <= 0:
        raise ConfigError("--seeds must be positive")
    if pair.source is None:
        raise ConfigError("ablation needs a source task")
    res = ablation(pair, cfg, range(cfg.seed, cfg.seed + n))
    hist = out / "ablate"
    hist.mkdir(exist_ok=True)
    runs = []
    for r in res["runs"]:
        rep = r.pop("report")
        (hist / f"seed{r['seed']}_{r['config']}.jsonl").write_text(rep.history_jsonl(), encoding="utf-8")
        runs.append(r)
        args.timings[f"seed{r['seed']}_{r['config']}"] = rep.wall_time
    _write_json(
        out / "ablate_report.json",
        {
            "config": cfg.to_dict(),
            "median_min_val_loss": res["median_min_val_loss"],
            "on_le_map_only": res["on_le_map_only"],
            "map_only_le_off": res["map_only_le_off"],
            "runs": runs,
        },
    )
    for name, v in res["median_min_val_loss"].items():
        print(f"{name}: median min validation loss {v:.5f}")
    return EXIT_OK


def _run_corrupt(doc, args, out: Path) -> int:
    from .experiments import corruption

    cfg = _train_config(doc, args.seed)
    pair = _datasets(doc, args.seed)
    if pair.source is None:
        raise ConfigError("the corruption protocol trains GEAR and needs a source task")
    fraction = float(doc.get("corrupt", {}).get("fraction", 0.1))
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError("corrupt.fraction must lie in [0, 1]")
    res = corruption(pair, cfg, fraction)
    rep = res.pop("report")
    args.timings["train"] = rep.wall_time
    (out / "corrupt_history.jsonl").write_text(rep.history_jsonl(), encoding="utf-8")
    _write_json(out / "corrupt_report.json", {"config": cfg.to_dict(), **res})
    print(f"corrupted {len(res['corrupted_indices'])} rows; clean-label RMSE on them: {res['clean_rmse_corrupted_rows']}")
    return EXIT_OK


RUNNERS = {
    "verify": _run_verify,
    "train": _run_train,
    "bench": _run_bench,
    "ablate": _run_ablate,
    "corrupt": _run_corrupt,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gear", description="Curvature checks and curvature-matched transfer learning.")
    p.add_argument("mode", choices=MODES)
    p.add_argument("--config", help="JSON run config (defaults are used when omitted)")
    p.add_argument("--seed", type=int, default=None, help="override the seed in the config")
    p.add_argument("--out", default=None, help="output directory (default: config 'out' or ./gear_out)")
    p.add_argument("--seeds", type=int, default=None, help="number of seeds for ablate")
    return p


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    args.timings = {}
    try:
        doc = load_config(args.config, args.mode)
        out = Path(args.out or doc.get("out", "gear_out"))
        out.mkdir(parents=True, exist_ok=True)
        started = datetime.now(timezone.utc).isoformat()
        t0 = time.perf_counter()
        code = RUNNERS[args.mode](doc, args, out)
    except ConfigError as exc:
        print(f"gear: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    meta = {
        "mode": args.mode,
        "started": started,
        "wall_time": time.perf_counter() - t0,
        "timings": args.timings,
        "exit_code": code,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    _write_json(out / "metadata.json", meta)
    return code


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
