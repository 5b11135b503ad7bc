"""Command-line entry points: generate, train, forecast, explain, evaluate.

One JSON config file drives every command; a handful of flags override it
(flags win). Heavy numerical imports happen inside the command handlers so
the LFIT_THREADS cap reaches the BLAS backends before they initialize.

Exit codes: 0 success, 1 runtime/data error, 2 usage error.
"""

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

from .errors import ConfigError, ContractError, DataError, ModelFormatError

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def apply_thread_cap(env=os.environ) -> None:
    """Propagate LFIT_THREADS to the BLAS backends. Call before numpy loads."""
    cap = env.get("LFIT_THREADS")
    if cap is None or cap == "":
        return
    if not cap.isdigit() or int(cap) < 1:
        raise ConfigError(f"LFIT_THREADS must be a positive integer, got {cap!r}")
    for var in _THREAD_VARS:
        env[var] = cap


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def load_run_config(path) -> dict:
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return raw


def effective_config(raw: dict, args) -> dict:
    """Merge flag overrides into the file config; flags win."""
    cfg = dict(raw)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    if getattr(args, "scenario", None) is not None:
        cfg["scenario"] = args.scenario
    if getattr(args, "baseline", False):
        cfg["baseline"] = True
    return cfg


def _out_dir(cfg) -> Path:
    out = cfg.get("out")
    if not out:
        raise ConfigError("an output directory is required ('out' in config or --out)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(out: Path, cfg: dict, hashes: dict) -> None:
    manifest = {"effective_config": cfg, "input_hashes": hashes}
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _synthetic_spec(cfg: dict, override_seed: bool):
    from .dataset import SyntheticSpec

    raw = dict(cfg["synthetic"])
    if override_seed and "seed" in cfg:
        raw["seed"] = cfg["seed"]
    try:
        return SyntheticSpec(**raw)
    except TypeError as e:
        raise ConfigError(f"bad synthetic spec: {e}")


def _load_dataset(cfg: dict):
    """Resolve the single data source; returns (dataset, input-file hashes)."""
    has_file = "data" in cfg
    has_synth = "synthetic" in cfg
    if has_file == has_synth:
        raise ConfigError("config must name exactly one data source: 'data' or 'synthetic'")
    if has_synth:
        from .dataset import generate_synthetic

        # the synthetic block's own seed governs the data; the top-level
        # seed stays reserved for model initialization
        return generate_synthetic(_synthetic_spec(cfg, override_seed=False)), {}

    block = cfg["data"]
    if not isinstance(block, dict) or "csv" not in block or "schema" not in block:
        raise ConfigError("'data' must be an object with 'csv' and 'schema' paths")
    from .dataset import load_csv, load_schema

    schema = load_schema(block["schema"])
    ds = load_csv(block["csv"], schema, statics_path=block.get("statics"))
    hashes = {key: _sha256(block[key]) for key in ("csv", "schema", "statics") if block.get(key)}
    return ds, hashes


def _scenario(cfg: dict):
    from .evaluation import ScenarioSpec

    name = cfg.get("scenario")
    if not name:
        raise ConfigError("config needs a 'scenario' name")
    kwargs = {}
    if cfg.get("target_site") is not None:
        kwargs["target_site"] = cfg["target_site"]
    if cfg.get("point_attribute") is not None:
        kwargs["point_attribute"] = cfg["point_attribute"]
    return ScenarioSpec(name, **kwargs)


def _train_config(cfg: dict):
    from .training import TrainConfig

    raw = cfg.get("train", {})
    if not isinstance(raw, dict):
        raise ConfigError("'train' must be an object")
    try:
        return TrainConfig(**raw)
    except TypeError as e:
        raise ConfigError(f"bad train config: {e}")


def _load_model_from_cfg(cfg: dict):
    from .model import load_model

    path = cfg.get("model_path")
    if not path:
        raise ConfigError("config needs 'model_path' pointing at a saved model")
    return load_model(path), {"model_path": _sha256(path)}


def _prepared_windows(cfg: dict, model):
    """Rewire per scenario and window with the trained model's geometry."""
    from .dataset import build_windows
    from .evaluation import rewire_for_scenario

    ds, hashes = _load_dataset(cfg)
    derived = rewire_for_scenario(ds, _scenario(cfg))
    windows = build_windows(derived, model.config.encoder_length, model.config.horizon)
    windows.standardizer = model.standardizer
    return windows, hashes


def _last_window_per_series(windows):
    import numpy as np

    keep = [int(np.flatnonzero(windows.series_ids == sid)[-1]) for sid in dict.fromkeys(windows.series_ids)]
    return windows.take(keep)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> None:
    cfg = effective_config(load_run_config(args.config), args)
    if "synthetic" not in cfg:
        raise ConfigError("generate needs a 'synthetic' block in the config")
    from .dataset import generate_synthetic, write_dataset

    ds = generate_synthetic(_synthetic_spec(cfg, override_seed=True))
    out = _out_dir(cfg)
    statics = out / "statics.csv" if ds.schema.statics else None
    write_dataset(ds, out / "data.csv", schema_path=out / "schema.json", statics_path=statics)
    with open(out / "metadata.json", "w") as f:
        json.dump(ds.metadata, f, indent=2, sort_keys=True)
        f.write("\n")
    _write_manifest(out, cfg, {})
    rows = sum(s.length for s in ds.series)
    print(f"wrote {out / 'data.csv'}: {len(ds.series)} series, {rows} rows")


def cmd_train(args) -> None:
    cfg = effective_config(load_run_config(args.config), args)
    ds, hashes = _load_dataset(cfg)
    model_cfg = cfg.get("model")
    if not isinstance(model_cfg, dict):
        raise ConfigError("config needs a 'model' object with encoder_length and horizon")
    from .evaluation import run_scenario

    out = _out_dir(cfg)
    result = run_scenario(
        ds,
        _scenario(cfg),
        model_cfg,
        _train_config(cfg),
        out_dir=out,
        test_fraction=cfg.get("test_fraction", 0.2),
        model_seed=cfg.get("seed", 0),
        manifest_extra={"effective_config": cfg, "input_hashes": hashes},
    )
    mae = result.report.aggregates["mae"]
    print(f"trained {cfg['scenario']}: best epoch {result.training_log.best_epoch}, test MAE {mae:.6g}")


def cmd_forecast(args) -> None:
    cfg = effective_config(load_run_config(args.config), args)
    model, model_hash = _load_model_from_cfg(cfg)
    windows, hashes = _prepared_windows(cfg, model)
    from .evaluation import predict_chunked, write_forecasts_csv

    last = _last_window_per_series(windows)
    forecast, _ = predict_chunked(model, last)
    out = _out_dir(cfg)
    write_forecasts_csv(out / "forecasts.csv", forecast)
    _write_manifest(out, cfg, {**hashes, **model_hash})
    n = forecast.values.size
    print(f"wrote {out / 'forecasts.csv'}: {len(last)} series, {n} quantile values")


def cmd_explain(args) -> None:
    cfg = effective_config(load_run_config(args.config), args)
    model, model_hash = _load_model_from_cfg(cfg)
    windows, hashes = _prepared_windows(cfg, model)
    from .evaluation import aggregate_importance, predict_chunked, write_attention_dir, write_importance_csv

    forecast, explanations = predict_chunked(model, windows)
    summary = aggregate_importance(explanations)
    out = _out_dir(cfg)
    write_importance_csv(out / "importance.csv", summary)
    write_attention_dir(out / "attention", forecast, explanations)
    _write_manifest(out, cfg, {**hashes, **model_hash})
    top = summary.ranked("past")[0]
    print(f"explained {len(windows)} windows; top past channel: {top[0]} ({top[1]:.3f})")


def cmd_evaluate(args) -> None:
    cfg = effective_config(load_run_config(args.config), args)
    model, model_hash = _load_model_from_cfg(cfg)
    windows, hashes = _prepared_windows(cfg, model)
    import numpy as np

    from .dataset import split_windows
    from .evaluation import compute_metrics, persistence_baseline, predict_chunked, write_metrics_csv

    _, test = split_windows(windows, cfg.get("test_fraction", 0.2))
    forecast, _ = predict_chunked(model, test)
    actual = np.transpose(test.future_targets, (0, 2, 1))
    quantiles = model.config.quantiles
    targets = model.config.target_channels
    report = compute_metrics(forecast.values, actual, quantiles, targets)
    baseline = None
    if cfg.get("baseline"):
        base = persistence_baseline(test, quantiles)
        baseline = compute_metrics(base.values, actual, quantiles, targets)
    out = _out_dir(cfg)
    write_metrics_csv(out / "metrics.csv", report, baseline=baseline)
    _write_manifest(out, cfg, {**hashes, **model_hash})
    line = f"test MAE {report.aggregates['mae']:.6g}, RMSE {report.aggregates['rmse']:.6g}"
    if baseline is not None:
        line += f" (persistence MAE {baseline.aggregates['mae']:.6g})"
    print(line)


_COMMANDS = {
    "generate": (cmd_generate, "write a synthetic dataset with known drivers"),
    "train": (cmd_train, "train a model for one scenario and write the run directory"),
    "forecast": (cmd_forecast, "forecast the latest window of every series"),
    "explain": (cmd_explain, "write variable importance and attention matrices"),
    "evaluate": (cmd_evaluate, "score a saved model on the chronological test split"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lfit",
        description="Interpretable multi-horizon quantile forecasting for monitored sites.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (handler, help_text) in _COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--scenario", default=None, help="override the scenario name")
        if name == "evaluate":
            p.add_argument("--baseline", action="store_true", help="also score the persistence baseline")
        p.set_defaults(handler=handler)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        apply_thread_cap()
        args.handler(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ContractError, DataError, ModelFormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
