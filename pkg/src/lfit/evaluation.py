"""Metrics, correlation analysis, importance aggregation, and scenario runs.

Scenario names and their channel rewiring:

ST-NSP        one site's target forecast from the other sites' targets
              (routed as observed covariates); no statics.
ST-NSP-EV     ST-NSP plus the target site's environmental covariates.
MT-MPC        every site forecast jointly; the only static is the
              monitoring-point label; no environmental covariates.
MT-MPC-PK-EV  MT-MPC plus all static attributes and environmental
              covariates.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, replace

import numpy as np

from .dataset import ChannelSchema, Series, SeriesDataset, WindowBatch, build_windows, split_windows
from .errors import ConfigError, ContractError, DataError
from .model import Explanation, Forecast, LfitConfig, LfitModel, save_model
from .training import TrainConfig, TrainingLog, train

log = logging.getLogger(__name__)

SCENARIOS = ("ST-NSP", "MT-MPC", "ST-NSP-EV", "MT-MPC-PK-EV")

_AGGREGATE = "__all__"


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    """Point-forecast errors plus quantile diagnostics.

    ``per_target[target][metric]`` holds one value per horizon step;
    ``aggregates[metric]`` pools every point. Ratio metrics are percentages
    and ``None`` where every point was skipped.
    """

    target_names: list[str]
    per_target: dict[str, dict[str, list]]
    aggregates: dict[str, float | None]
    crossing_rate: float
    coverage: dict[str, float]
    skipped: dict[str, int]

    METRICS = ("mae", "mape", "rmse", "smape")


def _mae(err: np.ndarray) -> float:
    return float(np.mean(np.abs(err)))


def _rmse(err: np.ndarray) -> float:
    return float(np.sqrt(np.mean(err * err)))


def _mape(actual: np.ndarray, err: np.ndarray) -> tuple[float | None, int]:
    keep = actual != 0.0
    skipped = int(keep.size - keep.sum())
    if not np.any(keep):
        return None, skipped
    # percent per element before averaging keeps round decimals exact
    return float(np.mean(100.0 * np.abs(err[keep]) / np.abs(actual[keep]))), skipped


def _smape(actual: np.ndarray, pred: np.ndarray) -> tuple[float | None, int]:
    denom = np.abs(actual + pred) / 2.0
    keep = denom != 0.0
    skipped = int(keep.size - keep.sum())
    if not np.any(keep):
        return None, skipped
    return float(np.mean(100.0 * np.abs(actual[keep] - pred[keep]) / denom[keep])), skipped


def _metric_block(actual: np.ndarray, pred: np.ndarray) -> tuple[dict, int, int]:
    err = actual - pred
    mape, mape_skip = _mape(actual, err)
    smape, smape_skip = _smape(actual, pred)
    vals = {"mae": _mae(err), "mape": mape, "rmse": _rmse(err), "smape": smape}
    # power-mean inequality, with one-ulp slack for the float round trip
    assert vals["rmse"] >= vals["mae"] * (1.0 - 1e-12), "rmse fell below mae"
    return vals, mape_skip, smape_skip


def compute_metrics(
    values: np.ndarray,
    actual: np.ndarray,
    quantiles,
    target_names: list[str],
    repair_crossings: bool = False,
) -> MetricReport:
    """Score quantile forecasts [N, m, tau, |Q|] against actuals [N, m, tau].

    Point metrics use the median quantile. MAPE skips zero actuals and sMAPE
    skips zero-sum pairs, with skip counts logged and reported; a step where
    every point is skipped reports the metric as None rather than 0.
    """
    values = np.asarray(values, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    qs = tuple(float(q) for q in quantiles)
    if values.ndim != 4 or values.shape[-1] != len(qs):
        raise ContractError(f"expected [N, m, tau, {len(qs)}] forecasts, got {values.shape}")
    if actual.shape != values.shape[:-1]:
        raise ContractError(f"actuals {actual.shape} do not align with forecasts {values.shape}")
    if values.shape[0] == 0:
        raise ContractError("cannot score an empty forecast set")
    if len(target_names) != values.shape[1]:
        raise ContractError(f"{len(target_names)} target names for {values.shape[1]} target axes")
    if 0.5 not in qs:
        raise ContractError("point metrics need the 0.5 quantile in the forecast set")

    crossings = np.diff(values, axis=-1) < 0.0
    crossing_rate = float(crossings.mean()) if crossings.size else 0.0
    if repair_crossings:
        values = np.sort(values, axis=-1)

    median = values[..., qs.index(0.5)]

    per_target: dict[str, dict[str, list]] = {}
    skipped = {"mape": 0, "smape": 0}
    tau = values.shape[2]
    for i, name in enumerate(target_names):
        rows: dict[str, list] = {m: [] for m in MetricReport.METRICS}
        for t in range(tau):
            vals, mape_skip, smape_skip = _metric_block(actual[:, i, t], median[:, i, t])
            skipped["mape"] += mape_skip
            skipped["smape"] += smape_skip
            for m in MetricReport.METRICS:
                rows[m].append(vals[m])
        per_target[name] = rows

    agg_vals, _, _ = _metric_block(actual.ravel(), median.ravel())
    for metric, count in skipped.items():
        if count:
            log.info("%s skipped %d of %d points", metric, count, actual.size)

    coverage = {}
    lo, hi = 0, len(qs) - 1
    while lo < hi and qs[lo] < 0.5 < qs[hi]:
        inside = (actual >= values[..., lo]) & (actual <= values[..., hi])
        coverage[f"{qs[lo]:g}-{qs[hi]:g}"] = float(inside.mean())
        lo += 1
        hi -= 1

    return MetricReport(
        target_names=list(target_names),
        per_target=per_target,
        aggregates=agg_vals,
        crossing_rate=crossing_rate,
        coverage=coverage,
        skipped=skipped,
    )


# ---------------------------------------------------------------------------
# Correlation
# ---------------------------------------------------------------------------


def pearson_matrix(ds: SeriesDataset, channel: str) -> np.ndarray:
    """Pairwise Pearson r of one channel across series, over common ranges.

    Pairs with fewer than 3 overlapping points or with zero variance on the
    overlap are undefined (NaN) and logged. The diagonal is exactly 1.
    """
    n = len(ds.series)
    out = np.full((n, n), np.nan)
    for i, a in enumerate(ds.series):
        out[i, i] = 1.0
        for j in range(i + 1, n):
            b = ds.series[j]
            lo = max(a.start, b.start)
            hi = min(a.start + a.length, b.start + b.length)
            if hi - lo < 3:
                log.info("series %r and %r share %d points; r undefined", a.series_id, b.series_id, hi - lo)
                continue
            xa = a.continuous[channel][lo - a.start : hi - a.start]
            xb = b.continuous[channel][lo - b.start : hi - b.start]
            if np.ptp(xa) == 0.0 or np.ptp(xb) == 0.0:
                log.info("zero variance on overlap of %r and %r; r undefined", a.series_id, b.series_id)
                continue
            r = float(np.corrcoef(xa, xb)[0, 1])
            out[i, j] = out[j, i] = r
    return out


# ---------------------------------------------------------------------------
# Persistence baseline
# ---------------------------------------------------------------------------


def persistence_baseline(batch: WindowBatch, quantiles) -> Forecast:
    """Repeat each window's last observed target across the horizon.

    Every quantile gets the same value: the minimal competence bar for the
    trained model to beat.
    """
    if batch.encoder_length < 1:
        raise ContractError("persistence needs a non-empty past window")
    qs = tuple(float(q) for q in quantiles)
    cols = [batch.past_continuous_names.index(t) for t in batch.target_names]
    last = batch.past_continuous[:, -1, cols]  # [N, m]
    values = np.broadcast_to(
        last[:, :, None, None], (len(batch), len(cols), batch.horizon, len(qs))
    ).copy()
    return Forecast(
        values=values,
        quantiles=qs,
        target_names=list(batch.target_names),
        series_ids=batch.series_ids,
        anchors=batch.anchors,
    )


# ---------------------------------------------------------------------------
# Importance aggregation
# ---------------------------------------------------------------------------


@dataclass
class ImportanceSummary:
    """Selection-weight means/spreads per channel plus attention by lag."""

    past_channels: list[str]
    past_mean: np.ndarray
    past_std: np.ndarray
    future_channels: list[str]
    future_mean: np.ndarray
    future_std: np.ndarray
    static_channels: list[str]
    static_mean: np.ndarray | None
    static_std: np.ndarray | None
    attention_lags: np.ndarray
    attention_profile: np.ndarray
    n_windows: int

    def ranked(self, group: str = "past") -> list[tuple[str, float]]:
        names, means = {
            "past": (self.past_channels, self.past_mean),
            "future": (self.future_channels, self.future_mean),
            "static": (self.static_channels, self.static_mean),
        }[group]
        if means is None:
            return []
        order = np.argsort(-means)
        return [(names[i], float(means[i])) for i in order]


def aggregate_importance(explanations: list[Explanation]) -> ImportanceSummary:
    """Average selection weights over windows and time; attention over lags.

    The attention profile averages decoder rows' weight on the position
    ``lag`` steps behind, over every window: its peaks reveal the cadence the
    model attends back to.
    """
    if not explanations:
        raise ContractError("importance aggregation needs at least one explanation")
    first = explanations[0]
    past = np.concatenate([e.past_variable_weights for e in explanations])
    future = np.concatenate([e.future_variable_weights for e in explanations])
    has_static = first.static_weights is not None
    static = np.concatenate([e.static_weights for e in explanations]) if has_static else None

    k = first.encoder_length
    T = first.mean_attention.shape[-1]
    lag_sum = np.zeros(T)
    lag_count = np.zeros(T, dtype=np.int64)
    for e in explanations:
        attn = e.mean_attention
        for p in range(k, T):
            lags = np.arange(p + 1)
            rows = attn[:, p, p - lags]  # [B, p + 1]
            lag_sum[: p + 1] += rows.sum(axis=0)
            lag_count[: p + 1] += rows.shape[0]
    profile = np.divide(lag_sum, lag_count, out=np.full(T, np.nan), where=lag_count > 0)

    return ImportanceSummary(
        past_channels=list(first.past_channels),
        past_mean=past.mean(axis=(0, 1)),
        past_std=past.std(axis=(0, 1)),
        future_channels=list(first.future_channels),
        future_mean=future.mean(axis=(0, 1)),
        future_std=future.std(axis=(0, 1)),
        static_channels=list(first.static_channels),
        static_mean=static.mean(axis=0) if has_static else None,
        static_std=static.std(axis=0) if has_static else None,
        attention_lags=np.arange(T),
        attention_profile=profile,
        n_windows=sum(e.mean_attention.shape[0] for e in explanations),
    )


# ---------------------------------------------------------------------------
# Scenario rewiring
# ---------------------------------------------------------------------------


@dataclass
class ScenarioSpec:
    """One of the four input configurations.

    ``target_site`` picks the forecast site for single-target scenarios
    (default: first series). ``point_attribute`` names the static channel
    holding the monitoring-point label for the MT scenarios.
    """

    name: str
    target_site: str | None = None
    point_attribute: str = "point"

    def __post_init__(self):
        if self.name not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.name!r}; expected one of {', '.join(SCENARIOS)}")


def _pivot_single_target(ds: SeriesDataset, spec: ScenarioSpec, include_env: bool) -> SeriesDataset:
    """Merge all series onto the common time range with one site as target.

    The other sites' target channels become observed covariates named
    ``<channel>__<site>``; known and (optionally) environmental channels come
    from the target site.
    """
    if len(ds.series) < 2:
        raise ConfigError(f"{spec.name} needs at least 2 series for neighboring covariates")
    by_id = {s.series_id: s for s in ds.series}
    site = spec.target_site if spec.target_site is not None else ds.series[0].series_id
    if site not in by_id:
        raise ConfigError(f"target site {site!r} not in dataset ({sorted(by_id)})")

    lo = max(s.start for s in ds.series)
    hi = min(s.start + s.length for s in ds.series)
    if hi - lo < 2:
        raise DataError(f"series share only {max(hi - lo, 0)} common steps; cannot pivot")

    schema = ds.schema
    tgt = schema.targets[0]
    anchor = by_id[site]

    def window(s: Series, channel: str) -> np.ndarray:
        return s.continuous[channel][lo - s.start : hi - s.start]

    continuous = {tgt: window(anchor, tgt)}
    observed = []
    for s in ds.series:
        if s.series_id == site:
            continue
        name = f"{tgt}__{s.series_id}"
        continuous[name] = window(s, tgt)
        observed.append(name)
    if include_env:
        for ch in schema.observed:
            continuous[ch] = window(anchor, ch)
            observed.append(ch)
    for ch in schema.known_continuous:
        continuous[ch] = window(anchor, ch)

    categorical = {
        ch: anchor.categorical[ch][lo - anchor.start : hi - anchor.start]
        for ch in schema.known_categorical
    }

    pivot_schema = ChannelSchema(
        targets=[tgt],
        observed=observed,
        known_continuous=list(schema.known_continuous),
        known_categorical=list(schema.known_categorical),
        statics=[],
    )
    series = Series(
        series_id=site,
        start=lo,
        continuous=continuous,
        categorical=categorical,
        static_indices=np.zeros(0, dtype=np.int64),
        static_values={},
    )
    vocabularies = {ch: ds.vocabularies[ch] for ch in schema.known_categorical}
    meta = {**ds.metadata, "scenario": spec.name, "target_site": site}
    return SeriesDataset(schema=pivot_schema, series=[series], vocabularies=vocabularies, metadata=meta)


def _per_site(ds: SeriesDataset, spec: ScenarioSpec, statics: list[str], include_env: bool) -> SeriesDataset:
    schema = ds.schema
    for attr in statics:
        if attr not in schema.statics:
            raise ConfigError(f"{spec.name} needs static attribute {attr!r}; dataset has {schema.statics}")
    keep_idx = [schema.statics.index(a) for a in statics]
    new_schema = ChannelSchema(
        targets=list(schema.targets),
        observed=list(schema.observed) if include_env else [],
        known_continuous=list(schema.known_continuous),
        known_categorical=list(schema.known_categorical),
        statics=statics,
        integrate=dict(schema.integrate),
    )
    series = [
        replace(
            s,
            static_indices=s.static_indices[keep_idx],
            static_values={a: s.static_values[a] for a in statics},
        )
        for s in ds.series
    ]
    vocabularies = {
        ch: ds.vocabularies[ch] for ch in list(schema.known_categorical) + statics
    }
    meta = {**ds.metadata, "scenario": spec.name}
    return SeriesDataset(schema=new_schema, series=series, vocabularies=vocabularies, metadata=meta)


def rewire_for_scenario(ds: SeriesDataset, spec: ScenarioSpec) -> SeriesDataset:
    if spec.name == "ST-NSP":
        return _pivot_single_target(ds, spec, include_env=False)
    if spec.name == "ST-NSP-EV":
        return _pivot_single_target(ds, spec, include_env=True)
    if spec.name == "MT-MPC":
        return _per_site(ds, spec, statics=[spec.point_attribute], include_env=False)
    # MT-MPC-PK-EV
    statics = list(ds.schema.statics)
    if not statics:
        raise ConfigError(f"{spec.name} needs static attributes; the dataset has none")
    return _per_site(ds, spec, statics=statics, include_env=True)


# ---------------------------------------------------------------------------
# Scenario harness
# ---------------------------------------------------------------------------


def dataset_fingerprint(ds: SeriesDataset) -> str:
    """Content hash of a dataset: schema, vocabularies, and raw arrays."""
    h = hashlib.sha256()
    h.update(json.dumps(ds.schema.to_dict(), sort_keys=True).encode())
    h.update(json.dumps({k: [str(v) for v in vs] for k, vs in ds.vocabularies.items()}, sort_keys=True).encode())
    for s in ds.series:
        h.update(s.series_id.encode())
        h.update(np.int64(s.start).tobytes())
        for name in sorted(s.continuous):
            h.update(name.encode())
            h.update(np.ascontiguousarray(s.continuous[name]).tobytes())
        for name in sorted(s.categorical):
            h.update(name.encode())
            h.update(np.ascontiguousarray(s.categorical[name]).tobytes())
        h.update(np.ascontiguousarray(s.static_indices).tobytes())
    return h.hexdigest()


def predict_chunked(model: LfitModel, batch: WindowBatch, chunk: int = 256) -> tuple[Forecast, list[Explanation]]:
    forecasts, explanations = [], []
    for start in range(0, len(batch), chunk):
        part = batch.take(np.arange(start, min(start + chunk, len(batch))))
        fc, ex = model.predict(part)
        forecasts.append(fc)
        explanations.append(ex)
    merged = Forecast(
        values=np.concatenate([f.values for f in forecasts]),
        quantiles=forecasts[0].quantiles,
        target_names=forecasts[0].target_names,
        series_ids=np.concatenate([f.series_ids for f in forecasts]),
        anchors=np.concatenate([f.anchors for f in forecasts]),
    )
    return merged, explanations


@dataclass
class ScenarioResult:
    report: MetricReport
    importance: ImportanceSummary
    explanations: list[Explanation]
    forecast: Forecast
    model: LfitModel
    training_log: TrainingLog
    manifest: dict


def run_scenario(
    ds: SeriesDataset,
    spec: ScenarioSpec,
    model_cfg: dict,
    train_cfg: TrainConfig,
    out_dir=None,
    test_fraction: float = 0.2,
    model_seed: int = 0,
    manifest_extra: dict | None = None,
) -> ScenarioResult:
    """Rewire, train, evaluate on the chronological tail, write artifacts.

    ``model_cfg`` must carry ``encoder_length`` and ``horizon``; remaining
    keys override LfitConfig defaults. The test split never feeds training;
    the training loop splits its own validation tail off the head.
    ``manifest_extra`` entries land in the manifest verbatim (callers record
    provenance such as input-file hashes there).
    """
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    cfg_args = dict(model_cfg)
    try:
        encoder_length = cfg_args.pop("encoder_length")
        horizon = cfg_args.pop("horizon")
    except KeyError as e:
        raise ConfigError(f"model_cfg requires {e.args[0]!r}")

    derived = rewire_for_scenario(ds, spec)
    windows = build_windows(derived, encoder_length, horizon)
    head, test = split_windows(windows, test_fraction)

    config = LfitConfig.from_dataset(derived, encoder_length, horizon, **cfg_args)
    model = LfitModel(config, np.random.default_rng(model_seed), vocabularies=derived.vocabularies)
    training_log = train(model, head, train_cfg)

    test.standardizer = model.standardizer
    forecast, explanations = predict_chunked(model, test)
    actual = np.transpose(test.future_targets, (0, 2, 1))
    report = compute_metrics(forecast.values, actual, config.quantiles, config.target_channels)
    importance = aggregate_importance(explanations)

    manifest = {
        "scenario": spec.name,
        "target_site": spec.target_site,
        "model_config": config.to_dict(),
        "train_config": {
            "batch_size": train_cfg.batch_size,
            "learning_rate": train_cfg.learning_rate,
            "weight_decay": train_cfg.weight_decay,
            "max_epochs": train_cfg.max_epochs,
            "early_stop_patience": train_cfg.early_stop_patience,
            "seed": train_cfg.seed,
            "validation_fraction": train_cfg.validation_fraction,
        },
        "model_seed": model_seed,
        "test_fraction": test_fraction,
        "dataset_fingerprint": dataset_fingerprint(ds),
        "n_windows": {"train": len(head), "test": len(test)},
        "best_epoch": training_log.best_epoch,
    }
    if manifest_extra:
        manifest.update(manifest_extra)

    result = ScenarioResult(
        report=report,
        importance=importance,
        explanations=explanations,
        forecast=forecast,
        model=model,
        training_log=training_log,
        manifest=manifest,
    )
    if out_dir is not None:
        write_run_dir(out_dir, result)
    return result


# ---------------------------------------------------------------------------
# Run-directory writers
# ---------------------------------------------------------------------------


def write_metrics_csv(path, report: MetricReport, baseline: MetricReport | None = None) -> None:
    """Long-format metrics; a baseline column appears only when supplied."""

    def fmt(v) -> str:
        return "" if v is None else repr(float(v))

    def rows_of(rep: MetricReport) -> dict[tuple, float | None]:
        out = {}
        for target, metrics in rep.per_target.items():
            for metric, steps in metrics.items():
                for t, v in enumerate(steps):
                    out[(target, str(t), metric)] = v
        for metric, v in rep.aggregates.items():
            out[(_AGGREGATE, "", metric)] = v
        out[(_AGGREGATE, "", "crossing_rate")] = rep.crossing_rate
        for pair, v in rep.coverage.items():
            out[(_AGGREGATE, "", f"coverage_{pair}")] = v
        return out

    main = rows_of(report)
    side = rows_of(baseline) if baseline is not None else None
    with open(path, "w") as f:
        f.write("target,step,metric,value" + (",baseline_value\n" if side is not None else "\n"))
        for key, v in main.items():
            line = f"{key[0]},{key[1]},{key[2]},{fmt(v)}"
            if side is not None:
                line += f",{fmt(side.get(key))}"
            f.write(line + "\n")


def write_importance_csv(path, summary: ImportanceSummary) -> None:
    with open(path, "w") as f:
        f.write("group,channel,mean_weight,std_weight\n")
        for group, names, means, stds in (
            ("past", summary.past_channels, summary.past_mean, summary.past_std),
            ("future", summary.future_channels, summary.future_mean, summary.future_std),
            ("static", summary.static_channels, summary.static_mean, summary.static_std),
        ):
            if means is None:
                continue
            for name, m, s in zip(names, means, stds):
                f.write(f"{group},{name},{float(m)!r},{float(s)!r}\n")
        for lag, v in zip(summary.attention_lags, summary.attention_profile):
            if np.isnan(v):
                continue
            f.write(f"attention_lag,{int(lag)},{float(v)!r},\n")


def write_forecasts_csv(path, forecast: Forecast) -> None:
    with open(path, "w") as f:
        f.write("series_id,anchor,target,step,quantile,value\n")
        N, m, tau, Q = forecast.values.shape
        for n in range(N):
            sid, anchor = forecast.series_ids[n], forecast.anchors[n]
            for i in range(m):
                for t in range(tau):
                    for j in range(Q):
                        f.write(
                            f"{sid},{anchor},{forecast.target_names[i]},{t},"
                            f"{forecast.quantiles[j]:g},{float(forecast.values[n, i, t, j])!r}\n"
                        )


def write_attention_dir(dir_path, forecast: Forecast, explanations: list[Explanation]) -> None:
    import os

    os.makedirs(dir_path, exist_ok=True)
    offset = 0
    for ex in explanations:
        for b in range(ex.mean_attention.shape[0]):
            sid = forecast.series_ids[offset + b]
            anchor = forecast.anchors[offset + b]
            np.savetxt(
                os.path.join(dir_path, f"{sid}_{anchor}.csv"),
                ex.mean_attention[b],
                delimiter=",",
                fmt="%.17g",
            )
        offset += ex.mean_attention.shape[0]


def write_run_dir(out_dir, result: ScenarioResult) -> None:
    """manifest.json, metrics.csv, importance.csv, forecasts.csv,
    training_log.csv, attention/<window_id>.csv, model.lfit."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(result.manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"), result.report)
    write_importance_csv(os.path.join(out_dir, "importance.csv"), result.importance)
    write_forecasts_csv(os.path.join(out_dir, "forecasts.csv"), result.forecast)
    result.training_log.write_csv(os.path.join(out_dir, "training_log.csv"))
    write_attention_dir(os.path.join(out_dir, "attention"), result.forecast, result.explanations)
    save_model(result.model, os.path.join(out_dir, "model.lfit"))
