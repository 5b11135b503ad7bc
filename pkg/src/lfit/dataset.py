"""Dataset ingestion, windowing, and the synthetic oracle generator.

Data arrives as a long-format CSV (series_id, timestamp, channel columns)
plus a JSON schema assigning each channel a role: target, observed (past
only), known_future, or static. Timestamps may be ISO-8601 or plain integer
step indices; either way they map onto one global integer timeline shared by
all series so windows from different sites stay aligned.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import ConfigError, ContractError, DataError, VocabularyError

log = logging.getLogger(__name__)

_ROLES = ("target", "observed", "known_future", "static")

# Calendar channels derived from timestamps when the schema asks for them.
_MONTH = "month"
_SEASON = "season"
_TIME_INDEX = "time_index"


@dataclass
class ChannelSchema:
    """Channel names grouped by role, plus ingestion options."""

    targets: list[str]
    observed: list[str] = field(default_factory=list)
    known_continuous: list[str] = field(default_factory=list)
    known_categorical: list[str] = field(default_factory=list)
    statics: list[str] = field(default_factory=list)
    drop_missing_threshold: float = 0.7
    derive_calendar: bool = False
    integrate: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.targets:
            raise ConfigError("schema declares no target channel")
        if not 0.0 < self.drop_missing_threshold <= 1.0:
            raise ConfigError(f"drop threshold must be in (0, 1], got {self.drop_missing_threshold}")
        if self.derive_calendar:
            if _TIME_INDEX not in self.known_continuous:
                self.known_continuous = self.known_continuous + [_TIME_INDEX]
            for name in (_MONTH, _SEASON):
                if name not in self.known_categorical:
                    self.known_categorical = self.known_categorical + [name]
        names = self.continuous_channels() + self.known_categorical + self.statics
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise ConfigError(f"channel declared under multiple roles: {sorted(dupes)}")

    def continuous_channels(self) -> list[str]:
        return self.targets + self.observed + self.known_continuous

    def to_dict(self) -> dict:
        channels: dict[str, dict] = {}
        for name in self.targets:
            channels[name] = {"role": "target"}
        for name in self.observed:
            channels[name] = {"role": "observed"}
        for name in self.known_continuous:
            if not (self.derive_calendar and name == _TIME_INDEX):
                channels[name] = {"role": "known_future"}
        for name in self.known_categorical:
            if not (self.derive_calendar and name in (_MONTH, _SEASON)):
                channels[name] = {"role": "known_future", "kind": "categorical"}
        for name in self.statics:
            channels[name] = {"role": "static"}
        out = {"channels": channels, "drop_missing_threshold": self.drop_missing_threshold}
        if self.derive_calendar:
            out["derive_calendar"] = True
        if self.integrate:
            out["integrate"] = self.integrate
        return out


def schema_from_dict(raw: dict) -> ChannelSchema:
    channels = raw.get("channels")
    if not isinstance(channels, dict) or not channels:
        raise ConfigError("schema needs a non-empty 'channels' mapping")
    groups: dict[str, list[str]] = {"target": [], "observed": [], "known_cont": [], "known_cat": [], "static": []}
    for name, entry in channels.items():
        if isinstance(entry, str):
            entry = {"role": entry}
        role = entry.get("role")
        if role not in _ROLES:
            raise ConfigError(f"channel {name!r} has unknown role {role!r}; expected one of {_ROLES}")
        kind = entry.get("kind", "categorical" if role == "static" else "continuous")
        if role == "known_future" and kind == "categorical":
            groups["known_cat"].append(name)
        elif role == "known_future":
            groups["known_cont"].append(name)
        elif role == "target":
            groups["target"].append(name)
        elif role == "observed":
            groups["observed"].append(name)
        else:
            groups["static"].append(name)
    return ChannelSchema(
        targets=groups["target"],
        observed=groups["observed"],
        known_continuous=groups["known_cont"],
        known_categorical=groups["known_cat"],
        statics=groups["static"],
        drop_missing_threshold=raw.get("drop_missing_threshold", 0.7),
        derive_calendar=raw.get("derive_calendar", False),
        integrate={k: list(v) for k, v in raw.get("integrate", {}).items()},
    )


def load_schema(path) -> ChannelSchema:
    with open(path) as f:
        return schema_from_dict(json.load(f))


@dataclass
class Series:
    """One monitoring series on the global timeline, fully gap-filled."""

    series_id: str
    start: int  # global index of the first row
    continuous: dict[str, np.ndarray]
    categorical: dict[str, np.ndarray]  # encoded indices
    static_indices: np.ndarray
    static_values: dict[str, str]

    @property
    def length(self) -> int:
        return len(next(iter(self.continuous.values())))


@dataclass
class SeriesDataset:
    schema: ChannelSchema
    series: list[Series]
    vocabularies: dict[str, list]  # statics and categorical dynamics -> ordered raw values
    metadata: dict = field(default_factory=dict)

    @property
    def series_ids(self) -> list[str]:
        return [s.series_id for s in self.series]


def integrate_displacement(components: list[np.ndarray]) -> np.ndarray:
    """Euclidean norm across direction components, element-wise in time."""
    if not components:
        raise ContractError("no displacement components given")
    arrays = [np.asarray(c, dtype=np.float64) for c in components]
    lengths = {a.shape for a in arrays}
    if len(lengths) > 1:
        raise ContractError(f"component series lengths differ: {sorted(lengths)}")
    return np.sqrt(np.sum([a * a for a in arrays], axis=0))


def _sort_key(values) -> list:
    """Numeric order when every value parses as a number, else lexicographic."""
    try:
        return sorted(values, key=lambda v: (float(v), str(v)))
    except (TypeError, ValueError):
        return sorted(values, key=str)


def _parse_timestamps(raw: pd.Series) -> np.ndarray:
    """Map timestamps to comparable keys: plain ints or datetimes."""
    if np.issubdtype(raw.dtype, np.floating):
        arr = raw.to_numpy()
        if not np.all(np.isfinite(arr)) or not np.all(arr == np.round(arr)):
            raise DataError("numeric timestamps must be whole steps")
        return arr.astype(np.int64)
    try:
        return raw.astype(np.int64).to_numpy()
    except (TypeError, ValueError):
        pass
    parsed = pd.to_datetime(raw, errors="coerce", format="ISO8601")
    if parsed.isna().any():
        bad = raw[parsed.isna()].iloc[0]
        raise DataError(f"unparseable timestamp {bad!r}; use ISO-8601 or integer steps")
    return parsed.to_numpy()


def _interpolate(values: np.ndarray, series_id: str, channel: str, counter: dict) -> np.ndarray:
    """Linear fill for interior gaps, nearest value at the edges."""
    missing = ~np.isfinite(values)
    if not missing.any():
        return values
    if missing.all():
        raise DataError(f"channel {channel!r} of series {series_id!r} has no observed values")
    idx = np.arange(len(values))
    filled = np.interp(idx, idx[~missing], values[~missing])
    n = int(missing.sum())
    counter[f"{series_id}/{channel}"] = n
    log.info("filled %d missing values in %s/%s", n, series_id, channel)
    return filled


def load_csv(path, schema: ChannelSchema, statics_path=None) -> SeriesDataset:
    """Ingest a long-format CSV into a gap-free SeriesDataset.

    Series whose target channels are missing beyond the schema threshold are
    dropped (and logged); remaining gaps are interpolated. Raises DataError
    for structural problems: absent columns, duplicate keys, non-finite
    values that interpolation cannot explain.
    """
    frame = pd.read_csv(path, float_precision="round_trip")
    for col in ("series_id", "timestamp"):
        if col not in frame.columns:
            raise DataError(f"data file {path} lacks required column {col!r}")

    component_cols = [c for comps in schema.integrate.values() for c in comps]
    dynamic_raw = [c for c in schema.continuous_channels() if c not in schema.integrate]
    if schema.derive_calendar:
        dynamic_raw = [c for c in dynamic_raw if c != _TIME_INDEX]
    needed = dynamic_raw + component_cols + [
        c for c in schema.known_categorical if not (schema.derive_calendar and c in (_MONTH, _SEASON))
    ]
    missing_cols = [c for c in needed if c not in frame.columns]
    if missing_cols:
        raise DataError(f"data file lacks channel columns {missing_cols}")

    dup = frame.duplicated(subset=["series_id", "timestamp"])
    if dup.any():
        row = frame[dup].iloc[0]
        raise DataError(f"duplicate (series_id, timestamp) key: ({row['series_id']!r}, {row['timestamp']!r})")

    keys = _parse_timestamps(frame["timestamp"])
    frame = frame.assign(_key=keys)
    timeline = np.sort(np.unique(keys))
    key_to_index = {k: i for i, k in enumerate(timeline)}
    frame["_gidx"] = [key_to_index[k] for k in frame["_key"]]

    static_table = None
    if statics_path is not None:
        static_table = pd.read_csv(statics_path)
        if "series_id" not in static_table.columns:
            raise DataError("statics file lacks 'series_id' column")
        static_table = static_table.set_index("series_id")

    fills: dict[str, int] = {}
    dropped: list[str] = []
    kept: list[dict] = []
    for sid, g in frame.groupby("series_id", sort=True):
        g = g.sort_values("_gidx")
        start, end = int(g["_gidx"].iloc[0]), int(g["_gidx"].iloc[-1])
        span = end - start + 1
        # Re-index onto the contiguous global range so interior timestamp gaps
        # become explicit NaN rows that interpolation then fills.
        g = g.set_index("_gidx").reindex(range(start, end + 1))

        drop = False
        for tname in schema.targets:
            cols = schema.integrate.get(tname, [tname])
            miss = max(float(g[c].isna().mean()) for c in cols)
            if miss > schema.drop_missing_threshold:
                log.warning("dropping series %s: target %s missing rate %.2f", sid, tname, miss)
                dropped.append(str(sid))
                drop = True
                break
        if drop:
            continue

        cont: dict[str, np.ndarray] = {}
        for name in dynamic_raw:
            if name in schema.integrate:
                continue
            cont[name] = _interpolate(g[name].to_numpy(dtype=np.float64), str(sid), name, fills)
        for new_name, comps in schema.integrate.items():
            parts = [_interpolate(g[c].to_numpy(dtype=np.float64), str(sid), c, fills) for c in comps]
            cont[new_name] = integrate_displacement(parts)

        cat_raw: dict[str, list] = {}
        for name in schema.known_categorical:
            if schema.derive_calendar and name in (_MONTH, _SEASON):
                continue
            col = g[name]
            if col.isna().any():
                raise DataError(f"categorical channel {name!r} of series {sid!r} has missing values")
            cat_raw[name] = list(col)

        if schema.derive_calendar:
            gidx = np.arange(start, end + 1)
            if np.issubdtype(timeline.dtype, np.integer):
                months = (timeline[gidx] % 12) + 1
            else:
                months = pd.DatetimeIndex(timeline[gidx]).month.to_numpy()
            cat_raw[_MONTH] = [int(m) for m in months]
            cat_raw[_SEASON] = [int((m - 1) // 3 + 1) for m in months]
            cont[_TIME_INDEX] = gidx.astype(np.float64)

        statics: dict[str, str] = {}
        for attr in schema.statics:
            if static_table is not None and attr in static_table.columns:
                if sid not in static_table.index:
                    raise DataError(f"series {sid!r} absent from statics file")
                statics[attr] = str(static_table.loc[sid, attr])
            elif attr in g.columns:
                vals = g[attr].dropna().unique()
                if len(vals) != 1:
                    raise DataError(f"static attribute {attr!r} varies within series {sid!r}")
                statics[attr] = str(vals[0])
            else:
                raise DataError(f"static attribute {attr!r} found nowhere for series {sid!r}")

        for name, arr in cont.items():
            if not np.all(np.isfinite(arr)):
                raise DataError(f"non-finite values in channel {name!r} of series {sid!r}")
        kept.append(
            {"sid": str(sid), "start": start, "cont": cont, "cat_raw": cat_raw, "statics": statics}
        )

    if not kept:
        raise DataError("no series survived ingestion")

    vocabularies: dict[str, list] = {}
    if schema.derive_calendar:
        vocabularies[_MONTH] = list(range(1, 13))
        vocabularies[_SEASON] = list(range(1, 5))
    for name in schema.known_categorical:
        if name in vocabularies:
            continue
        seen = {v for rec in kept for v in rec["cat_raw"][name]}
        vocabularies[name] = _sort_key(seen)
    for attr in schema.statics:
        vocabularies[attr] = _sort_key({rec["statics"][attr] for rec in kept})

    series = []
    for rec in kept:
        cat = {}
        for name in schema.known_categorical:
            lookup = {v: i for i, v in enumerate(vocabularies[name])}
            try:
                cat[name] = np.array([lookup[v] for v in rec["cat_raw"][name]], dtype=np.int64)
            except KeyError as e:
                raise VocabularyError(f"value {e.args[0]!r} of channel {name!r} not in vocabulary")
        static_idx = np.array(
            [vocabularies[attr].index(rec["statics"][attr]) for attr in schema.statics], dtype=np.int64
        )
        series.append(
            Series(
                series_id=rec["sid"],
                start=rec["start"],
                continuous=rec["cont"],
                categorical=cat,
                static_indices=static_idx,
                static_values=rec["statics"],
            )
        )

    meta = {"dropped_series": dropped, "filled_values": fills}
    return SeriesDataset(schema=schema, series=series, vocabularies=vocabularies, metadata=meta)


def encode_statics(ds: SeriesDataset) -> tuple[dict[str, np.ndarray], dict[str, list]]:
    """Per-series static index vectors plus the backing vocabularies."""
    return {s.series_id: s.static_indices for s in ds.series}, {
        a: ds.vocabularies[a] for a in ds.schema.statics
    }


# ---------------------------------------------------------------------------
# Windowing
# ---------------------------------------------------------------------------


@dataclass
class WindowBatch:
    """A batch of encoder/decoder windows in raw (unstandardized) units.

    Channel order inside each block follows the name lists, which in turn
    follow the schema: targets, then observed, then known-continuous for the
    past block; known channels only for the future block.
    """

    past_continuous: np.ndarray  # [N, k, n_past_cont]
    past_categorical: np.ndarray  # [N, k, n_known_cat] int
    future_continuous: np.ndarray  # [N, tau, n_known_cont]
    future_categorical: np.ndarray  # [N, tau, n_known_cat] int
    future_targets: np.ndarray | None  # [N, tau, n_targets]
    static_indices: np.ndarray | None  # [N, n_static] int
    series_ids: np.ndarray  # [N] object
    anchors: np.ndarray  # [N] global index of the first forecast step
    past_continuous_names: list[str]
    known_continuous_names: list[str]
    known_categorical_names: list[str]
    target_names: list[str]
    static_names: list[str]
    standardizer: object | None = None

    def __len__(self) -> int:
        return len(self.series_ids)

    @property
    def encoder_length(self) -> int:
        return self.past_continuous.shape[1]

    @property
    def horizon(self) -> int:
        return self.future_continuous.shape[1]

    def take(self, indices) -> "WindowBatch":
        idx = np.asarray(indices)
        return WindowBatch(
            past_continuous=self.past_continuous[idx],
            past_categorical=self.past_categorical[idx],
            future_continuous=self.future_continuous[idx],
            future_categorical=self.future_categorical[idx],
            future_targets=None if self.future_targets is None else self.future_targets[idx],
            static_indices=None if self.static_indices is None else self.static_indices[idx],
            series_ids=self.series_ids[idx],
            anchors=self.anchors[idx],
            past_continuous_names=self.past_continuous_names,
            known_continuous_names=self.known_continuous_names,
            known_categorical_names=self.known_categorical_names,
            target_names=self.target_names,
            static_names=self.static_names,
            standardizer=self.standardizer,
        )


def build_windows(ds: SeriesDataset, encoder_length: int, horizon: int, stride: int = 1) -> WindowBatch:
    """Slide (encoder_length + horizon)-long windows over every series.

    Windows are ordered by series then by time, so chronological splits are
    contiguous slices per series. Series shorter than one window are skipped
    with a log entry; if nothing remains that is a data error.
    """
    if encoder_length < 1 or horizon < 1 or stride < 1:
        raise ConfigError("encoder length, horizon, and stride must all be >= 1")
    schema = ds.schema
    past_names = schema.targets + schema.observed + schema.known_continuous
    k, tau = encoder_length, horizon

    blocks = {key: [] for key in ("pc", "pcat", "fc", "fcat", "ft", "sid", "anchor", "static")}
    for s in ds.series:
        n = s.length - k - tau + 1
        if n < 1:
            log.warning("series %s too short for windows (%d < %d)", s.series_id, s.length, k + tau)
            continue
        cont = np.stack([s.continuous[c] for c in past_names], axis=-1)
        known_c = (
            np.stack([s.continuous[c] for c in schema.known_continuous], axis=-1)
            if schema.known_continuous
            else np.zeros((s.length, 0))
        )
        known_cat = (
            np.stack([s.categorical[c] for c in schema.known_categorical], axis=-1)
            if schema.known_categorical
            else np.zeros((s.length, 0), dtype=np.int64)
        )
        targets = np.stack([s.continuous[c] for c in schema.targets], axis=-1)
        for a in range(0, n, stride):
            blocks["pc"].append(cont[a : a + k])
            blocks["pcat"].append(known_cat[a : a + k])
            blocks["fc"].append(known_c[a + k : a + k + tau])
            blocks["fcat"].append(known_cat[a + k : a + k + tau])
            blocks["ft"].append(targets[a + k : a + k + tau])
            blocks["sid"].append(s.series_id)
            blocks["anchor"].append(s.start + a + k)
            blocks["static"].append(s.static_indices)

    if not blocks["sid"]:
        raise DataError(f"no series long enough for encoder {k} + horizon {tau}")

    has_statics = bool(schema.statics)
    return WindowBatch(
        past_continuous=np.stack(blocks["pc"]),
        past_categorical=np.stack(blocks["pcat"]),
        future_continuous=np.stack(blocks["fc"]),
        future_categorical=np.stack(blocks["fcat"]),
        future_targets=np.stack(blocks["ft"]),
        static_indices=np.stack(blocks["static"]) if has_statics else None,
        series_ids=np.array(blocks["sid"], dtype=object),
        anchors=np.array(blocks["anchor"], dtype=np.int64),
        past_continuous_names=past_names,
        known_continuous_names=list(schema.known_continuous),
        known_categorical_names=list(schema.known_categorical),
        target_names=list(schema.targets),
        static_names=list(schema.statics),
    )


def split_windows(batch: WindowBatch, tail_fraction: float) -> tuple[WindowBatch, WindowBatch]:
    """Chronological split: the last ceil(fraction * n) windows of each series
    form the tail. Windows inside a batch are already time-ordered per series."""
    if not 0.0 < tail_fraction < 1.0:
        raise ConfigError(f"tail fraction must be in (0, 1), got {tail_fraction}")
    head_idx: list[int] = []
    tail_idx: list[int] = []
    for sid in dict.fromkeys(batch.series_ids):  # preserves first-seen order
        idx = np.flatnonzero(batch.series_ids == sid)
        n_tail = int(np.ceil(tail_fraction * len(idx)))
        n_tail = min(max(n_tail, 1), len(idx))
        head_idx.extend(idx[: len(idx) - n_tail])
        tail_idx.extend(idx[len(idx) - n_tail :])
    if not head_idx:
        raise DataError("chronological split leaves no head windows")
    return batch.take(head_idx), batch.take(tail_idx)


# ---------------------------------------------------------------------------
# Synthetic oracle generator
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Ground-truth-known landslide-like series for oracle tests.

    Water level follows a sinusoid; water-driven series accumulate step-like
    displacement increments proportional to lagged drawdown (the drop in
    water level); rainfall-driven series respond to lagged rain spikes; noise
    series are pure random walks. The true driver of every series lands in
    the dataset metadata.
    """

    n_series: int = 3
    length: int = 120
    period: int = 12
    amplitude: float = 1.0
    rain_rate: float = 0.08
    rain_magnitude: float = 1.0
    modes: list[str] | None = None  # per-series driver, cycled if shorter
    gain: float = 1.0
    lag: int = 1
    trend: float = 0.0
    noise_std: float = 0.05
    target_noise_std: float = 0.0
    noise_covariates: int = 0
    seed: int = 0
    derive_calendar: bool = True

    def __post_init__(self):
        if self.period < 2:
            raise ConfigError(f"period must be >= 2, got {self.period}")
        if self.noise_std < 0 or self.target_noise_std < 0:
            raise ConfigError("noise levels must be non-negative")
        if self.n_series < 1 or self.length < 4:
            raise ConfigError("need at least one series of non-trivial length")
        if self.lag < 0:
            raise ConfigError("lag must be non-negative")


_MODES = ("water", "rainfall", "noise")
_SOILS = ("clay", "gravel", "silt")


def _lagged(x: np.ndarray, lag: int) -> np.ndarray:
    out = np.zeros_like(x)
    if lag == 0:
        return x.copy()
    out[lag:] = x[:-lag]
    return out


def generate_synthetic(spec: SyntheticSpec) -> SeriesDataset:
    rng = np.random.default_rng(spec.seed)
    t = np.arange(spec.length)
    water = spec.amplitude * np.sin(2.0 * np.pi * t / spec.period)
    drawdown = np.zeros(spec.length)
    drawdown[1:] = np.maximum(0.0, -np.diff(water))

    modes = spec.modes or list(_MODES)
    noise_names = [f"noise_cov_{j + 1}" for j in range(spec.noise_covariates)]

    schema = ChannelSchema(
        targets=["displacement"],
        observed=["water_level", "rainfall"] + noise_names,
        known_continuous=[_TIME_INDEX] if spec.derive_calendar else [],
        known_categorical=[_MONTH, _SEASON] if spec.derive_calendar else [],
        statics=["point", "response_class", "soil_class"],
        derive_calendar=spec.derive_calendar,
    )

    records = []
    drivers: dict[str, str] = {}
    for i in range(spec.n_series):
        mode = modes[i % len(modes)]
        if mode not in _MODES:
            raise ConfigError(f"unknown response mode {mode!r}; expected one of {_MODES}")
        sid = f"site{i + 1:02d}"
        drivers[sid] = mode

        rain = np.where(
            rng.random(spec.length) < spec.rain_rate,
            spec.rain_magnitude * rng.exponential(1.0, size=spec.length),
            0.0,
        )
        eps = rng.normal(0.0, spec.noise_std, size=spec.length) if spec.noise_std > 0 else np.zeros(spec.length)
        if mode == "water":
            increments = spec.gain * _lagged(drawdown, spec.lag) + spec.trend + eps
        elif mode == "rainfall":
            increments = spec.gain * _lagged(rain, spec.lag) + spec.trend + eps
        else:
            increments = eps
        displacement = np.cumsum(increments)
        if spec.target_noise_std > 0:
            displacement = displacement + rng.normal(0.0, spec.target_noise_std, size=spec.length)

        cont = {"displacement": displacement, "water_level": water.copy(), "rainfall": rain}
        for name in noise_names:
            cont[name] = rng.normal(0.0, 1.0, size=spec.length)
        cat = {}
        if spec.derive_calendar:
            months = (t % 12) + 1
            cat[_MONTH] = months - 1  # encoded against the fixed 1..12 vocabulary
            cat[_SEASON] = (months - 1) // 3
            cont[_TIME_INDEX] = t.astype(np.float64)
        statics = {"point": sid, "response_class": mode, "soil_class": _SOILS[rng.integers(len(_SOILS))]}
        records.append((sid, cont, cat, statics))

    vocabularies: dict[str, list] = {}
    if spec.derive_calendar:
        vocabularies[_MONTH] = list(range(1, 13))
        vocabularies[_SEASON] = list(range(1, 5))
    vocabularies["point"] = _sort_key({r[0] for r in records})
    vocabularies["response_class"] = _sort_key({r[3]["response_class"] for r in records})
    vocabularies["soil_class"] = _sort_key({r[3]["soil_class"] for r in records})

    series = []
    for sid, cont, cat, statics in records:
        static_idx = np.array(
            [vocabularies[a].index(statics[a]) for a in schema.statics], dtype=np.int64
        )
        series.append(
            Series(
                series_id=sid,
                start=0,
                continuous=cont,
                categorical={k: v.astype(np.int64) for k, v in cat.items()},
                static_indices=static_idx,
                static_values=statics,
            )
        )

    meta = {
        "drivers": drivers,
        "lag": spec.lag,
        "period": spec.period,
        "gain": spec.gain,
        "seed": spec.seed,
    }
    return SeriesDataset(schema=schema, series=series, vocabularies=vocabularies, metadata=meta)


def write_dataset(ds: SeriesDataset, data_path, schema_path=None, statics_path=None) -> None:
    """Write a dataset back to long CSV (+ schema JSON, + statics sidecar).

    Derived calendar channels are omitted from the CSV; loading with the same
    schema re-derives them, so generate -> write -> load round-trips.
    """
    schema = ds.schema
    rows = []
    derived_cont = {_TIME_INDEX} if schema.derive_calendar else set()
    derived_cat = {_MONTH, _SEASON} if schema.derive_calendar else set()
    cont_cols = [c for c in schema.continuous_channels() if c not in derived_cont]
    cat_cols = [c for c in schema.known_categorical if c not in derived_cat]
    for s in ds.series:
        for j in range(s.length):
            row = {"series_id": s.series_id, "timestamp": s.start + j}
            for c in cont_cols:
                row[c] = repr(float(s.continuous[c][j]))
            for c in cat_cols:
                row[c] = ds.vocabularies[c][int(s.categorical[c][j])]
            rows.append(row)
    pd.DataFrame(rows).to_csv(data_path, index=False)

    if statics_path is not None and schema.statics:
        srows = [{"series_id": s.series_id, **s.static_values} for s in ds.series]
        pd.DataFrame(srows).to_csv(statics_path, index=False)
    if schema_path is not None:
        with open(schema_path, "w") as f:
            json.dump(schema.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
