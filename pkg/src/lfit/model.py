"""The full forecasting network and its serialized container format.

The pipeline, in order: per-channel embeddings; static covariate encoding
into four context vectors; variable selection over past and future-known
inputs; an LSTM encoder/decoder seeded from the static contexts; a gated
residual merge; static enrichment; interpretable multi-head attention over
the whole window under a causal mask; a final gated block; and per-target
linear quantile heads over the decoder positions only.

Forecast values are de-standardized to original units; the training path
(`forward_tensors`) stays on the standardized scale.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dataset import SeriesDataset, WindowBatch
from .errors import ConfigError, ContractError, DataError, ModelFormatError
from .layers import GateAddNorm, GrnBlock, InputEmbedder, LinearLayer, LstmCell
from .selection import CausalMask, InterpretableAttention, PriorKnowledgeEncoder, VariableSelector
from .tensor import Tensor

_MAGIC = b"LFIT"
_VERSION = 1

DEFAULT_QUANTILES = (0.02, 0.1, 0.25, 0.5, 0.75, 0.9, 0.98)

# Synthetic decoder input: fraction of the combined window elapsed at each
# step, in (0, 1]. Always present so the decoder has an input even when no
# known-future channels are configured. Kept strictly positive: with
# zero-initialized biases an exactly-zero input would push a normalization
# row into its epsilon floor, where finite-difference gradient checks lose
# accuracy to extreme curvature.
HORIZON_POSITION = "horizon_position"


@dataclass
class LfitConfig:
    target_channels: list[str]
    encoder_length: int
    horizon: int
    observed_channels: list[str] = field(default_factory=list)
    known_continuous_channels: list[str] = field(default_factory=list)
    known_categorical_channels: dict[str, int] = field(default_factory=dict)  # name -> cardinality
    static_channels: dict[str, int] = field(default_factory=dict)  # name -> cardinality
    d_model: int = 16
    n_heads: int = 4
    quantiles: tuple = DEFAULT_QUANTILES
    dropout_rate: float = 0.1

    def __post_init__(self):
        self.quantiles = tuple(float(q) for q in self.quantiles)
        if not self.target_channels:
            raise ConfigError("at least one target channel is required")
        if self.encoder_length < 1 or self.horizon < 1:
            raise ConfigError("encoder_length and horizon must be >= 1")
        qs = np.asarray(self.quantiles)
        if qs.size == 0 or np.any(qs <= 0) or np.any(qs >= 1) or np.any(np.diff(qs) <= 0):
            raise ConfigError(f"quantiles must be strictly increasing within (0, 1): {self.quantiles}")
        if self.d_model < self.n_heads or self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} must be a multiple of n_heads {self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        for card_map in (self.known_categorical_channels, self.static_channels):
            for name, card in card_map.items():
                if card < 1:
                    raise ConfigError(f"cardinality of {name!r} must be >= 1, got {card}")

    @property
    def past_channel_names(self) -> list[str]:
        return (
            self.target_channels
            + self.observed_channels
            + self.known_continuous_channels
            + list(self.known_categorical_channels)
        )

    @property
    def future_channel_names(self) -> list[str]:
        return (
            self.known_continuous_channels
            + list(self.known_categorical_channels)
            + [HORIZON_POSITION]
        )

    def to_dict(self) -> dict:
        return {
            "target_channels": list(self.target_channels),
            "encoder_length": self.encoder_length,
            "horizon": self.horizon,
            "observed_channels": list(self.observed_channels),
            "known_continuous_channels": list(self.known_continuous_channels),
            "known_categorical_channels": dict(self.known_categorical_channels),
            "static_channels": dict(self.static_channels),
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "quantiles": list(self.quantiles),
            "dropout_rate": self.dropout_rate,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "LfitConfig":
        return cls(**{**raw, "quantiles": tuple(raw["quantiles"])})

    @classmethod
    def from_dataset(cls, ds: SeriesDataset, encoder_length: int, horizon: int, **overrides) -> "LfitConfig":
        schema = ds.schema
        return cls(
            target_channels=list(schema.targets),
            encoder_length=encoder_length,
            horizon=horizon,
            observed_channels=list(schema.observed),
            known_continuous_channels=list(schema.known_continuous),
            known_categorical_channels={n: len(ds.vocabularies[n]) for n in schema.known_categorical},
            static_channels={n: len(ds.vocabularies[n]) for n in schema.statics},
            **overrides,
        )


@dataclass
class Forecast:
    """Quantile forecasts in original units, [B, targets, horizon, |Q|]."""

    values: np.ndarray
    quantiles: tuple
    target_names: list[str]
    series_ids: np.ndarray
    anchors: np.ndarray

    def median(self) -> np.ndarray:
        """Point forecast [B, targets, horizon] at the 0.5 quantile."""
        try:
            j = self.quantiles.index(0.5)
        except ValueError:
            raise ConfigError("no 0.5 quantile configured; median forecast undefined")
        return self.values[..., j]


@dataclass
class Explanation:
    """Interpretability artifacts of one forward pass.

    Attention rows cover the combined encoder+decoder sequence of length
    k + horizon; selection weights are per time step and channel.
    """

    mean_attention: np.ndarray  # [B, T, T]
    past_variable_weights: np.ndarray  # [B, k, n_past]
    future_variable_weights: np.ndarray  # [B, tau, n_future]
    static_weights: np.ndarray | None  # [B, n_static]
    past_channels: list[str]
    future_channels: list[str]
    static_channels: list[str]
    encoder_length: int


class LfitModel:
    """Knowledge-infused temporal fusion forecaster."""

    def __init__(self, config: LfitConfig, rng: np.random.Generator, vocabularies: dict | None = None):
        self.config = config
        self.vocabularies = dict(vocabularies or {})
        self.standardizer = None
        c = config
        d = c.d_model
        drop = c.dropout_rate

        continuous = (
            c.target_channels + c.observed_channels + c.known_continuous_channels + [HORIZON_POSITION]
        )
        self.embedder = InputEmbedder(
            continuous, list(c.known_categorical_channels.items()), d, rng
        )
        self.static_embedder = (
            InputEmbedder([], list(c.static_channels.items()), d, rng) if c.static_channels else None
        )
        self.pk_encoder = (
            PriorKnowledgeEncoder(len(c.static_channels), d, rng, dropout_rate=drop)
            if c.static_channels
            else None
        )
        n_past = len(c.past_channel_names)
        n_future = len(c.future_channel_names)
        has_static = bool(c.static_channels)
        self.past_selector = VariableSelector(n_past, d, rng, uses_context=has_static, dropout_rate=drop)
        self.future_selector = VariableSelector(n_future, d, rng, uses_context=has_static, dropout_rate=drop)
        self.encoder_cell = LstmCell(d, d, rng)
        self.decoder_cell = LstmCell(d, d, rng)
        self.post_lstm_gate = GateAddNorm(d, rng)
        self.enrichment_grn = GrnBlock(d, d, d, rng, context_size=d if has_static else None, dropout_rate=drop)
        self.attention = InterpretableAttention(d, c.n_heads, rng)
        self.post_attn_gate = GateAddNorm(d, rng)
        self.final_grn = GrnBlock(d, d, d, rng, dropout_rate=drop)
        self.output_heads = {name: LinearLayer(d, len(c.quantiles), rng) for name in c.target_channels}
        self.mask = CausalMask(c.encoder_length + c.horizon)

    # ------------------------------------------------------------------
    # Parameters
    # ------------------------------------------------------------------

    def parameters(self) -> list[tuple[str, Tensor]]:
        groups: list[tuple[str, list[tuple[str, Tensor]]]] = [("embedder", self.embedder.parameters())]
        if self.static_embedder is not None:
            groups.append(("static_embedder", self.static_embedder.parameters()))
        if self.pk_encoder is not None:
            groups.append(("pk_encoder", self.pk_encoder.parameters()))
        groups += [
            ("past_selector", self.past_selector.parameters()),
            ("future_selector", self.future_selector.parameters()),
            ("encoder_cell", self.encoder_cell.parameters()),
            ("decoder_cell", self.decoder_cell.parameters()),
            ("post_lstm_gate", self.post_lstm_gate.parameters()),
            ("enrichment_grn", self.enrichment_grn.parameters()),
            ("attention", self.attention.parameters()),
            ("post_attn_gate", self.post_attn_gate.parameters()),
            ("final_grn", self.final_grn.parameters()),
        ]
        for tname, head in self.output_heads.items():
            groups.append((f"head.{tname}", head.parameters()))
        return [(f"{g}.{n}", p) for g, sub in groups for n, p in sub]

    # ------------------------------------------------------------------
    # Forward
    # ------------------------------------------------------------------

    def _validate_batch(self, batch: WindowBatch) -> None:
        c = self.config
        expected_past = c.target_channels + c.observed_channels + c.known_continuous_channels
        if batch.past_continuous_names != expected_past:
            raise ContractError(
                f"batch past channels {batch.past_continuous_names} do not match config {expected_past}"
            )
        if batch.known_categorical_names != list(c.known_categorical_channels):
            raise ContractError(
                f"batch categorical channels {batch.known_categorical_names} "
                f"do not match config {list(c.known_categorical_channels)}"
            )
        if batch.encoder_length != c.encoder_length or batch.horizon != c.horizon:
            raise ContractError(
                f"batch window ({batch.encoder_length}, {batch.horizon}) does not match "
                f"config ({c.encoder_length}, {c.horizon})"
            )
        if c.static_channels:
            if batch.static_indices is None or batch.static_names != list(c.static_channels):
                raise ContractError("batch lacks the static channels the model was configured with")
        for names, block in (
            (batch.past_continuous_names, batch.past_continuous),
            (batch.known_continuous_names, batch.future_continuous),
        ):
            for j, name in enumerate(names):
                if not np.all(np.isfinite(block[..., j])):
                    raise DataError(f"non-finite values in channel {name!r}")

    def _standardize(self, batch: WindowBatch) -> tuple[np.ndarray, np.ndarray]:
        std = batch.standardizer if batch.standardizer is not None else self.standardizer
        past = batch.past_continuous
        future = batch.future_continuous
        if std is None:
            return past, future
        past_cols = [std.transform(n, past[:, :, j]) for j, n in enumerate(batch.past_continuous_names)]
        fut_cols = [std.transform(n, future[:, :, j]) for j, n in enumerate(batch.known_continuous_names)]
        past_out = np.stack(past_cols, axis=-1) if past_cols else past
        fut_out = np.stack(fut_cols, axis=-1) if fut_cols else future
        return past_out, fut_out

    def _forward(self, batch: WindowBatch, training: bool, rng: np.random.Generator | None) -> dict:
        self._validate_batch(batch)
        c = self.config
        B, k, tau, d = len(batch), c.encoder_length, c.horizon, c.d_model
        past_vals, future_vals = self._standardize(batch)

        # Decoder-only position signal: elapsed window fraction, (0, 1].
        # Kept strictly positive so zero-bias embeddings of it never produce
        # an all-zero pre-norm row (layer_norm curvature blows up at var 0).
        positions = (np.arange(k + tau) + 1.0) / (k + tau)
        future_pos = np.broadcast_to(positions[k:, None], (B, tau, 1)).copy()

        past_embeds: list[Tensor] = []
        for j, name in enumerate(batch.past_continuous_names):
            past_embeds.append(
                self.embedder.embed_continuous_channel(name, Tensor(past_vals[:, :, j : j + 1]))
            )
        for j, name in enumerate(batch.known_categorical_names):
            past_embeds.append(self.embedder.embed_categorical_channel(name, batch.past_categorical[:, :, j]))

        future_embeds: list[Tensor] = []
        for j, name in enumerate(batch.known_continuous_names):
            future_embeds.append(
                self.embedder.embed_continuous_channel(name, Tensor(future_vals[:, :, j : j + 1]))
            )
        for j, name in enumerate(batch.known_categorical_names):
            future_embeds.append(
                self.embedder.embed_categorical_channel(name, batch.future_categorical[:, :, j])
            )
        future_embeds.append(self.embedder.embed_continuous_channel(HORIZON_POSITION, Tensor(future_pos)))

        contexts = None
        if self.pk_encoder is not None:
            static_embeds = [
                self.static_embedder.embed_categorical_channel(name, batch.static_indices[:, j])
                for j, name in enumerate(batch.static_names)
            ]
            contexts = self.pk_encoder(static_embeds, training=training, rng=rng)

        def timewise(ctx: Tensor) -> Tensor:
            return T.reshape(ctx, (B, 1, d))

        sel_ctx = timewise(contexts.selection) if contexts is not None else None
        z_past, w_past = self.past_selector(past_embeds, context=sel_ctx, training=training, rng=rng)
        z_future, w_future = self.future_selector(future_embeds, context=sel_ctx, training=training, rng=rng)

        h = contexts.hidden_init if contexts is not None else Tensor(np.zeros((B, d)))
        cell = contexts.cell_init if contexts is not None else Tensor(np.zeros((B, d)))
        states: list[Tensor] = []
        for t in range(k):
            x_t = T.reshape(T.narrow(z_past, 1, t, 1), (B, d))
            h, cell = self.encoder_cell.step(x_t, h, cell)
            states.append(h)
        for t in range(tau):
            x_t = T.reshape(T.narrow(z_future, 1, t, 1), (B, d))
            h, cell = self.decoder_cell.step(x_t, h, cell)
            states.append(h)
        lstm_out = T.stack(states, axis=1)

        skip = T.concat([z_past, z_future], axis=1)
        temporal = self.post_lstm_gate(lstm_out, skip)

        enr_ctx = timewise(contexts.enrichment) if contexts is not None else None
        enriched = self.enrichment_grn(temporal, enr_ctx, training=training, rng=rng)

        attn_out, mean_attn = self.attention(enriched, self.mask)
        fused = self.post_attn_gate(attn_out, enriched)
        final = self.final_grn(fused, training=training, rng=rng)

        decoder_slice = T.narrow(final, 1, k, tau)
        per_target = [self.output_heads[name](decoder_slice) for name in c.target_channels]
        out = T.stack(per_target, axis=1)  # [B, m, tau, |Q|]

        return {
            "out": out,
            "mean_attention": mean_attn,
            "past_weights": w_past,
            "future_weights": w_future,
            "static_weights": contexts.weights if contexts is not None else None,
        }

    def forward_tensors(self, batch: WindowBatch, training: bool = False, rng=None) -> Tensor:
        """Standardized quantile outputs [B, m, tau, |Q|], graph-connected."""
        return self._forward(batch, training, rng)["out"]

    def predict(self, batch: WindowBatch) -> tuple[Forecast, Explanation]:
        """Inference: de-standardized forecasts plus explanation artifacts."""
        result = self._forward(batch, training=False, rng=None)
        raw = result["out"].data
        std = batch.standardizer if batch.standardizer is not None else self.standardizer
        values = np.empty_like(raw)
        for i, name in enumerate(self.config.target_channels):
            values[:, i] = std.invert(name, raw[:, i]) if std is not None else raw[:, i]
        forecast = Forecast(
            values=values,
            quantiles=self.config.quantiles,
            target_names=list(self.config.target_channels),
            series_ids=batch.series_ids,
            anchors=batch.anchors,
        )
        explanation = Explanation(
            mean_attention=result["mean_attention"].data,
            past_variable_weights=result["past_weights"].data,
            future_variable_weights=result["future_weights"].data,
            static_weights=None if result["static_weights"] is None else result["static_weights"].data,
            past_channels=self.config.past_channel_names,
            future_channels=self.config.future_channel_names,
            static_channels=list(self.config.static_channels),
            encoder_length=self.config.encoder_length,
        )
        return forecast, explanation

    def explain(self, batch: WindowBatch) -> Explanation:
        return self.predict(batch)[1]


def extract_explanation(model: LfitModel, batch: WindowBatch) -> Explanation:
    return model.explain(batch)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _jsonable(values: list) -> list:
    return [v.item() if isinstance(v, np.generic) else v for v in values]


def save_model(model: LfitModel, path) -> None:
    """Versioned binary container: header JSON + named float64 LE blocks."""
    header = {
        "config": model.config.to_dict(),
        "standardizer": None if model.standardizer is None else model.standardizer.to_dict(),
        "vocabularies": {k: _jsonable(v) for k, v in model.vocabularies.items()},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    params = model.parameters()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(params)))
        for name, p in params:
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", p.data.ndim))
            for extent in p.data.shape:
                f.write(struct.pack("<I", extent))
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_model(path) -> LfitModel:
    from .training import Standardizer

    with open(path, "rb") as f:
        data = f.read()

    def take(offset: int, n: int) -> tuple[bytes, int]:
        if offset + n > len(data):
            raise ModelFormatError("model file is truncated")
        return data[offset : offset + n], offset + n

    chunk, off = take(0, 4)
    if chunk != _MAGIC:
        raise ModelFormatError("not a model file (bad magic header)")
    chunk, off = take(off, 4)
    version = struct.unpack("<I", chunk)[0]
    if version != _VERSION:
        raise ModelFormatError(f"unsupported model format version {version} (expected {_VERSION})")
    chunk, off = take(off, 4)
    header_len = struct.unpack("<I", chunk)[0]
    chunk, off = take(off, header_len)
    try:
        header = json.loads(chunk.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelFormatError(f"model header is corrupted: {e}")

    config = LfitConfig.from_dict(header["config"])
    model = LfitModel(config, np.random.default_rng(0), vocabularies=header.get("vocabularies") or {})
    if header.get("standardizer") is not None:
        model.standardizer = Standardizer.from_dict(header["standardizer"])

    chunk, off = take(off, 4)
    n_params = struct.unpack("<I", chunk)[0]
    by_name = dict(model.parameters())
    if n_params != len(by_name):
        raise ModelFormatError(f"model file holds {n_params} parameters, architecture has {len(by_name)}")
    for _ in range(n_params):
        chunk, off = take(off, 2)
        name_len = struct.unpack("<H", chunk)[0]
        chunk, off = take(off, name_len)
        name = chunk.decode("utf-8")
        chunk, off = take(off, 1)
        ndim = struct.unpack("<B", chunk)[0]
        shape = []
        for _ in range(ndim):
            chunk, off = take(off, 4)
            shape.append(struct.unpack("<I", chunk)[0])
        count = int(np.prod(shape)) if shape else 1
        chunk, off = take(off, 8 * count)
        if name not in by_name:
            raise ModelFormatError(f"model file names unknown parameter {name!r}")
        target = by_name[name]
        if tuple(shape) != target.data.shape:
            raise ModelFormatError(
                f"parameter {name!r} has shape {tuple(shape)}, architecture expects {target.data.shape}"
            )
        target.data = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
    if off != len(data):
        raise ModelFormatError("trailing bytes after the last parameter block")
    return model
