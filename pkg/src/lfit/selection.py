"""Variable selection, static-covariate encoding, and interpretable attention.

The selection networks score every input channel with a softmax so the
weights double as importance readouts. Attention uses one shared value
projection across heads; averaging the per-head attention matrices and
applying the average once to that shared value path is then exactly
equivalent to averaging per-head outputs, which is what makes the averaged
matrix a faithful explanation of the computation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .layers import GrnBlock, LinearLayer
from .tensor import Tensor


class CausalMask:
    """Lower-triangular attention mask: position i may see positions <= i."""

    def __init__(self, length: int):
        if length < 1:
            raise ConfigError(f"mask length must be positive, got {length}")
        self.allowed = np.tril(np.ones((length, length), dtype=bool))

    @property
    def length(self) -> int:
        return self.allowed.shape[0]


class VariableSelector:
    """Scores and mixes a fixed set of channel embeddings.

    Each channel passes through its own gated residual filter; a weighting
    network over the concatenated raw embeddings (optionally conditioned on a
    context vector) produces softmax weights; the output is the weighted sum
    of the filtered channels.
    """

    def __init__(
        self,
        n_channels: int,
        d_model: int,
        rng: np.random.Generator,
        uses_context: bool = False,
        dropout_rate: float = 0.1,
    ):
        if n_channels < 1:
            raise ConfigError(f"selector needs at least one channel, got {n_channels}")
        self.n_channels = n_channels
        self.d_model = d_model
        self.uses_context = uses_context
        self.per_variable_grns = [
            GrnBlock(d_model, d_model, d_model, rng, dropout_rate=dropout_rate) for _ in range(n_channels)
        ]
        self.weight_grn = GrnBlock(
            n_channels * d_model,
            d_model,
            n_channels,
            rng,
            context_size=d_model if uses_context else None,
            dropout_rate=dropout_rate,
        )

    def __call__(
        self,
        inputs: list[Tensor],
        context: Tensor | None = None,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[Tensor, Tensor]:
        """Returns (combined [..., d_model], weights [..., n_channels])."""
        if len(inputs) != self.n_channels:
            raise ContractError(f"selector built for {self.n_channels} channels, got {len(inputs)}")
        if context is not None and not self.uses_context:
            raise ContractError("context passed to a context-free variable selector")
        flat = inputs[0] if self.n_channels == 1 else T.concat(inputs, axis=-1)
        logits = self.weight_grn(flat, context, training=training, rng=rng)
        weights = T.softmax(logits, axis=-1)
        filtered = [
            grn(z, training=training, rng=rng) for grn, z in zip(self.per_variable_grns, inputs)
        ]
        stacked = T.stack(filtered, axis=-2)
        expanded = T.reshape(weights, weights.shape + (1,))
        combined = T.tsum(stacked * expanded, axis=-2)
        return combined, weights

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for j, grn in enumerate(self.per_variable_grns):
            out += [(f"filter{j}.{n}", p) for n, p in grn.parameters()]
        out += [(f"weight_grn.{n}", p) for n, p in self.weight_grn.parameters()]
        return out


@dataclass
class StaticContexts:
    """The four conditioning vectors distilled from static covariates."""

    selection: Tensor  # feeds the time-varying selectors
    cell_init: Tensor  # seeds the LSTM cell state
    hidden_init: Tensor  # seeds the LSTM hidden state
    enrichment: Tensor  # conditions post-attention enrichment
    weights: Tensor  # static channel selection weights, for explanations


class PriorKnowledgeEncoder:
    """Combines static channel embeddings and derives four context vectors."""

    def __init__(self, n_static: int, d_model: int, rng: np.random.Generator, dropout_rate: float = 0.1):
        if n_static < 1:
            raise ConfigError("static encoder requires at least one static channel")
        self.selector = VariableSelector(n_static, d_model, rng, uses_context=False, dropout_rate=dropout_rate)
        self.selection_grn = GrnBlock(d_model, d_model, d_model, rng, dropout_rate=dropout_rate)
        self.cell_grn = GrnBlock(d_model, d_model, d_model, rng, dropout_rate=dropout_rate)
        self.hidden_grn = GrnBlock(d_model, d_model, d_model, rng, dropout_rate=dropout_rate)
        self.enrichment_grn = GrnBlock(d_model, d_model, d_model, rng, dropout_rate=dropout_rate)

    def __call__(
        self,
        static_embeddings: list[Tensor],
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> StaticContexts:
        combined, weights = self.selector(static_embeddings, training=training, rng=rng)
        return StaticContexts(
            selection=self.selection_grn(combined, training=training, rng=rng),
            cell_init=self.cell_grn(combined, training=training, rng=rng),
            hidden_init=self.hidden_grn(combined, training=training, rng=rng),
            enrichment=self.enrichment_grn(combined, training=training, rng=rng),
            weights=weights,
        )

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = [(f"selector.{n}", p) for n, p in self.selector.parameters()]
        for name, grn in [
            ("selection_grn", self.selection_grn),
            ("cell_grn", self.cell_grn),
            ("hidden_grn", self.hidden_grn),
            ("enrichment_grn", self.enrichment_grn),
        ]:
            out += [(f"{name}.{n}", p) for n, p in grn.parameters()]
        return out


def scaled_attention(
    q: Tensor, k: Tensor, v: Tensor, mask: CausalMask | None = None
) -> tuple[Tensor, Tensor]:
    """Softmax(q kᵀ / sqrt(d_k)) applied to v; returns (output, attention)."""
    d_k = q.shape[-1]
    scores = T.matmul(q, T.transpose_last2(k)) * Tensor(1.0 / np.sqrt(d_k))
    attn = T.softmax(scores, axis=-1, mask=None if mask is None else mask.allowed)
    return T.matmul(attn, v), attn


class InterpretableAttention:
    """Multi-head attention whose heads share one value projection.

    Per-head query/key projections produce per-head attention matrices; their
    average is applied once to the shared value path and then projected back
    to model width. The averaged matrix is returned alongside the output.
    """

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if n_heads < 1 or d_model % n_heads != 0:
            raise ConfigError(f"head count {n_heads} must divide model width {d_model}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_attn = d_model // n_heads
        self.query_projs = [LinearLayer(d_model, self.d_attn, rng, bias=False) for _ in range(n_heads)]
        self.key_projs = [LinearLayer(d_model, self.d_attn, rng, bias=False) for _ in range(n_heads)]
        self.value_proj = LinearLayer(d_model, self.d_attn, rng, bias=False)
        self.output_proj = LinearLayer(self.d_attn, d_model, rng, bias=False)

    def __call__(self, x: Tensor, mask: CausalMask | None = None) -> tuple[Tensor, Tensor]:
        """Returns (output [..., T, d_model], mean attention [..., T, T])."""
        scale = Tensor(1.0 / np.sqrt(self.d_attn))
        allowed = None if mask is None else mask.allowed
        mean_attn: Tensor | None = None
        for h in range(self.n_heads):
            q = self.query_projs[h](x)
            k = self.key_projs[h](x)
            scores = T.matmul(q, T.transpose_last2(k)) * scale
            attn = T.softmax(scores, axis=-1, mask=allowed)
            mean_attn = attn if mean_attn is None else mean_attn + attn
        mean_attn = mean_attn * Tensor(1.0 / self.n_heads)
        values = self.value_proj(x)
        out = self.output_proj(T.matmul(mean_attn, values))
        return out, mean_attn

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for h in range(self.n_heads):
            out.append((f"query{h}.weight", self.query_projs[h].weight))
            out.append((f"key{h}.weight", self.key_projs[h].weight))
        out.append(("value.weight", self.value_proj.weight))
        out.append(("output.weight", self.output_proj.weight))
        return out
