"""Primitive network blocks: linear, GLU, GRN, input embeddings, LSTM cell.

All parameters are float64 ``Tensor`` leaves created from a caller-supplied
``numpy.random.Generator``; nothing here touches global random state. Each
block exposes ``parameters()`` yielding ``(name, Tensor)`` pairs with dotted
paths so optimizers and the model container can address every array.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor


def _uniform_init(rng: np.random.Generator, out_features: int, in_features: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(in_features)
    return rng.uniform(-bound, bound, size=(out_features, in_features))


def _prefixed(prefix: str, params) -> list[tuple[str, Tensor]]:
    return [(f"{prefix}.{name}", p) for name, p in params]


class LinearLayer:
    """Affine map y = x Wᵀ + b with weight stored as [out × in]."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(_uniform_init(rng, out_features, in_features))
        self.bias = Tensor(np.zeros(out_features)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"linear layer expects last extent {self.in_features}, got {x.shape}")
        y = T.matmul(x, T.transpose_last2(self.weight))
        if self.bias is not None:
            y = y + self.bias
        return y

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out


class GluLayer:
    """Gated linear unit: (x Θ₁ + b₁) ⊙ σ(x Θ₂ + b₂)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.value_proj = LinearLayer(in_features, out_features, rng)
        self.gate_proj = LinearLayer(in_features, out_features, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.value_proj(x) * T.sigmoid(self.gate_proj(x))

    def parameters(self) -> list[tuple[str, Tensor]]:
        return _prefixed("value_proj", self.value_proj.parameters()) + _prefixed(
            "gate_proj", self.gate_proj.parameters()
        )


class GateAddNorm:
    """GLU on the branch, residual add, then layer normalization."""

    def __init__(self, size: int, rng: np.random.Generator):
        self.glu = GluLayer(size, size, rng)
        self.gain = Tensor(np.ones(size))
        self.norm_bias = Tensor(np.zeros(size))

    def __call__(self, branch: Tensor, residual: Tensor) -> Tensor:
        return T.layer_norm(residual + self.glu(branch), self.gain, self.norm_bias)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return _prefixed("glu", self.glu.parameters()) + [("gain", self.gain), ("norm_bias", self.norm_bias)]


class GrnBlock:
    """Gated residual network.

    hidden = ELU(primary(a) + context(c)); branch = GLU(dropout(hidden_proj(hidden)));
    out = layer_norm(residual + branch), where the residual is a itself or a
    learned projection when the extents differ. The context projection carries
    no bias so the primary path's bias is the only one feeding the ELU.
    """

    def __init__(
        self,
        input_size: int,
        hidden_size: int,
        output_size: int,
        rng: np.random.Generator,
        context_size: int | None = None,
        dropout_rate: float = 0.1,
    ):
        self.primary_proj = LinearLayer(input_size, hidden_size, rng)
        self.context_proj = (
            LinearLayer(context_size, hidden_size, rng, bias=False) if context_size is not None else None
        )
        self.hidden_proj = LinearLayer(hidden_size, output_size, rng)
        self.glu = GluLayer(output_size, output_size, rng)
        self.skip_proj = LinearLayer(input_size, output_size, rng) if input_size != output_size else None
        self.gain = Tensor(np.ones(output_size))
        self.norm_bias = Tensor(np.zeros(output_size))
        self.dropout_rate = dropout_rate

    def __call__(
        self,
        a: Tensor,
        c: Tensor | None = None,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        if c is not None and self.context_proj is None:
            raise ContractError("context passed to a context-free gated residual block")
        pre = self.primary_proj(a)
        # An omitted context contributes nothing, matching a zero context vector
        # (the context projection has no bias).
        if c is not None:
            pre = pre + self.context_proj(c)
        hidden = T.elu(pre)
        branch = self.hidden_proj(hidden)
        branch = T.dropout(branch, self.dropout_rate, rng, training)
        residual = a if self.skip_proj is None else self.skip_proj(a)
        return T.layer_norm(residual + self.glu(branch), self.gain, self.norm_bias)

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = _prefixed("primary_proj", self.primary_proj.parameters())
        if self.context_proj is not None:
            out += _prefixed("context_proj", self.context_proj.parameters())
        out += _prefixed("hidden_proj", self.hidden_proj.parameters())
        out += _prefixed("glu", self.glu.parameters())
        if self.skip_proj is not None:
            out += _prefixed("skip_proj", self.skip_proj.parameters())
        out += [("gain", self.gain), ("norm_bias", self.norm_bias)]
        return out


class InputEmbedder:
    """Per-channel embeddings into a shared model width.

    Continuous channels get a learned 1-to-d projection; categorical channels
    get a lookup table initialized standard-normal scaled by 1/sqrt(d).
    Channel order is continuous channels first, then categorical, both in
    declaration order; ``channel_names`` records it.
    """

    def __init__(
        self,
        continuous_channels: list[str],
        categorical_channels: list[tuple[str, int]],
        d_model: int,
        rng: np.random.Generator,
    ):
        self.d_model = d_model
        self.continuous_channels = list(continuous_channels)
        self.categorical_channels = [name for name, _ in categorical_channels]
        self.channel_names = self.continuous_channels + self.categorical_channels
        self.continuous_projs = {name: LinearLayer(1, d_model, rng) for name in continuous_channels}
        self.tables = {
            name: Tensor(rng.standard_normal((cardinality, d_model)) / np.sqrt(d_model))
            for name, cardinality in categorical_channels
        }
        self.cardinalities = dict(categorical_channels)

    @property
    def n_channels(self) -> int:
        return len(self.channel_names)

    def embed_continuous_channel(self, name: str, values: Tensor) -> Tensor:
        """Embed one continuous channel given as [..., 1] values."""
        return self.continuous_projs[name](values)

    def embed_categorical_channel(self, name: str, indices: np.ndarray) -> Tensor:
        return T.embedding(self.tables[name], indices)

    def __call__(self, continuous: Tensor | None, categorical: np.ndarray | None) -> list[Tensor]:
        """Embed a [..., n_cont] value block plus [..., n_cat] index block.

        Returns one [..., d_model] tensor per channel in ``channel_names``
        order.
        """
        out: list[Tensor] = []
        if self.continuous_channels:
            if continuous is None or continuous.shape[-1] != len(self.continuous_channels):
                got = None if continuous is None else continuous.shape
                raise DimensionError(
                    f"expected {len(self.continuous_channels)} continuous channels, got {got}"
                )
            for j, name in enumerate(self.continuous_channels):
                out.append(self.continuous_projs[name](T.narrow(continuous, -1, j, 1)))
        if self.categorical_channels:
            if categorical is None or categorical.shape[-1] != len(self.categorical_channels):
                got = None if categorical is None else categorical.shape
                raise DimensionError(
                    f"expected {len(self.categorical_channels)} categorical channels, got {got}"
                )
            for k, name in enumerate(self.categorical_channels):
                out.append(T.embedding(self.tables[name], categorical[..., k]))
        return out

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for name in self.continuous_channels:
            out += _prefixed(f"continuous.{name}", self.continuous_projs[name].parameters())
        for name in self.categorical_channels:
            out.append((f"table.{name}", self.tables[name]))
        return out


class LstmCell:
    """Single LSTM step with gates packed in (input, forget, cell, output) order."""

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.input_weights = Tensor(_uniform_init(rng, 4 * hidden_size, input_size))
        self.recurrent_weights = Tensor(_uniform_init(rng, 4 * hidden_size, hidden_size))
        self.biases = Tensor(np.zeros(4 * hidden_size))

    def step(self, x_t: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
        if x_t.shape[-1] != self.input_size or h_prev.shape[-1] != self.hidden_size:
            raise DimensionError(
                f"lstm step got input {x_t.shape} / hidden {h_prev.shape}, "
                f"expects extents {self.input_size} / {self.hidden_size}"
            )
        gates = (
            T.matmul(x_t, T.transpose_last2(self.input_weights))
            + T.matmul(h_prev, T.transpose_last2(self.recurrent_weights))
            + self.biases
        )
        h = self.hidden_size
        i = T.sigmoid(T.narrow(gates, -1, 0, h))
        f = T.sigmoid(T.narrow(gates, -1, h, h))
        g = T.tanh(T.narrow(gates, -1, 2 * h, h))
        o = T.sigmoid(T.narrow(gates, -1, 3 * h, h))
        c_t = f * c_prev + i * g
        h_t = o * T.tanh(c_t)
        return h_t, c_t

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [
            ("input_weights", self.input_weights),
            ("recurrent_weights", self.recurrent_weights),
            ("biases", self.biases),
        ]
