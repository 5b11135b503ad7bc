"""Quantile objective, Adam with decoupled weight decay, and the train loop.

Training is deterministic given (seed, data, config): one seeded generator
drives batch shuffling and dropout in a fixed order, and parameter updates
are plain float64 numpy, so reruns produce bit-identical parameters.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dataset import WindowBatch, split_windows
from .errors import ConfigError, ContractError, DataError
from .tensor import GradTape, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    max_epochs: int = 100
    early_stop_patience: int = 10
    seed: int = 0
    validation_fraction: float = 0.2

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.early_stop_patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.early_stop_patience}")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError(f"validation_fraction must be in (0, 1), got {self.validation_fraction}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")


class Standardizer:
    """Per-channel zero-mean unit-variance scaling, fitted on training data only.

    Channels without fitted statistics pass through unchanged, which is how
    bounded helper inputs (like the decoder's horizon-position signal) skip
    standardization.
    """

    def __init__(self, stats: dict[str, tuple[float, float]]):
        self.stats = dict(stats)

    @classmethod
    def fit(cls, batch: WindowBatch) -> "Standardizer":
        """Fit per-channel statistics from the past blocks of a window batch.

        Every dynamic continuous channel appears in the past block, so the
        past block alone covers the training span. Population (1/n) variance.
        """
        if len(batch) == 0:
            raise DataError("cannot fit a standardizer on an empty window batch")
        stats = {}
        for j, name in enumerate(batch.past_continuous_names):
            col = batch.past_continuous[:, :, j]
            mean = float(col.mean())
            std = float(col.std())
            if std == 0.0:
                raise DataError(f"channel {name!r} is constant on the training split")
            stats[name] = (mean, std)
        return cls(stats)

    def transform(self, name: str, values: np.ndarray) -> np.ndarray:
        if name not in self.stats:
            return values
        mean, std = self.stats[name]
        return (values - mean) / std

    def invert(self, name: str, values: np.ndarray) -> np.ndarray:
        if name not in self.stats:
            return values
        mean, std = self.stats[name]
        return values * std + mean

    def to_dict(self) -> dict:
        return {name: [m, s] for name, (m, s) in self.stats.items()}

    @classmethod
    def from_dict(cls, raw: dict) -> "Standardizer":
        return cls({name: (float(m), float(s)) for name, (m, s) in raw.items()})


def fit_standardizer(train_split: WindowBatch) -> Standardizer:
    return Standardizer.fit(train_split)


def pinball_loss(pred: Tensor, target: Tensor, q: float) -> Tensor:
    """max(q * e, (q - 1) * e) with e = target - pred; elementwise."""
    if not 0.0 < q < 1.0:
        raise ContractError(f"quantile must lie in (0, 1), got {q}")
    err = target - pred
    return T.maximum(err * Tensor(q), err * Tensor(q - 1.0))


def lfit_objective(forecasts: Tensor, targets: Tensor, quantiles) -> Tensor:
    """Mean pinball loss over batch, targets, horizon, and quantiles.

    ``forecasts`` is [B, m, tau, |Q|]; ``targets`` is [B, m, tau]. The mean
    over every axis keeps the objective scale-stable across scenario shapes;
    within a fixed configuration it equals the summed loss over B * tau up to
    the constant factor m * |Q|.
    """
    qs = np.asarray(list(quantiles), dtype=np.float64)
    if forecasts.shape[-1] != qs.size:
        raise ContractError(f"forecast quantile axis {forecasts.shape} does not match {qs.size} quantiles")
    if np.any(qs <= 0.0) or np.any(qs >= 1.0) or np.any(np.diff(qs) <= 0):
        raise ContractError("quantiles must be strictly increasing within (0, 1)")
    expanded = T.reshape(targets, targets.shape + (1,))
    err = expanded - forecasts
    loss = T.maximum(err * Tensor(qs), err * Tensor(qs - 1.0))
    return loss.mean()


class Adam:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(
        self,
        params: list[tuple[str, Tensor]],
        learning_rate: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.lr = learning_rate
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]
        self.t = 0

    def step(self) -> None:
        """Consume ``.grad`` of every parameter; decay is applied first."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, (name, p) in enumerate(self.params):
            g = p.grad
            if g is None:
                raise ContractError(f"parameter {name} has no gradient; run backward first")
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            m_hat = self.m[i] / (1.0 - b1**self.t)
            v_hat = self.v[i] / (1.0 - b2**self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainingLog:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = float("inf")

    def write_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("epoch,train_objective,val_objective,elapsed_seconds\n")
            for row in self.epochs:
                f.write(
                    f"{row['epoch']},{row['train_objective']!r},{row['val_objective']!r},"
                    f"{row['elapsed_seconds']:.3f}\n"
                )


def _targets_for_loss(batch: WindowBatch) -> Tensor:
    """Standardized future targets as [B, m, tau]."""
    raw = batch.future_targets
    std = batch.standardizer
    cols = []
    for j, name in enumerate(batch.target_names):
        col = raw[:, :, j]
        cols.append(std.transform(name, col) if std is not None else col)
    return Tensor(np.stack(cols, axis=1))


def _epoch_objective(model, batch: WindowBatch, quantiles, chunk: int = 256) -> float:
    """Mean objective over a batch with dropout off, no gradient recording."""
    total, count = 0.0, 0
    for start in range(0, len(batch), chunk):
        part = batch.take(np.arange(start, min(start + chunk, len(batch))))
        out = model.forward_tensors(part, training=False, rng=None)
        loss = lfit_objective(out, _targets_for_loss(part), quantiles)
        total += loss.item() * len(part)
        count += len(part)
    return total / count


def train(model, windows: WindowBatch, cfg: TrainConfig) -> TrainingLog:
    """Mini-batch training with chronological validation and early stopping.

    The standardizer is fitted on the training head only and attached to the
    model and both splits. Best-validation parameters are restored at the
    end.
    """
    train_batch, val_batch = split_windows(windows, cfg.validation_fraction)
    if len(train_batch) == 0 or len(val_batch) == 0:
        raise DataError("training requires non-empty train and validation splits")

    standardizer = model.standardizer or Standardizer.fit(train_batch)
    model.standardizer = standardizer
    train_batch.standardizer = standardizer
    val_batch.standardizer = standardizer

    params = model.parameters()
    opt = Adam(params, learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)

    best_params = [p.data.copy() for _, p in params]
    log_out = TrainingLog()
    bad_epochs = 0
    started = time.monotonic()

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_batch))
        train_total, train_count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            mb = train_batch.take(order[start : start + cfg.batch_size])
            with GradTape() as tape:
                out = model.forward_tensors(mb, training=True, rng=rng)
                loss = lfit_objective(out, _targets_for_loss(mb), model.config.quantiles)
            tape.backward(loss)
            opt.step()
            train_total += loss.item() * len(mb)
            train_count += len(mb)

        val_obj = _epoch_objective(model, val_batch, model.config.quantiles)
        row = {
            "epoch": epoch,
            "train_objective": train_total / train_count,
            "val_objective": val_obj,
            "elapsed_seconds": time.monotonic() - started,
        }
        log_out.epochs.append(row)
        log.info("epoch %d train %.6f val %.6f", epoch, row["train_objective"], val_obj)

        if val_obj < log_out.best_val:
            log_out.best_val = val_obj
            log_out.best_epoch = epoch
            best_params = [p.data.copy() for _, p in params]
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.early_stop_patience:
                break

    for (name, p), saved in zip(params, best_params):
        p.data = saved
    return log_out
