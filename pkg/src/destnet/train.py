"""Mini-batch Adam training with validation-AUC early stopping.

The loop is deliberately plain: seeded shuffle each epoch, mean loss over
each batch (last partial batch kept), one Adam step per batch, padding
embedding rows re-zeroed after every step, and the best-epoch parameters by
validation AUC returned. Non-finite losses or gradients abort with the
epoch, batch, and offending tensor named.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .errors import NumericError
from .evaluate import auc
from .model import (
    Batch,
    ModelParams,
    VariantSpec,
    assemble_batch,
    forward_batch,
    init_params,
    loss_and_grads,
    spec_for_strategy,
)
from .numerics import AdamState, adam_step


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale defaults; paper scale is reachable through the config file."""

    batch_size: int = 64
    max_epochs: int = 10
    patience: int = 3
    learning_rate: float = 1e-3
    seed: int = 7
    max_len: int = 30
    n_cities: int = 200
    variant: str = "atmc"
    strategy: str = "1"
    d_e: int = 8
    d_h: int = 8
    d_t: int = 4
    kernel_widths: tuple[int, ...] = (1, 3, 5, 7)
    m: int = 8
    mlp_sizes: tuple[int, ...] = (64, 32, 1)
    activation: str = "relu"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.strategy not in ("1", "2"):
            raise ValueError(f"strategy must be '1' or '2', got {self.strategy!r}")

    def variant_spec(self, streams: tuple[str, ...] | None = None) -> VariantSpec:
        spec = VariantSpec(kind=self.variant, d_e=self.d_e, d_h=self.d_h, d_t=self.d_t,
                           kernel_widths=self.kernel_widths, m=self.m,
                           mlp_sizes=self.mlp_sizes, activation=self.activation)
        if streams is not None:
            return replace(spec, streams=streams)
        return spec_for_strategy(spec, self.strategy)


@dataclass
class TrainHistory:
    train_loss: list[float]
    valid_auc: list[float]
    seconds: list[float]
    best_epoch: int

    def to_lines(self, with_seconds: bool = True) -> str:
        lines = []
        for i, (loss, score) in enumerate(zip(self.train_loss, self.valid_auc)):
            line = f"epoch={i} train_loss={loss:.6f} valid_auc={score:.6f}"
            if with_seconds:
                line += f" seconds={self.seconds[i]:.2f}"
            lines.append(line)
        lines.append(f"best_epoch={self.best_epoch}")
        return "\n".join(lines) + "\n"


def predict_scores(params: ModelParams, batch: Batch, chunk: int = 2048) -> np.ndarray:
    """Scores for a full dataset batch, evaluated in bounded chunks."""
    n = len(batch)
    out = np.empty(n)
    for start in range(0, n, chunk):
        idx = np.arange(start, min(start + chunk, n))
        yhat, _, _ = forward_batch(params, batch.take(idx))
        out[idx] = yhat
    return out


def train(train_batch: Batch, valid_batch: Batch, cfg: TrainConfig,
          streams: tuple[str, ...] | None = None) -> tuple[ModelParams, TrainHistory]:
    """Train one variant; returns the best-epoch parameters and the history."""
    spec = cfg.variant_spec(streams)
    params = init_params(spec, cfg.n_cities, cfg.seed, cfg.max_len)
    states = {name: AdamState.zeros_like(t) for name, t in params.tensors.items()}
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    n = len(train_batch)
    history = TrainHistory([], [], [], best_epoch=-1)
    best_params = params.clone()
    best_auc = -np.inf
    stale = 0
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        losses = []
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            sub = train_batch.take(order[start:start + cfg.batch_size])
            loss, grads = loss_and_grads(params, sub)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch} batch {bi}")
            for name, tensor in params.tensors.items():
                g = grads[name]
                if not np.isfinite(g).all():
                    raise NumericError(
                        f"non-finite gradient for {name} at epoch {epoch} batch {bi}")
                params.tensors[name] = adam_step(tensor, g, states[name],
                                                 lr=cfg.learning_rate)
            params.zero_padding_rows()
            losses.append(loss)
        score = auc(predict_scores(params, valid_batch), valid_batch.label)
        history.train_loss.append(float(np.mean(losses)))
        history.valid_auc.append(score)
        history.seconds.append(time.perf_counter() - t0)
        if score > best_auc:
            best_auc = score
            best_params = params.clone()
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best_params, history


def grid_search(train_records, valid_records, configs: list[tuple[str, TrainConfig]]):
    """Train every labelled config and pick the best validation AUC.

    Seeds derive from the master seed plus the grid position; ties go to the
    earlier grid entry. Returns (best config, [(label, auc), ...]).
    """
    if not configs:
        raise ValueError("empty config grid")
    batches: dict = {}
    rows = []
    best_idx = -1
    best_auc = -np.inf
    for i, (label, cfg) in enumerate(configs):
        key = (cfg.variant_spec().streams, cfg.max_len)
        if key not in batches:
            batches[key] = (assemble_batch(train_records, key[0], key[1]),
                            assemble_batch(valid_records, key[0], key[1]))
        tb, vb = batches[key]
        run_cfg = replace(cfg, seed=cfg.seed + i)
        _, history = train(tb, vb, run_cfg)
        score = history.valid_auc[history.best_epoch]
        rows.append((label, score))
        if score > best_auc:
            best_auc = score
            best_idx = i
    return configs[best_idx][1], rows
