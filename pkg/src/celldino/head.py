"""Supervised multi-label classifier head over frozen embeddings.

A 512-256 ReLU MLP with dropout 0.5 on both hidden layers, trained with
AdamW and binary cross-entropy on logits. Class imbalance is handled by
resampling each epoch with probability inversely proportional to the
frequency of a sample's rarest positive label; features are standardized
with statistics computed from the training rows only.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tt
from .binio import read_f32_array, read_json_block, read_magic, write_f32_array, write_json_block, write_magic
from .optim import AdamWState, adamw_step, cosine_schedule
from .tensor import Tensor
from .vit import trunc_normal

HEAD_MAGIC = b"HEAD"
HEAD_VERSION = 1

STD_EPS = 1e-8


@dataclass(frozen=True)
class HeadConfig:
    n_classes: int = 17
    hidden: tuple[int, int] = (512, 256)
    dropout: float = 0.5
    lr: float = 1e-4
    lr_end: float = 0.0
    weight_decay: float = 0.04
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 300
    batch_size: int = 512
    threshold: float = 0.5
    seed: int = 0


@dataclass
class StandardizationStats:
    mean: np.ndarray  # (D,)
    std: np.ndarray  # (D,), floored at STD_EPS

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.std = np.asarray(self.std, dtype=np.float32)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("mean/std must be matching 1-D vectors")
        if np.any(self.std < STD_EPS):
            raise ValueError("std entries below the epsilon floor")


def fit_standardizer(train_rows: np.ndarray) -> StandardizationStats:
    """Per-dimension mean/std from training rows only (population std)."""
    rows = np.asarray(train_rows, dtype=np.float32)
    if rows.ndim != 2 or rows.shape[0] < 2:
        raise ValueError(f"need at least 2 training rows, got shape {rows.shape}")
    mean = rows.mean(axis=0, dtype=np.float64).astype(np.float32)
    std = rows.std(axis=0, dtype=np.float64).astype(np.float32)
    return StandardizationStats(mean=mean, std=np.maximum(std, STD_EPS))


def apply_standardizer(stats: StandardizationStats, rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float32)
    if rows.shape[-1] != stats.mean.shape[0]:
        raise ValueError(f"row dim {rows.shape[-1]} != stats dim {stats.mean.shape[0]}")
    return (rows - stats.mean) / stats.std


def resample_weights(labels: np.ndarray) -> np.ndarray:
    """Per-sample sampling weights, normalized to sum 1.

    weight_i = 1 / (count of sample i's rarest positive label). Samples
    with no positive label get the minimum positive-label weight so they
    stay visible to the sampler.
    """
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.shape[0] == 0:
        raise ValueError(f"expected a non-empty (N, n_classes) matrix, got {labels.shape}")
    counts = labels.sum(axis=0)
    n = labels.shape[0]
    raw = np.zeros(n, dtype=np.float64)
    for i in range(n):
        positive = np.flatnonzero(labels[i])
        if positive.size:
            raw[i] = 1.0 / counts[positive].min()
    labeled = raw > 0
    if not labeled.any():
        raw[:] = 1.0
    elif not labeled.all():
        raw[~labeled] = raw[labeled].min()
    return raw / raw.sum()


# ---------------------------------------------------------------------------
# MLP


def head_param_order(in_dim: int, config: HeadConfig) -> list[tuple[str, tuple[int, ...]]]:
    h1, h2 = config.hidden
    return [
        ("w1", (in_dim, h1)),
        ("b1", (h1,)),
        ("w2", (h1, h2)),
        ("b2", (h2,)),
        ("w3", (h2, config.n_classes)),
        ("b3", (config.n_classes,)),
    ]


def init_classifier(in_dim: int, config: HeadConfig) -> dict[str, Tensor]:
    rng = np.random.default_rng(config.seed)
    params: dict[str, Tensor] = {}
    for name, shape in head_param_order(in_dim, config):
        data = np.zeros(shape, dtype=np.float32) if name.startswith("b") else trunc_normal(rng, shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def classifier_logits(
    params: dict[str, Tensor],
    rows: Tensor,
    config: HeadConfig,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    if training and rng is None:
        raise ValueError("training mode needs an rng for dropout")
    x = tt.relu(tt.add(tt.matmul(rows, params["w1"]), params["b1"]))
    x = tt.dropout(x, config.dropout, rng, training)
    x = tt.relu(tt.add(tt.matmul(x, params["w2"]), params["b2"]))
    x = tt.dropout(x, config.dropout, rng, training)
    return tt.add(tt.matmul(x, params["w3"]), params["b3"])


def predict(
    params: dict[str, Tensor], rows: np.ndarray, config: HeadConfig, threshold: float | None = None
) -> np.ndarray:
    """Multi-hot predictions: class j set iff sigmoid(logit_j) > threshold."""
    threshold = config.threshold if threshold is None else threshold
    with tt.no_grad():
        logits = classifier_logits(params, Tensor(rows), config).data
    return (1.0 / (1.0 + np.exp(-logits)) > threshold).astype(np.float32)


def train_head(
    train_rows: np.ndarray,
    train_labels: np.ndarray,
    val_rows: np.ndarray | None,
    val_labels: np.ndarray | None,
    config: HeadConfig,
) -> tuple[dict[str, Tensor], list[dict]]:
    """Train on standardized rows; returns the head and per-epoch logs.

    Epoch batches are drawn with replacement (dataset-size draws) from the
    inverse-rarest-label distribution. Deterministic given config.seed.
    """
    train_rows = np.asarray(train_rows, dtype=np.float32)
    train_labels = np.asarray(train_labels, dtype=np.float32)
    if train_rows.shape[0] != train_labels.shape[0]:
        raise ValueError("row/label count mismatch")
    if train_labels.shape[1] != config.n_classes:
        raise ValueError(
            f"label width {train_labels.shape[1]} != configured classes {config.n_classes}"
        )
    n = train_rows.shape[0]
    weights = resample_weights(train_labels)
    params = init_classifier(train_rows.shape[1], config)
    opt = AdamWState(
        lr=config.lr, weight_decay=config.weight_decay, beta1=config.beta1, beta2=config.beta2
    )
    steps_per_epoch = max(1, math.ceil(n / config.batch_size))
    total_steps = config.epochs * steps_per_epoch
    logs: list[dict] = []
    step = 0
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.choice(n, size=n, replace=True, p=weights)
        epoch_loss = []
        lr = None
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            logits = classifier_logits(params, Tensor(train_rows[idx]), config, rng, training=True)
            loss = tt.bce_with_logits(logits, Tensor(train_labels[idx]))
            grads = tt.backward(loss)
            lr = cosine_schedule(step, total_steps, config.lr, config.lr_end)
            if lr > 0:
                params, opt = adamw_step(params, grads, opt, lr=lr)
            step += 1
            epoch_loss.append(loss.item())
        record = {"epoch": epoch, "train_loss": float(np.mean(epoch_loss)), "lr": lr}
        if val_rows is not None and len(val_rows):
            from .evaluate import multilabel_macro_f1  # late import; evaluate uses this module

            record["val_macro_f1"] = multilabel_macro_f1(
                val_labels, predict(params, val_rows, config)
            )
        logs.append(record)
    return params, logs


# ---------------------------------------------------------------------------
# checkpoint io


def save_head(path, params: dict[str, Tensor], stats: StandardizationStats, config: HeadConfig):
    in_dim = params["w1"].shape[0]
    with open(path, "wb") as f:
        write_magic(f, HEAD_MAGIC, HEAD_VERSION)
        meta = asdict(config)
        meta["hidden"] = list(meta["hidden"])
        write_json_block(f, {"config": meta, "in_dim": in_dim})
        write_f32_array(f, stats.mean)
        write_f32_array(f, stats.std)
        for name, _ in head_param_order(in_dim, config):
            write_f32_array(f, params[name].data)


def load_head(path) -> tuple[dict[str, Tensor], StandardizationStats, HeadConfig]:
    with open(path, "rb") as f:
        read_magic(f, HEAD_MAGIC, HEAD_VERSION)
        meta = read_json_block(f)
        cfg_obj = dict(meta["config"])
        cfg_obj["hidden"] = tuple(cfg_obj["hidden"])
        config = HeadConfig(**cfg_obj)
        in_dim = meta["in_dim"]
        mean = read_f32_array(f, (in_dim,))
        std = read_f32_array(f, (in_dim,))
        params = {
            name: Tensor(read_f32_array(f, shape), requires_grad=True)
            for name, shape in head_param_order(in_dim, config)
        }
    return params, StandardizationStats(mean=mean, std=std), config
