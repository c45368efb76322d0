"""Adamax optimizer, the training loop, checkpoint selection, evaluation.

Training is deterministic for a given (dataset, config, seed): the seed is
split into independent streams for parameter init, epoch shuffling, random
frame deletion, and dropout. Validation always normalizes lengths with a
fixed seed so the selection metric is reproducible.
"""

from __future__ import annotations

import json
import sys
import time
from dataclasses import dataclass
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, TrainingDivergenceError
from .featurestore import Dataset, FeatureSequence
from .metrics import confusion_matrix, topk_accuracy
from .model import (
    EarlyFusionConfig,
    LateFusionConfig,
    ModelConfig,
    ModelParams,
    forward_batch,
    init_params,
    label_smooth,
    loss_and_grads,
)
from .preprocess import DEFAULT_T, StreamBatch, assemble_streams, stack_batches

# Fixed seed for evaluation-time length normalization; never used for training.
EVAL_SEED = 9973


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.0012
    weight_decay: float = 0.0001
    epochs: int = 30
    batch_size: int = 32
    label_smoothing: float = 0.15
    loss_weights: tuple[float, float] = (1.8, 0.5)  # (class, embedding)
    seed: int = 0
    stream_toggles: tuple[bool, bool, bool] = (True, True, True)
    sequence_length: int = DEFAULT_T

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ConfigurationError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.sequence_length < 1:
            raise ConfigurationError("epochs, batch_size and sequence_length must be >= 1")
        if len(self.stream_toggles) != 3:
            raise ConfigurationError("stream_toggles must have exactly three entries")
        if not any(self.stream_toggles):
            raise ConfigurationError("at least one stream must stay enabled")


@dataclass
class Checkpoint:
    """Best-validation snapshot of a training run."""

    params: Any
    epoch: int
    val_top1: float
    val_top5: float

    def __post_init__(self):
        for v in (self.val_top1, self.val_top5):
            if not (0.0 <= v <= 1.0):
                raise ConfigurationError(f"metric {v} outside [0,1]")


@dataclass
class AdamaxState:
    m: dict[str, np.ndarray]
    u: dict[str, np.ndarray]

    @staticmethod
    def zeros(tensors: dict[str, np.ndarray]) -> "AdamaxState":
        return AdamaxState(
            {k: np.zeros_like(v) for k, v in tensors.items()},
            {k: np.zeros_like(v) for k, v in tensors.items()},
        )


def adamax_step(
    tensors: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamaxState,
    t: int,
    lr: float,
    wd: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamaxState]:
    """One Adamax update with decoupled weight decay.

    m <- b1 m + (1-b1) g; u <- max(b2 u, |g|);
    theta <- theta - lr m / ((1 - b1^t)(u + eps)); then theta <- theta (1 - lr wd).
    """
    if t < 1:
        raise ConfigurationError("step counter t must be >= 1")
    new_t: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_u: dict[str, np.ndarray] = {}
    bias = 1.0 - beta1**t
    for name, theta in tensors.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient in {name}")
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        u = np.maximum(beta2 * state.u[name], np.abs(g))
        theta = theta - lr * m / (bias * (u + eps))
        if wd != 0.0:
            theta = theta - lr * wd * theta
        new_t[name] = theta
        new_m[name] = m
        new_u[name] = u
    return new_t, AdamaxState(new_m, new_u)


# ---------------------------------------------------------------------------
# Prediction helpers shared with the decoder and the ensemble

ProbFn = Callable[[StreamBatch], np.ndarray]


def probability_fn(model) -> ProbFn:
    """Adapt ModelParams (or any callable StreamBatch -> probs) to a ProbFn."""
    if isinstance(model, ModelParams):

        def fn(sb: StreamBatch) -> np.ndarray:
            probs, _, _ = forward_batch(
                model,
                sb.stream_a[None].astype(np.float64),
                sb.stream_b[None].astype(np.float64),
                sb.stream_c[None].astype(np.float64),
                sb.mask[None],
            )
            return probs[0]

        return fn
    if callable(model):
        return model
    raise ConfigurationError(f"cannot build a probability function from {type(model)!r}")


def split_probabilities(
    model,
    records: Sequence[FeatureSequence],
    T: int = DEFAULT_T,
    batch_size: int = 32,
    toggles: tuple[bool, bool, bool] = (True, True, True),
) -> np.ndarray:
    """Deterministic (N,K) class probabilities for a list of records.

    Length normalization is driven by the fixed evaluation seed, threaded
    over the records in order, so repeated calls agree bit for bit.
    """
    rng = np.random.default_rng(EVAL_SEED)
    batches = [assemble_streams(r, T, rng) for r in records]
    if isinstance(model, ModelParams):
        chunks = []
        for i in range(0, len(batches), batch_size):
            a, b, c, m = stack_batches(batches[i : i + batch_size])
            probs, _, _ = forward_batch(model, a, b, c, m, toggles=toggles)
            chunks.append(probs)
        return np.concatenate(chunks)
    fn = probability_fn(model)
    return np.stack([fn(sb) for sb in batches])


def evaluate(
    model,
    split: Sequence[FeatureSequence],
    T: int = DEFAULT_T,
    toggles: tuple[bool, bool, bool] = (True, True, True),
) -> tuple[float, float, np.ndarray, float]:
    """(top1, top5, confusion matrix, mean per-record latency in seconds).

    model is ModelParams or a callable StreamBatch -> probs. Records are
    classified one at a time so the latency estimate reflects single-word
    prediction cost; length normalization uses the fixed evaluation seed.
    """
    records = list(split)
    if not records:
        raise ValueError("evaluate needs a nonempty split")
    labels = []
    for r in records:
        if r.label_id is None:
            raise ValueError("evaluate needs labeled records")
        labels.append(r.label_id)
    labels = np.asarray(labels)

    if isinstance(model, ModelParams):

        def fn(sb: StreamBatch) -> np.ndarray:
            probs, _, _ = forward_batch(
                model,
                sb.stream_a[None].astype(np.float64),
                sb.stream_b[None].astype(np.float64),
                sb.stream_c[None].astype(np.float64),
                sb.mask[None],
                toggles=toggles,
            )
            return probs[0]

    else:
        fn = probability_fn(model)

    rng = np.random.default_rng(EVAL_SEED)
    rows = []
    elapsed = 0.0
    for rec in records:
        start = time.perf_counter()
        sb = assemble_streams(rec, T, rng)
        rows.append(fn(sb))
        elapsed += time.perf_counter() - start
    probs = np.stack(rows)
    top1 = topk_accuracy(probs, labels, 1)
    top5 = topk_accuracy(probs, labels, 5)
    preds = probs.argmax(axis=1)
    conf = confusion_matrix(preds, labels, probs.shape[1])
    return top1, top5, conf, elapsed / len(records)


# ---------------------------------------------------------------------------
# Training loop


def _default_model_config(arch: str, num_classes: int) -> ModelConfig:
    if arch == "late":
        return LateFusionConfig(num_classes=num_classes)
    if arch == "early":
        return EarlyFusionConfig(num_classes=num_classes)
    raise ConfigurationError(f"unknown architecture {arch!r} (expected 'early' or 'late')")


def _val_topk(params, records, T, batch_size, toggles):
    labels = np.asarray([r.label_id for r in records])
    probs = split_probabilities(params, records, T, batch_size, toggles)
    return topk_accuracy(probs, labels, 1), topk_accuracy(probs, labels, 5)


def train_model(
    dataset: Dataset,
    arch: str,
    config: TrainConfig,
    model_config: Optional[ModelConfig] = None,
    log_path=None,
    verbose: bool = False,
) -> Checkpoint:
    """Mini-batch Adamax training; returns the best-validation checkpoint.

    The combined loss is loss_weights[0] * label-smoothed cross-entropy plus
    loss_weights[1] * negative cosine similarity to the class word vector.
    The checkpoint with the highest validation Top-1 wins, earliest epoch on
    ties. An optional JSON-lines log receives one record per epoch.
    """
    train_recs = dataset.split("train")
    val_recs = dataset.split("val")
    if not train_recs or not val_recs:
        raise ConfigurationError("training needs nonempty train and val splits")
    k = dataset.num_classes
    if len(dataset.embeddings) < k:
        raise ConfigurationError("embedding table does not cover all classes")
    if model_config is None:
        model_config = _default_model_config(arch, k)
    elif model_config.arch != arch:
        raise ConfigurationError(f"model config is {model_config.arch!r}, requested {arch!r}")

    seeds = np.random.SeedSequence(config.seed).spawn(4)
    init_rng, shuffle_rng, augment_rng, dropout_rng = (np.random.default_rng(s) for s in seeds)
    params = init_params(model_config, init_rng)
    state = AdamaxState.zeros(params.tensors)

    labels = np.asarray([r.label_id for r in train_recs])
    eye = np.eye(k)
    emb = dataset.embeddings.vectors
    T = config.sequence_length
    cw, ew = config.loss_weights

    best: Optional[Checkpoint] = None
    log_fh = open(log_path, "w") if log_path is not None else None
    try:
        step = 0
        for epoch in range(1, config.epochs + 1):
            order = shuffle_rng.permutation(len(train_recs))
            losses = []
            for i in range(0, len(order), config.batch_size):
                chunk = order[i : i + config.batch_size]
                sbs = [assemble_streams(train_recs[j], T, augment_rng) for j in chunk]
                a, b, c, m = stack_batches(sbs)
                targets = label_smooth(eye[labels[chunk]], config.label_smoothing)
                loss, grads, _ = loss_and_grads(
                    params, a, b, c, m, targets, emb[labels[chunk]],
                    class_weight=cw, embed_weight=ew,
                    train=True, rng=dropout_rng, toggles=config.stream_toggles,
                )
                if not np.isfinite(loss):
                    raise TrainingDivergenceError(f"non-finite loss at epoch {epoch}")
                step += 1
                params.tensors, state = adamax_step(
                    params.tensors, grads, state, step,
                    config.learning_rate, config.weight_decay,
                )
                losses.append(loss)
            val_top1, val_top5 = _val_topk(
                params, val_recs, T, config.batch_size, config.stream_toggles
            )
            entry = {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "val_top1": val_top1,
                "val_top5": val_top5,
            }
            if log_fh is not None:
                log_fh.write(json.dumps(entry) + "\n")
            if verbose:
                print(
                    f"epoch {epoch:3d}  loss {entry['train_loss']:.4f}  "
                    f"val top1 {val_top1:.3f}  top5 {val_top5:.3f}",
                    file=sys.stderr,
                )
            if best is None or val_top1 > best.val_top1:
                best = Checkpoint(params.copy(), epoch, val_top1, val_top5)
    finally:
        if log_fh is not None:
            log_fh.close()
    return best
