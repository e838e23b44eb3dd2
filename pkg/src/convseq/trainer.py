"""Training loop: batched BCE over sampled subsequences, Adam, early stopping."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, make_training_example
from .model import TRAIN_STREAM, Model
from .optim import GradientError, adam_step, zero_grads
from .tensor import (
    ConfigurationError, Tensor, add, matmul, ranking_bce, track_allocations, transpose)

log = logging.getLogger(__name__)

DEFAULT_SCHEDULE = ((2, 2), (5, 5), (7, 7))


@dataclass
class TrainConfig:
    sequence_length: int = 50
    embedding: int = 256
    schedule: tuple = DEFAULT_SCHEDULE
    batch_size: int = 128
    learning_rate: float = 1e-4
    dropout_rate: float = 0.35
    weight_decay: float = 0.1
    max_epochs: int = 1000
    early_stop_patience: int = 50
    n_train: int = 100
    n_eval: int = 100
    no_intervals: bool = False
    no_residuals: bool = False
    single_conv: bool = False
    avgpool_only: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError("dropout_rate must lie in [0, 1)")
        if self.n_train < 1:
            raise ConfigurationError("n_train must be at least 1")
        if self.learning_rate <= 0.0:
            raise ConfigurationError("learning_rate must be positive")
        if self.sequence_length < 1:
            raise ConfigurationError("sequence_length must be at least 1")
        if self.embedding < 1:
            raise ConfigurationError("embedding must be at least 1")
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be at least 1")
        if self.early_stop_patience < 0:
            raise ConfigurationError("early_stop_patience cannot be negative")
        if self.single_conv and self.avgpool_only:
            raise ConfigurationError("single_conv and avgpool_only are exclusive")


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    val_hr10: float
    val_ndcg10: float
    seconds: float
    peak_bytes: int


@dataclass
class FitResult:
    model: Model
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_ndcg: float = float("-inf")


def build_model(dataset: Dataset, config: TrainConfig) -> Model:
    config.validate()
    return Model(
        dataset.attr_width, dataset.vocab.table_rows, config.embedding,
        config.schedule, config.sequence_length, seed=config.seed,
        no_intervals=config.no_intervals, no_residuals=config.no_residuals,
        single_conv=config.single_conv, avgpool_only=config.avgpool_only,
        context_mean=dataset.ctx_mean, context_std=dataset.ctx_std)


def score(state: Tensor, candidates: Tensor) -> Tensor:
    """Dot product of each candidate row with the user state, n x 1 logits."""
    return matmul(candidates, transpose(state))


def bce_loss(logits: Tensor) -> Tensor:
    return ranking_bce(logits)


def train_epoch(model: Model, dataset: Dataset, config: TrainConfig,
                rng: np.random.Generator) -> float:
    """One pass over shuffled users, one sampled subsequence each."""
    order = rng.permutation(len(dataset.sequences))
    params = model.parameters()
    losses = []
    for start in range(0, len(order), config.batch_size):
        examples = []
        for user_pos in order[start:start + config.batch_size]:
            example = make_training_example(
                dataset.sequences[user_pos], config.sequence_length,
                config.n_train, rng, dataset)
            if example is not None:
                examples.append(example)
        if not examples:
            continue
        zero_grads(params)
        batch_losses = []
        total = None
        for example in examples:
            state, candidates = model.forward_example(
                example, dataset, config.dropout_rate, training=True, rng=rng)
            loss = bce_loss(score(state, candidates))
            batch_losses.append(loss.data.item())
            total = loss if total is None else add(total, loss)
        if not np.isfinite(batch_losses).all():
            users = [dataset.sequences[u].user_id for u in order[start:start + config.batch_size]]
            raise GradientError(
                f"non-finite loss in batch starting at user {start} "
                f"(users {users[:8]}, losses {batch_losses[:8]})")
        total.backward(seed=1.0 / len(examples))
        adam_step(params, config.learning_rate, weight_decay=config.weight_decay)
        losses.extend(batch_losses)
    if not losses:
        raise ConfigurationError("no user produced a training example")
    return float(np.mean(losses))


def validation_metrics(model: Model, dataset: Dataset, config: TrainConfig,
                       k: int = 10) -> tuple[float, float]:
    """HR@k / NDCG@k on the validation targets, fixed per-user negatives."""
    from .metrics import collect_ranks, hit_rate_at_k, ndcg_at_k

    results, _ = collect_ranks(model, dataset, config.n_eval, config.seed,
                               mode="validation", length=config.sequence_length)
    if not results:
        raise ConfigurationError("no user is long enough for validation")
    ranks = [r.rank for r in results]
    return hit_rate_at_k(ranks, k), ndcg_at_k(ranks, k)


def fit(dataset: Dataset, config: TrainConfig, model: Model | None = None) -> FitResult:
    config.validate()
    if model is None:
        model = build_model(dataset, config)
    result = FitResult(model=model)
    best_state: dict[str, np.ndarray] | None = None
    misses = 0
    for epoch in range(config.max_epochs):
        started = time.perf_counter()
        rng = np.random.default_rng([config.seed, TRAIN_STREAM, epoch])
        with track_allocations() as tracker:
            mean_loss = train_epoch(model, dataset, config, rng)
        hr10, ndcg10 = validation_metrics(model, dataset, config)
        result.history.append(EpochRecord(
            epoch, mean_loss, hr10, ndcg10,
            time.perf_counter() - started, tracker.peak_bytes))
        log.info("epoch %d loss %.4f val hr@10 %.4f ndcg@10 %.4f",
                 epoch, mean_loss, hr10, ndcg10)
        if ndcg10 > result.best_ndcg:
            result.best_ndcg = ndcg10
            result.best_epoch = epoch
            best_state = {p.name: p.value.data.copy() for p in model.parameters()}
            misses = 0
        else:
            misses += 1
            if misses > config.early_stop_patience:
                break
    if best_state is not None:
        for p in model.parameters():
            p.value.data[...] = best_state[p.name]
    return result


def write_training_log(path, history: list[EpochRecord]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss", "val_hr10", "val_ndcg10",
                         "seconds", "peak_bytes"])
        for row in history:
            writer.writerow([row.epoch, f"{row.mean_loss:.6f}", f"{row.val_hr10:.6f}",
                             f"{row.val_ndcg10:.6f}", f"{row.seconds:.3f}", row.peak_bytes])
