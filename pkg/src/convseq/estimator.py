"""Estimator facade: fit/predict/score over the sequence recommender."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import DataError, Dataset, build_dataset, load_dataset, make_eval_example
from .metrics import candidate_scores, evaluate
from .model import TEST_STREAM
from .trainer import TrainConfig, fit as fit_model


def check_interactions(records) -> list[dict]:
    """Validate in-memory interaction records and return them as a list.

    Raises DataError naming the first offending record. Paths go through
    load_dataset instead, which reports file:line positions.
    """
    out = list(records)
    if not out:
        raise DataError("no interaction records")
    for i, rec in enumerate(out):
        if not isinstance(rec, dict):
            raise DataError(
                f"records[{i}]: expected a dict, got {type(rec).__name__}")
        for key in ("user", "item", "ts"):
            if key not in rec:
                raise DataError(f"records[{i}]: missing field {key!r}")
        try:
            ts = int(rec["ts"])
        except (TypeError, ValueError):
            raise DataError(
                f"records[{i}]: timestamp {rec['ts']!r} is not an integer") from None
        if ts < 0:
            raise DataError(f"records[{i}]: negative timestamp {ts}")
        attrs = rec.get("attrs")
        if attrs is not None:
            arr = np.asarray(attrs, dtype=np.float64)
            if arr.ndim != 1 or not np.all(np.isfinite(arr)):
                raise DataError(
                    f"records[{i}]: attrs must be a flat list of finite numbers")
    return out


class ConvSeqRecommender(BaseEstimator):
    """Next-item recommender over timestamped interaction logs.

    ``fit`` accepts either a JSONL path or a list of record dicts
    ({"user", "item", "ts", optional "attrs"}). Targets are implicit in
    the sequence order, so there is no ``y``. Hyperparameters mirror
    TrainConfig; all validation happens in ``fit``.
    """

    def __init__(self, sequence_length: int = 50, embedding: int = 256,
                 schedule=((2, 2), (5, 5), (7, 7)), batch_size: int = 128,
                 learning_rate: float = 1e-4, dropout_rate: float = 0.35,
                 weight_decay: float = 0.1, max_epochs: int = 1000,
                 early_stop_patience: int = 50, n_train: int = 100,
                 n_eval: int = 100, no_intervals: bool = False,
                 no_residuals: bool = False, single_conv: bool = False,
                 avgpool_only: bool = False, seed: int = 0,
                 frequent_count: int = 5000):
        self.sequence_length = sequence_length
        self.embedding = embedding
        self.schedule = schedule
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.dropout_rate = dropout_rate
        self.weight_decay = weight_decay
        self.max_epochs = max_epochs
        self.early_stop_patience = early_stop_patience
        self.n_train = n_train
        self.n_eval = n_eval
        self.no_intervals = no_intervals
        self.no_residuals = no_residuals
        self.single_conv = single_conv
        self.avgpool_only = avgpool_only
        self.seed = seed
        self.frequent_count = frequent_count

    def _train_config(self) -> TrainConfig:
        config = TrainConfig(
            sequence_length=self.sequence_length, embedding=self.embedding,
            schedule=tuple(tuple(int(v) for v in layer) for layer in self.schedule),
            batch_size=self.batch_size, learning_rate=self.learning_rate,
            dropout_rate=self.dropout_rate, weight_decay=self.weight_decay,
            max_epochs=self.max_epochs,
            early_stop_patience=self.early_stop_patience,
            n_train=self.n_train, n_eval=self.n_eval,
            no_intervals=self.no_intervals, no_residuals=self.no_residuals,
            single_conv=self.single_conv, avgpool_only=self.avgpool_only,
            seed=self.seed)
        config.validate()
        return config

    def _to_dataset(self, X) -> Dataset:
        if isinstance(X, Dataset):
            return X
        if isinstance(X, (str, Path)):
            return load_dataset(X, frequent_count=self.frequent_count)
        return build_dataset(check_interactions(X),
                             frequent_count=self.frequent_count)

    def fit(self, X, y=None):
        config = self._train_config()
        dataset = self._to_dataset(X)
        result = fit_model(dataset, config)
        self.model_ = result.model
        self.dataset_ = dataset
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.best_ndcg_ = result.best_ndcg
        self.n_features_in_ = dataset.attr_width
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "this ConvSeqRecommender instance is not fitted yet")

    def _sequences_for(self, X):
        by_key = {seq.user_id: seq for seq in self.dataset_.sequences}
        if X is None:
            return [seq for seq in self.dataset_.sequences
                    if seq.holdout is not None]
        sequences = []
        for key in X:
            seq = by_key.get(str(key))
            if seq is None:
                raise DataError(f"unknown user {key!r}")
            if seq.holdout is None:
                raise DataError(f"user {key!r} is too short to predict for")
            sequences.append(seq)
        return sequences

    def predict_top_k(self, X=None, k: int = 10) -> list[list[str]]:
        """Top-k item keys for each user's held-out next interaction.

        Candidates are every item the user has not interacted with plus
        the held-out item itself; order is by model score, best first.
        ``X`` is a list of user keys, or None for all evaluable users.
        """
        self._check_fitted()
        ranked = []
        dense_to_item = self.dataset_.vocab.dense_to_item
        for seq in self._sequences_for(X):
            rng = np.random.default_rng([self.seed, TEST_STREAM, seq.user_index])
            example = make_eval_example(seq, self.sequence_length, "test",
                                        "all_items", rng, self.dataset_)
            scores = candidate_scores(self.model_, example, self.dataset_)
            order = np.argsort(-scores, kind="stable")[:k]
            ranked.append([dense_to_item[example.candidate_items[j]]
                           for j in order])
        return ranked

    def predict(self, X=None) -> np.ndarray:
        """Single best next-item key per user."""
        return np.asarray([row[0] for row in self.predict_top_k(X, k=1)],
                          dtype=object)

    def score(self, X=None, y=None) -> float:
        """Test-holdout NDCG@10 under the sampled(n_eval) protocol.

        Scores the fit-time dataset when ``X`` is None, otherwise loads
        or assembles ``X`` the same way ``fit`` does.
        """
        self._check_fitted()
        dataset = self.dataset_ if X is None else self._to_dataset(X)
        report = evaluate(self.model_, dataset, protocol=self.n_eval, k=10,
                          seed=self.seed, mode="test")
        return report.ndcg_at_k
