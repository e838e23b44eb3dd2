"""Interaction-log ingestion and fixed-length example construction.

Input is JSON-lines, one interaction per line: {"user": str, "item": str,
"ts": int, "attrs": [floats]}. Attributes may instead come from a separate
per-item file {"item": str, "attrs": [...]}. Timestamps are decomposed into
UTC (year, month, day); those components are z-scored with training-region
statistics for the context input while the raw integers are kept for
interval computation.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

log = logging.getLogger(__name__)

PAD_ITEM = -1
CONTEXT_WIDTH = 3
DEFAULT_FREQUENT_COUNT = 5000


class DataError(ValueError):
    """Input files are malformed or a sampling precondition fails."""


def decompose_timestamp(ts: int) -> tuple[int, int, int]:
    """Calendar (year, month, day) of a POSIX timestamp in UTC."""
    if ts < 0:
        raise DataError(f"negative timestamp {ts}")
    moment = datetime.fromtimestamp(ts, timezone.utc)
    return moment.year, moment.month, moment.day


@dataclass
class UserSequence:
    """One user's chronological events as parallel arrays."""

    user_index: int
    user_id: str
    items: np.ndarray        # dense item indices
    attrs: np.ndarray        # n x |A|
    ctx: np.ndarray          # n x 3, standardized calendar components
    raw_cal: np.ndarray      # n x 3, raw (year, month, day) integers
    timestamps: np.ndarray
    holdout: tuple[int, int] | None = None   # (validation index, test index)
    _item_set: frozenset = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.items)

    @property
    def item_set(self) -> frozenset:
        if self._item_set is None:
            self._item_set = frozenset(int(i) for i in self.items)
        return self._item_set

    def train_positions(self) -> np.ndarray:
        held = set(self.holdout) if self.holdout else set()
        return np.array([i for i in range(len(self)) if i not in held], dtype=np.intp)

    def train_target_positions(self) -> np.ndarray:
        positions = self.train_positions()
        return positions[positions >= 1]

    @property
    def train_length(self) -> int:
        return len(self.train_positions())


class ItemVocabulary:
    """Dense item indexing plus frequent-item embedding-row assignment.

    The top ``frequent_count`` items by interaction count get unique rows
    1..F (ties broken by lexicographic item key); everything else shares
    the generic row 0. One extra row at the end is reserved for padding.
    """

    def __init__(self, item_keys: list[str], counts: np.ndarray, frequent_count: int):
        if frequent_count < 0:
            raise DataError(f"frequent_count must be >= 0, got {frequent_count}")
        self.dense_to_item = list(item_keys)
        self.item_to_dense = {k: i for i, k in enumerate(item_keys)}
        self.frequency = np.asarray(counts, dtype=np.int64)
        self.frequent_count = min(frequent_count, len(item_keys))
        order = sorted(range(len(item_keys)), key=lambda i: (-counts[i], item_keys[i]))
        self.embedded_row = np.zeros(len(item_keys), dtype=np.intp)
        for rank, dense in enumerate(order[: self.frequent_count]):
            self.embedded_row[dense] = rank + 1
        self.pad_row = self.frequent_count + 1
        self.table_rows = self.frequent_count + 2

    @property
    def item_count(self) -> int:
        return len(self.dense_to_item)

    def rows_for(self, items: np.ndarray) -> np.ndarray:
        """Embedding rows for dense item ids; PAD_ITEM maps to the pad row."""
        items = np.asarray(items)
        rows = np.full(items.shape, self.pad_row, dtype=np.intp)
        real = items != PAD_ITEM
        rows[real] = self.embedded_row[items[real]]
        return rows


def build_item_vocab(sequences, frequent_count: int, item_keys: list[str]) -> ItemVocabulary:
    counts = np.zeros(len(item_keys), dtype=np.int64)
    for seq in sequences:
        np.add.at(counts, seq.items, 1)
    return ItemVocabulary(item_keys, counts, frequent_count)


@dataclass
class FixedLengthExample:
    """Left-padded inputs plus one positive target and its negatives."""

    user_index: int
    input_items: np.ndarray       # L dense ids, PAD_ITEM on the left
    input_attrs: np.ndarray       # L x |A|
    input_ctx: np.ndarray         # L x 3
    input_raw_cal: np.ndarray     # L x 3
    padding_mask: np.ndarray      # L bools, True on real events
    target_item: int
    target_attrs: np.ndarray
    target_ctx: np.ndarray
    negative_items: np.ndarray
    negative_attrs: np.ndarray
    negative_ctx: np.ndarray

    @property
    def candidate_items(self) -> np.ndarray:
        return np.concatenate([[self.target_item], self.negative_items])

    @property
    def candidate_attrs(self) -> np.ndarray:
        return np.vstack([self.target_attrs[None, :], self.negative_attrs])

    @property
    def candidate_ctx(self) -> np.ndarray:
        return np.vstack([self.target_ctx[None, :], self.negative_ctx])


@dataclass
class Dataset:
    sequences: list
    vocab: ItemVocabulary
    attr_table: np.ndarray        # item_count x |A|, canonical per-item attributes
    ctx_mean: np.ndarray
    ctx_std: np.ndarray
    stats: dict

    @property
    def attr_width(self) -> int:
        return self.attr_table.shape[1]

    @property
    def item_count(self) -> int:
        return self.vocab.item_count


def _negative_pool(seq: UserSequence, item_count: int) -> np.ndarray:
    mask = np.ones(item_count, dtype=bool)
    mask[list(seq.item_set)] = False
    return np.flatnonzero(mask)


def _window(seq: UserSequence, stop: int, length: int):
    """Last ``length`` events strictly before ``stop``, left-padded arrays."""
    lo = max(0, stop - length)
    real = stop - lo
    attr_width = seq.attrs.shape[1]
    items = np.full(length, PAD_ITEM, dtype=np.int64)
    attrs = np.zeros((length, attr_width))
    ctx = np.zeros((length, CONTEXT_WIDTH))
    raw = np.zeros((length, CONTEXT_WIDTH))
    mask = np.zeros(length, dtype=bool)
    if real:
        items[length - real :] = seq.items[lo:stop]
        attrs[length - real :] = seq.attrs[lo:stop]
        ctx[length - real :] = seq.ctx[lo:stop]
        raw[length - real :] = seq.raw_cal[lo:stop]
        mask[length - real :] = True
    return items, attrs, ctx, raw, mask


def _sample_negatives(seq: UserSequence, count: int, item_count: int,
                      rng: np.random.Generator) -> np.ndarray:
    pool = _negative_pool(seq, item_count)
    if count > len(pool):
        raise DataError(
            f"user {seq.user_id!r}: {count} negatives requested, only {len(pool)} items available"
        )
    return rng.choice(pool, size=count, replace=False)


def _finish_example(seq, stop, target_pos, length, negatives, dataset) -> FixedLengthExample:
    items, attrs, ctx, raw, mask = _window(seq, stop, length)
    target_ctx = seq.ctx[target_pos]
    return FixedLengthExample(
        user_index=seq.user_index,
        input_items=items,
        input_attrs=attrs,
        input_ctx=ctx,
        input_raw_cal=raw,
        padding_mask=mask,
        target_item=int(seq.items[target_pos]),
        target_attrs=seq.attrs[target_pos].copy(),
        target_ctx=target_ctx.copy(),
        negative_items=negatives,
        negative_attrs=dataset.attr_table[negatives],
        negative_ctx=np.tile(target_ctx, (len(negatives), 1)),
    )


def make_training_example(seq: UserSequence, length: int, n_train: int,
                          rng: np.random.Generator, dataset: Dataset) -> FixedLengthExample | None:
    """Random-subsequence training example, or None when the user is too short.

    The target position is uniform over trainable positions with at least
    one predecessor; the input is the (up to L) events immediately before
    it. Negatives are drawn fresh on every call, without replacement, from
    the items the user never interacted with.
    """
    targets = seq.train_target_positions()
    if len(targets) == 0:
        return None
    t = int(targets[rng.integers(len(targets))])
    negatives = _sample_negatives(seq, n_train, dataset.item_count, rng)
    return _finish_example(seq, t, t, length, negatives, dataset)


def make_eval_example(seq: UserSequence, length: int, mode: str, negatives, rng,
                      dataset: Dataset) -> FixedLengthExample | None:
    """Leave-one-out example: ``test`` targets the last event, ``validation``
    the second-to-last. ``negatives`` is either an int (sample that many) or
    the string "all_items". Returns None for users too short to evaluate.
    """
    if mode not in ("validation", "test"):
        raise DataError(f"unknown eval mode {mode!r}")
    if len(seq) < 3:
        return None
    if seq.holdout is not None:
        valid_pos, test_pos = seq.holdout
    else:
        valid_pos, test_pos = len(seq) - 2, len(seq) - 1
    t = test_pos if mode == "test" else valid_pos
    if negatives == "all_items":
        negs = _negative_pool(seq, dataset.item_count)
        if len(negs) == 0:
            raise DataError(f"user {seq.user_id!r} interacted with the whole catalog")
    else:
        negs = _sample_negatives(seq, int(negatives), dataset.item_count, rng)
    return _finish_example(seq, t, t, length, negs, dataset)


def _parse_jsonl(path):
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            yield f"{path}:{lineno}", record


def load_dataset(path, item_attrs_path=None, split_path=None,
                 frequent_count: int = DEFAULT_FREQUENT_COUNT) -> Dataset:
    """Parse an interaction log into per-user sequences plus a vocabulary.

    Ordering inside a user is by timestamp, stable under ties. Dense item
    and user indices follow first appearance in the file, so two loads of
    the same file produce identical structures.
    """
    attr_pairs = _parse_jsonl(item_attrs_path) if item_attrs_path else None
    splits = None
    if split_path is not None:
        try:
            with open(split_path, "r", encoding="utf-8") as fh:
                splits = json.load(fh)
        except OSError as exc:
            raise DataError(f"cannot read {split_path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"{split_path}: invalid JSON ({exc.msg})") from None
    return _assemble(_parse_jsonl(path), attr_pairs, splits, frequent_count,
                     source=str(path), split_source=str(split_path))


def build_dataset(records, item_attrs=None, splits=None,
                  frequent_count: int = DEFAULT_FREQUENT_COUNT) -> Dataset:
    """Assemble a Dataset from in-memory interaction dicts.

    Records have the same shape as JSONL lines. `item_attrs` maps item key
    to attribute vector; `splits` maps user key to {"valid": i, "test": j}.
    """
    labeled = ((f"records[{i}]", rec) for i, rec in enumerate(records))
    attr_pairs = None
    if item_attrs is not None:
        attr_pairs = ((f"item_attrs[{key!r}]", {"item": key, "attrs": vec})
                      for key, vec in item_attrs.items())
    return _assemble(labeled, attr_pairs, splits, frequent_count,
                     source="records", split_source="splits")


def _assemble(labeled_records, labeled_attr_records, splits, frequent_count,
              source: str, split_source: str) -> Dataset:
    users: list[str] = []
    user_ids: dict[str, int] = {}
    item_keys: list[str] = []
    item_ids: dict[str, int] = {}
    per_user: dict[int, list] = {}
    file_order: list[tuple[int, np.ndarray]] = []
    attr_width = None

    for label, rec in labeled_records:
        for key in ("user", "item", "ts"):
            if key not in rec:
                raise DataError(f"{label}: missing field {key!r}")
        user_key = str(rec["user"])
        item_key = str(rec["item"])
        try:
            ts = int(rec["ts"])
        except (TypeError, ValueError):
            raise DataError(
                f"{label}: timestamp {rec['ts']!r} is not an integer") from None
        if ts < 0:
            raise DataError(f"{label}: negative timestamp {ts}")
        attrs = rec.get("attrs")
        if attrs is not None:
            try:
                attrs = np.asarray(attrs, dtype=np.float64)
            except (TypeError, ValueError):
                raise DataError(f"{label}: attrs must be a flat list") from None
            if attrs.ndim != 1:
                raise DataError(f"{label}: attrs must be a flat list")
            if attr_width is None:
                attr_width = len(attrs)
            elif len(attrs) != attr_width:
                raise DataError(
                    f"{label}: attribute width {len(attrs)} != {attr_width} seen earlier"
                )
        if user_key not in user_ids:
            user_ids[user_key] = len(users)
            users.append(user_key)
            per_user[user_ids[user_key]] = []
        if item_key not in item_ids:
            item_ids[item_key] = len(item_keys)
            item_keys.append(item_key)
        per_user[user_ids[user_key]].append((ts, item_ids[item_key], attrs))
        if attrs is not None:
            file_order.append((item_ids[item_key], attrs))

    if not users:
        raise DataError(f"{source}: no interaction records")

    side_attrs = {}
    if labeled_attr_records is not None:
        for label, rec in labeled_attr_records:
            for key in ("item", "attrs"):
                if key not in rec:
                    raise DataError(f"{label}: missing field {key!r}")
            try:
                vec = np.asarray(rec["attrs"], dtype=np.float64)
            except (TypeError, ValueError):
                raise DataError(f"{label}: attrs must be a flat list") from None
            if vec.ndim != 1:
                raise DataError(f"{label}: attrs must be a flat list")
            if attr_width is None:
                attr_width = len(vec)
            elif len(vec) != attr_width:
                raise DataError(
                    f"{label}: attribute width {len(vec)} != {attr_width}"
                )
            side_attrs[str(rec["item"])] = vec
    if attr_width is None:
        raise DataError(f"{source}: no attribute vectors found in any input")

    # canonical per-item attributes: side file wins, else first interaction
    # carrying attrs in file order
    attr_table = np.zeros((len(item_keys), attr_width))
    have_attrs = np.zeros(len(item_keys), dtype=bool)
    for key, vec in side_attrs.items():
        if key in item_ids:
            attr_table[item_ids[key]] = vec
            have_attrs[item_ids[key]] = True
    for dense, vec in file_order:
        if not have_attrs[dense]:
            attr_table[dense] = vec
            have_attrs[dense] = True

    positions = {}
    if splits is not None:
        for user_key, entry in splits.items():
            try:
                positions[str(user_key)] = (int(entry["valid"]), int(entry["test"]))
            except (TypeError, KeyError):
                raise DataError(
                    f"{split_source}: entry for user {user_key!r} needs "
                    "integer 'valid' and 'test' positions") from None

    sequences = []
    interaction_count = 0
    for u, user_key in enumerate(users):
        events = per_user[u]
        order = np.argsort([e[0] for e in events], kind="stable")
        n = len(events)
        items = np.empty(n, dtype=np.int64)
        attrs = np.zeros((n, attr_width))
        raw = np.zeros((n, CONTEXT_WIDTH))
        stamps = np.empty(n, dtype=np.int64)
        for row, j in enumerate(order):
            ts, dense, vec = events[j]
            items[row] = dense
            stamps[row] = ts
            raw[row] = decompose_timestamp(ts)
            if vec is not None:
                attrs[row] = vec
            elif have_attrs[dense]:
                attrs[row] = attr_table[dense]
            else:
                raise DataError(
                    f"{source}: item {item_keys[dense]!r} has no attributes in any input"
                )
        holdout = None
        if user_key in positions:
            valid_pos, test_pos = positions[user_key]
            if not (0 <= valid_pos < n and 0 <= test_pos < n and valid_pos != test_pos):
                raise DataError(
                    f"{split_source}: bad holdout positions for user {user_key!r}")
            holdout = (valid_pos, test_pos)
        elif n >= 3:
            holdout = (n - 2, n - 1)
        sequences.append(UserSequence(
            user_index=u, user_id=user_key, items=items, attrs=attrs,
            ctx=np.zeros((n, CONTEXT_WIDTH)), raw_cal=raw, timestamps=stamps,
            holdout=holdout,
        ))
        interaction_count += n

    # z-score calendar components over training-region events only
    train_rows = np.vstack([s.raw_cal[s.train_positions()] for s in sequences])
    ctx_mean = train_rows.mean(axis=0)
    ctx_std = train_rows.std(axis=0)
    ctx_std[ctx_std == 0.0] = 1.0
    for s in sequences:
        s.ctx = (s.raw_cal - ctx_mean) / ctx_std

    stats = {
        "users": len(users),
        "items": len(item_keys),
        "interactions": interaction_count,
        "avg_sequence_length": interaction_count / len(users),
    }
    log.info(
        "loaded %s: %d users, %d items, %d interactions, avg length %.2f",
        source, stats["users"], stats["items"], stats["interactions"],
        stats["avg_sequence_length"],
    )
    vocab = build_item_vocab(sequences, frequent_count, item_keys)
    return Dataset(sequences=sequences, vocab=vocab, attr_table=attr_table,
                   ctx_mean=ctx_mean, ctx_std=ctx_std, stats=stats)
