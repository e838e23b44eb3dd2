"""Full recommender: item encoder, convolution pyramid, checkpoint glue."""

from __future__ import annotations

import numpy as np

from .checkpoint import CheckpointError, load_arrays, save_arrays
from .data import CONTEXT_WIDTH, Dataset, FixedLengthExample
from .encoder import ItemEncoderParams, encode_sequence, encode_target_items
from .optim import Parameter
from .pyramid import ConvBlockParams, ConvSchedule, cds_forward, plan_schedule
from .tensor import ConfigurationError, Tensor, pool_rows_to, scale_rows

# rng stream tags, combined with the run seed as SeedSequence entropy
TRAIN_STREAM = 0
VAL_STREAM = 1
TEST_STREAM = 2
INIT_STREAM = 3

META_PREFIX = "meta."


class Model:
    """Parameters plus the wiring from an example to a 1 x d_v user state.

    The ablation switches mirror the training flags: ``single_conv``
    replaces the schedule with one full-width layer, ``avgpool_only`` drops
    the pyramid and averages the encoded rows, ``no_residuals`` builds
    alpha-free blocks, and ``no_intervals`` zeroes the calendar gaps.
    """

    def __init__(self, attr_width: int, table_rows: int, d_v: int,
                 schedule_layers, seq_length: int, seed: int = 0,
                 no_intervals: bool = False, no_residuals: bool = False,
                 single_conv: bool = False, avgpool_only: bool = False,
                 context_mean=None, context_std=None):
        if single_conv and avgpool_only:
            raise ConfigurationError("single_conv and avgpool_only are exclusive")
        self.attr_width = attr_width
        self.table_rows = table_rows
        self.d_v = d_v
        self.seq_length = seq_length
        self.no_intervals = no_intervals
        self.no_residuals = no_residuals
        self.single_conv = single_conv
        self.avgpool_only = avgpool_only
        self.context_mean = np.zeros(CONTEXT_WIDTH) if context_mean is None \
            else np.asarray(context_mean, dtype=np.float64)
        self.context_std = np.ones(CONTEXT_WIDTH) if context_std is None \
            else np.asarray(context_std, dtype=np.float64)

        rng = np.random.default_rng([seed, INIT_STREAM])
        # sub-encoder widths all follow the embedding size
        self.encoder = ItemEncoderParams(
            attr_width, CONTEXT_WIDTH, table_rows, d_v, d_v, d_v, d_v, d_v, rng)

        if single_conv:
            schedule_layers = [(seq_length, seq_length)]
        self.schedule_layers = [(int(k), int(s)) for k, s in schedule_layers]
        if avgpool_only:
            self.schedule = None
            self.blocks = []
        else:
            self.schedule = plan_schedule(seq_length, self.schedule_layers)
            self.blocks = [
                ConvBlockParams(d_v, kernel, rng, index=j, residuals=not no_residuals)
                for j, (kernel, _) in enumerate(self.schedule_layers)
            ]

    def parameters(self) -> list[Parameter]:
        params = list(self.encoder.parameters())
        for block in self.blocks:
            params.extend(block.parameters())
        return params

    def parameter_count(self) -> int:
        return sum(p.value.data.size for p in self.parameters())

    def plan_for(self, length: int) -> ConvSchedule | None:
        if self.avgpool_only:
            return None
        if length == self.seq_length:
            return self.schedule
        return plan_schedule(length, self.schedule_layers)

    def forward_example(self, example: FixedLengthExample, dataset: Dataset,
                        dropout_rate: float = 0.0, training: bool = False,
                        rng=None, schedule: ConvSchedule | None = None):
        """Return (user state 1 x d_v, candidate encodings n x d_v)."""
        vocab = dataset.vocab
        z = encode_sequence(
            self.encoder, vocab.rows_for(example.input_items),
            example.input_attrs, example.input_ctx, example.input_raw_cal,
            example.padding_mask, dropout_rate, training, rng,
            no_intervals=self.no_intervals)
        z = scale_rows(z, example.padding_mask.astype(np.float64))
        if self.avgpool_only:
            state = pool_rows_to(z, 1)
        else:
            plan = schedule if schedule is not None else self.plan_for(len(example.input_items))
            state = cds_forward(z, self.blocks, plan, dropout_rate, training, rng)
        candidates = encode_target_items(
            self.encoder, vocab.rows_for(example.candidate_items),
            example.candidate_attrs, example.candidate_ctx,
            dropout_rate, training, rng)
        return state, candidates

    # --- persistence ------------------------------------------------------

    def named_arrays(self) -> dict[str, np.ndarray]:
        arrays = {p.name: p.value.data for p in self.parameters()}
        flags = np.array([self.no_intervals, self.no_residuals,
                          self.single_conv, self.avgpool_only], dtype=np.float64)
        arrays[META_PREFIX + "context_mean"] = self.context_mean
        arrays[META_PREFIX + "context_std"] = self.context_std
        arrays[META_PREFIX + "flags"] = flags
        arrays[META_PREFIX + "schedule"] = np.array(self.schedule_layers, dtype=np.float64)
        arrays[META_PREFIX + "seq_length"] = np.array(float(self.seq_length))
        return arrays

    def save(self, path) -> None:
        save_arrays(path, self.named_arrays())

    def load_values(self, arrays: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in arrays:
                raise CheckpointError(f"checkpoint is missing parameter {p.name}")
            stored = arrays[p.name]
            if stored.shape != p.value.data.shape:
                raise CheckpointError(
                    f"parameter {p.name} has shape {stored.shape}, "
                    f"expected {p.value.data.shape}")
            p.value.data[...] = stored

    @classmethod
    def load(cls, path) -> "Model":
        arrays = load_arrays(path)
        for key in ("flags", "schedule", "seq_length", "context_mean", "context_std"):
            if META_PREFIX + key not in arrays:
                raise CheckpointError(f"checkpoint is missing {META_PREFIX}{key}")
        flags = arrays[META_PREFIX + "flags"].astype(bool)
        raw_schedule = arrays[META_PREFIX + "schedule"]
        schedule_layers = [(int(k), int(s)) for k, s in raw_schedule.reshape(-1, 2)]
        try:
            table_rows, d_i = arrays["encoder.id_table"].shape
            attr_width, _ = arrays["encoder.w_a"].shape
            d_v = arrays["encoder.w_q"].shape[1]
        except KeyError as missing:
            raise CheckpointError(f"checkpoint is missing parameter {missing}") from None
        model = cls(attr_width, table_rows, d_v, schedule_layers,
                    int(arrays[META_PREFIX + "seq_length"]),
                    no_intervals=bool(flags[0]), no_residuals=bool(flags[1]),
                    single_conv=bool(flags[2]), avgpool_only=bool(flags[3]),
                    context_mean=arrays[META_PREFIX + "context_mean"],
                    context_std=arrays[META_PREFIX + "context_std"])
        model.load_values(arrays)
        return model
