"""Item and sequence encoding.

Each interaction is encoded from three ingredients: its attribute vector,
its calendar context, and its (frequency-truncated) item ID embedding.
Consecutive-event calendar intervals are concatenated before the final
projection, so the sequence representation can react to interaction
spacing. Target candidates run through the identical path as length-1
sequences with a zero interval.
"""

from __future__ import annotations

import numpy as np

from .optim import Parameter
from .tensor import (
    Tensor,
    concat_cols,
    dropout,
    embedding_lookup,
    gelu,
    layer_norm,
    linear,
)

INTERVAL_WIDTH = 3


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class ItemEncoderParams:
    """Every learnable piece of the item/sequence encoder."""

    def __init__(self, attr_width: int, ctx_width: int, table_rows: int,
                 d_a: int, d_c: int, d_f: int, d_i: int, d_v: int,
                 rng: np.random.Generator):
        self.attr_width = attr_width
        self.ctx_width = ctx_width
        self.d_v = d_v

        def lin(name, fan_in, fan_out):
            w = Parameter(f"encoder.{name}", glorot_uniform(rng, (fan_in, fan_out), fan_in, fan_out))
            b = Parameter(f"encoder.{name.replace('w_', 'b_')}", np.zeros(fan_out))
            return w, b

        self.w_a, self.b_a = lin("w_a", attr_width, d_a)
        self.w_c, self.b_c = lin("w_c", ctx_width, d_c)
        self.w_f, self.b_f = lin("w_f", d_a + d_c, d_f)
        self.id_table = Parameter(
            "encoder.id_table", glorot_uniform(rng, (table_rows, d_i), d_i, d_i))
        self.w_v, self.b_v = lin("w_v", d_i + d_f, d_v)
        self.ln_gamma = Parameter("encoder.ln_gamma", np.ones(d_v + INTERVAL_WIDTH))
        self.ln_beta = Parameter("encoder.ln_beta", np.zeros(d_v + INTERVAL_WIDTH))
        self.w_q, self.b_q = lin("w_q", d_v + INTERVAL_WIDTH, d_v)

    def parameters(self) -> list[Parameter]:
        return [
            self.w_a, self.b_a, self.w_c, self.b_c, self.w_f, self.b_f,
            self.id_table, self.w_v, self.b_v, self.ln_gamma, self.ln_beta,
            self.w_q, self.b_q,
        ]


def encode_attributes(params: ItemEncoderParams, attrs) -> Tensor:
    return linear(attrs if isinstance(attrs, Tensor) else Tensor(attrs), params.w_a, params.b_a)


def encode_context(params: ItemEncoderParams, ctx) -> Tensor:
    return linear(ctx if isinstance(ctx, Tensor) else Tensor(ctx), params.w_c, params.b_c)


def fuse_feature_context(params: ItemEncoderParams, a_enc: Tensor, c_enc: Tensor) -> Tensor:
    return linear(concat_cols(a_enc, c_enc), params.w_f, params.b_f)


def embed_and_fuse_ids(params: ItemEncoderParams, item_rows, fused: Tensor) -> Tensor:
    ids = embedding_lookup(params.id_table, item_rows)
    return linear(concat_cols(ids, fused), params.w_v, params.b_v)


def compute_intervals(raw_calendar: np.ndarray, padding_mask: np.ndarray | None = None) -> np.ndarray:
    """Componentwise (year, month, day) gaps between consecutive real events.

    The first real event gets (0, 0, 0), including across the pad/real
    boundary, and padded rows stay zero. Components subtract raw, so
    negative entries like (0, 1, -27) are expected around month ends.
    """
    raw = np.asarray(raw_calendar, dtype=np.float64)
    if padding_mask is None:
        padding_mask = ~np.all(raw == 0.0, axis=1)
    delta = np.zeros_like(raw)
    real = np.flatnonzero(padding_mask)
    if len(real) > 1:
        rows = real[1:]
        delta[rows] = raw[rows] - raw[rows - 1]
    return delta


def _encode_rows(params: ItemEncoderParams, item_rows, attrs, ctx, intervals,
                 dropout_rate: float, training: bool, rng) -> Tensor:
    a_enc = encode_attributes(params, attrs)
    c_enc = encode_context(params, ctx)
    fused = dropout(fuse_feature_context(params, a_enc, c_enc), dropout_rate, training, rng)
    v = dropout(embed_and_fuse_ids(params, item_rows, fused), dropout_rate, training, rng)
    q = layer_norm(gelu(concat_cols(v, Tensor(intervals))), params.ln_gamma, params.ln_beta)
    z = gelu(linear(q, params.w_q, params.b_q))
    return dropout(z, dropout_rate, training, rng)


def encode_sequence(params: ItemEncoderParams, item_rows, attrs, ctx, raw_calendar,
                    padding_mask, dropout_rate: float = 0.0, training: bool = False,
                    rng=None, no_intervals: bool = False) -> Tensor:
    """Encode a fixed-length input window to Z (L x d_v).

    Padded rows produce a bias-driven constant representation here; the
    caller zeroes them before the convolution pyramid.
    """
    if no_intervals:
        intervals = np.zeros((len(item_rows), INTERVAL_WIDTH))
    else:
        intervals = compute_intervals(raw_calendar, padding_mask)
    return _encode_rows(params, item_rows, attrs, ctx, intervals,
                        dropout_rate, training, rng)


def encode_target_items(params: ItemEncoderParams, item_rows, attrs, ctx,
                        dropout_rate: float = 0.0, training: bool = False,
                        rng=None) -> Tensor:
    """Encode n candidates as independent length-1 sequences, interval zero."""
    intervals = np.zeros((len(item_rows), INTERVAL_WIDTH))
    return _encode_rows(params, item_rows, attrs, ctx, intervals,
                        dropout_rate, training, rng)
