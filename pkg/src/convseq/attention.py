"""Minimal multi-head self-attention encoder, used only as a scaling
reference: its score matrix is L x L, so compute and activation memory
grow quadratically with sequence length where the convolution pyramid
grows linearly. It is not a faithful reimplementation of any baseline.
"""

from __future__ import annotations

import numpy as np

from .optim import Parameter
from .encoder import glorot_uniform
from .tensor import (
    ConfigurationError,
    Tensor,
    col_slice,
    concat_cols,
    linear,
    matmul,
    pool_rows_to,
    scale_by,
    softmax_rows,
    transpose,
)


class AttentionParams:
    """One attention block: QKV projections, heads, output projection."""

    def __init__(self, d_v: int, heads: int, rng: np.random.Generator):
        if d_v % heads != 0:
            raise ConfigurationError(f"width {d_v} not divisible into {heads} heads")
        self.d_v = d_v
        self.heads = heads
        self.head_width = d_v // heads

        def lin(name):
            w = Parameter(f"attn.{name}", glorot_uniform(rng, (d_v, d_v), d_v, d_v))
            b = Parameter(f"attn.{name}_bias", np.zeros(d_v))
            return w, b

        self.w_q, self.b_q = lin("w_q")
        self.w_k, self.b_k = lin("w_k")
        self.w_v, self.b_v = lin("w_v")
        self.w_o, self.b_o = lin("w_o")
        self.inv_sqrt_head = Tensor(np.array(1.0 / np.sqrt(self.head_width)))

    def parameters(self) -> list[Parameter]:
        return [self.w_q, self.b_q, self.w_k, self.b_k,
                self.w_v, self.b_v, self.w_o, self.b_o]


def attention_encoder_forward(params: AttentionParams, z: Tensor) -> Tensor:
    """Single-block multi-head self-attention, mean-pooled to 1 x d_v."""
    q = linear(z, params.w_q, params.b_q)
    k = linear(z, params.w_k, params.b_k)
    v = linear(z, params.w_v, params.b_v)
    head_outs = []
    w = params.head_width
    for h in range(params.heads):
        lo, hi = h * w, (h + 1) * w
        scores = scale_by(matmul(col_slice(q, lo, hi), transpose(col_slice(k, lo, hi))),
                          params.inv_sqrt_head)
        attn = softmax_rows(scores)
        head_outs.append(matmul(attn, col_slice(v, lo, hi)))
    merged = head_outs[0]
    for part in head_outs[1:]:
        merged = concat_cols(merged, part)
    projected = linear(merged, params.w_o, params.b_o)
    return pool_rows_to(projected, 1)


def attention_score_macs(length: int, d_v: int) -> int:
    """Multiply-adds of the score and value mixing terms: QK^T plus AV."""
    return 2 * length * length * d_v


def attention_total_macs(length: int, d_v: int) -> int:
    """Score-term MACs plus the four L x d_v x d_v projections."""
    return attention_score_macs(length, d_v) + 4 * length * d_v * d_v
