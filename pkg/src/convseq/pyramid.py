"""The convolution down-scaling pyramid.

A planned stack of strided 1D convolution blocks shrinks the encoded
sequence (L x d_v) to a single vector. Every block adds two weighted
residuals pooled to the block's output length: one from the original
encoded sequence, one from the previous block's output. A final average
pooling collapses any remainder to length 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .optim import Parameter
from .encoder import glorot_uniform
from .tensor import (
    ConfigurationError,
    Tensor,
    add,
    conv1d,
    dropout,
    gelu,
    layer_norm,
    linear,
    pool_rows_to,
    scale_by,
    transpose,
)


@dataclass
class ConvSchedule:
    """Kernel/stride pairs plus derived lengths and right paddings."""

    layers: list            # [(kernel, stride), ...]
    input_lengths: list     # L_{j-1} per layer
    pads: list              # right zero padding per layer
    lengths: list           # L_j per layer

    @property
    def final_length(self) -> int:
        return self.lengths[-1]

    @property
    def depth(self) -> int:
        return len(self.layers)


def plan_schedule(length: int, layers) -> ConvSchedule:
    """Derive per-layer output lengths with minimal right zero padding.

    Each layer pads the right end just enough that windows of its kernel
    size tile the input at its stride: the newest events always sit in a
    fully real window.
    """
    layers = [(int(k), int(s)) for k, s in layers]
    if not layers:
        raise ConfigurationError("schedule needs at least one (kernel, stride) layer")
    if length < 1:
        raise ConfigurationError(f"sequence length must be >= 1, got {length}")
    current = length
    input_lengths, pads, lengths = [], [], []
    for kernel, stride in layers:
        if kernel < 1 or stride < 1:
            raise ConfigurationError(f"kernel and stride must be >= 1, got ({kernel}, {stride})")
        if current < kernel:
            pad = kernel - current
        else:
            remainder = (current - kernel) % stride
            pad = 0 if remainder == 0 else stride - remainder
        out = (current + pad - kernel) // stride + 1
        input_lengths.append(current)
        pads.append(pad)
        lengths.append(out)
        current = out
    return ConvSchedule(layers=layers, input_lengths=input_lengths, pads=pads, lengths=lengths)


class ConvBlockParams:
    """Learnable weights of one pyramid stage."""

    def __init__(self, d_v: int, kernel: int, rng: np.random.Generator,
                 index: int = 0, residuals: bool = True):
        prefix = f"blocks.{index}"
        self.kernels = Parameter(
            f"{prefix}.kernels",
            glorot_uniform(rng, (d_v, d_v, kernel), d_v * kernel, d_v * kernel))
        self.bias = Parameter(f"{prefix}.bias", np.zeros(d_v))
        self.w_g = Parameter(f"{prefix}.w_g", glorot_uniform(rng, (d_v, d_v), d_v, d_v))
        self.b_g = Parameter(f"{prefix}.b_g", np.zeros(d_v))
        self.ln_gamma = Parameter(f"{prefix}.ln_gamma", np.ones(d_v))
        self.ln_beta = Parameter(f"{prefix}.ln_beta", np.zeros(d_v))
        self.residuals = residuals
        if residuals:
            self.alpha1 = Parameter(f"{prefix}.alpha1", np.array(0.5))
            self.alpha2 = Parameter(f"{prefix}.alpha2", np.array(0.5))

    def parameters(self) -> list[Parameter]:
        params = [self.kernels, self.bias, self.w_g, self.b_g, self.ln_gamma, self.ln_beta]
        if self.residuals:
            params += [self.alpha1, self.alpha2]
        return params


def conv_block(block: ConvBlockParams, o_prev: Tensor, z: Tensor, prog_res: Tensor,
               kernel: int, stride: int, pad: int, out_length: int,
               dropout_rate: float = 0.0, training: bool = False, rng=None) -> Tensor:
    """One pyramid stage: strided conv, GELU projection, pooled residuals."""
    conv = conv1d(transpose(o_prev), block.kernels, block.bias, stride, (0, pad))
    g = gelu(linear(transpose(conv), block.w_g, block.b_g))
    g = dropout(g, dropout_rate, training, rng)
    if block.residuals:
        pooled_z = scale_by(pool_rows_to(z, out_length), block.alpha1)
        pooled_prog = scale_by(pool_rows_to(prog_res, out_length), block.alpha2)
        g = add(g, add(pooled_z, pooled_prog))
    return layer_norm(g, block.ln_gamma, block.ln_beta)


def cds_forward(z: Tensor, blocks, schedule: ConvSchedule,
                dropout_rate: float = 0.0, training: bool = False, rng=None) -> Tensor:
    """Run the pyramid over an encoded sequence, collapsing to 1 x d_v.

    The progressive residual threads the previous block's output; both it
    and the original-input residual are average-pooled to each block's
    output length.
    """
    if len(blocks) != schedule.depth:
        raise ConfigurationError(
            f"{len(blocks)} blocks for a schedule of depth {schedule.depth}")
    if z.shape[0] != schedule.input_lengths[0]:
        raise ConfigurationError(
            f"input length {z.shape[0]} does not match planned {schedule.input_lengths[0]}")
    out = z
    prog = z
    for j, block in enumerate(blocks):
        kernel, stride = schedule.layers[j]
        out = conv_block(block, out, z, prog, kernel, stride, schedule.pads[j],
                         schedule.lengths[j], dropout_rate, training, rng)
        prog = out
    if out.shape[0] > 1:
        out = pool_rows_to(out, 1)
    return out


def count_flops(schedule: ConvSchedule, d_v: int) -> int:
    """Analytic multiply-add count of one pyramid forward pass.

    Each layer costs L_j * d_v^2 * K_j for the convolution plus
    L_j * d_v^2 for the projection: total sum of L_j * d_v^2 * (K_j + 1).
    """
    total = 0
    for (kernel, _), out_len in zip(schedule.layers, schedule.lengths):
        total += out_len * d_v * d_v * (kernel + 1)
    return total
