"""Dense float64 tensors with reverse-mode autodiff.

Every operation the recommender needs is implemented here as a forward
computation plus a hand-written backward closure. Gradients accumulate
into ``Tensor.grad`` buffers when ``backward()`` is called on a scalar
result. The module also exposes an allocation tracker used by the
benchmark harness to measure peak activation memory.
"""

from __future__ import annotations

import weakref
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigurationError(ValueError):
    """Operation hyperparameters (kernel, stride, padding, rate) are invalid."""


class AllocationTracker:
    """High-water mark of live tensor bytes, counted by the engine itself.

    Only arrays registered while a tracking window is open are counted;
    they are released from the tally when garbage collected. The autodiff
    graph is reference-cycle free, so CPython frees buffers at defined
    points and the recorded peak is deterministic for a fixed workload.
    """

    def __init__(self):
        self.active = False
        self.live_bytes = 0
        self.peak_bytes = 0
        self._generation = 0

    def note(self, arr: np.ndarray) -> None:
        if not self.active:
            return
        n = arr.nbytes
        self.live_bytes += n
        if self.live_bytes > self.peak_bytes:
            self.peak_bytes = self.live_bytes
        weakref.finalize(arr, self._release, self._generation, n)

    def _release(self, generation: int, n: int) -> None:
        if self.active and generation == self._generation:
            self.live_bytes -= n

    def begin(self) -> None:
        self._generation += 1
        self.live_bytes = 0
        self.peak_bytes = 0
        self.active = True

    def end(self) -> None:
        self.active = False


_TRACKER = AllocationTracker()


@contextmanager
def track_allocations():
    """Open a tracking window and yield the tracker.

    ``tracker.peak_bytes`` after the block is the activation high-water
    mark of everything allocated inside it.
    """
    _TRACKER.begin()
    try:
        yield _TRACKER
    finally:
        _TRACKER.end()


def blas_thread_count() -> int:
    """Largest thread count any loaded BLAS reports; 1 if none found."""
    from threadpoolctl import threadpool_info

    counts = [info.get("num_threads", 1) for info in threadpool_info()]
    return max(counts, default=1)


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """A dense float64 array plus an optional accumulated-gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        _TRACKER.note(self.data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            buf = np.array(g, dtype=np.float64)
            _TRACKER.note(buf)
            self.grad = buf
        else:
            self.grad += g

    def backward(self, seed: float = 1.0) -> None:
        """Backpropagate from this tensor, seeding d(self)/d(self) = seed.

        The root must be scalar-sized. Node buffers are released as soon
        as their backward closure has run, so peak memory during the
        sweep decays along with it.
        """
        if self.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {self.shape}")
        order: list[Tensor] = []
        seen = {id(self)}
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    seen.add(id(parent))
                    stack.append((parent, False))
        self.accumulate_grad(np.full(self.shape, seed))
        for node in reversed(order):
            if node._backward is not None:
                if node.grad is not None:
                    node._backward(node.grad)
                # interior node: gradient fully propagated, release it
                node._backward = None
                node.grad = None
            node._parents = ()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    """Coerce an array, Parameter, or Tensor to a Tensor."""
    if isinstance(x, Tensor):
        return x
    value = getattr(x, "value", None)
    if isinstance(value, Tensor):
        return value
    return Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _make(a.data + b.data, (a, b), backward)


def scale_by(x, s) -> Tensor:
    """Multiply a tensor by a scalar-shaped tensor (learnable residual weight)."""
    x, s = as_tensor(x), as_tensor(s)
    if s.size != 1:
        raise ShapeError(f"scale_by: scale must be scalar, got shape {s.shape}")
    factor = s.data.reshape(-1)[0]

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(factor * g)
        if s.requires_grad:
            s.accumulate_grad(np.array(np.sum(x.data * g)).reshape(s.shape))

    return _make(x.data * factor, (x, s), backward)


def scale_rows(x, weights: np.ndarray) -> Tensor:
    """Multiply each row by a fixed (non-learnable) weight, e.g. a padding mask."""
    x = as_tensor(x)
    w = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
    if w.shape[0] != x.shape[0]:
        raise ShapeError(f"scale_rows: {w.shape[0]} weights for {x.shape[0]} rows")

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * w)

    return _make(x.data * w, (x,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not chain")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward)


def linear(x, w, b) -> Tensor:
    """Affine map ``x @ w + b`` over rows of ``x``."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} incompatible with weight {w.shape}")

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g @ w.data.T)
        if w.requires_grad:
            w.accumulate_grad(x.data.T @ g)
        if b.requires_grad:
            b.accumulate_grad(g.sum(axis=0))

    return _make(x.data @ w.data + b.data, (x, w, b), backward)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g.T)

    return _make(x.data.T.copy(), (x,), backward)


def concat_cols(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: row counts {a.shape[0]} and {b.shape[0]} differ")
    split = a.shape[1]

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g[:, :split])
        if b.requires_grad:
            b.accumulate_grad(g[:, split:])

    return _make(np.hstack([a.data, b.data]), (a, b), backward)


def col_slice(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            buf[:, start:stop] = g
            x.accumulate_grad(buf)

    return _make(x.data[:, start:stop].copy(), (x,), backward)


def embedding_lookup(table, rows) -> Tensor:
    """Gather table rows; the backward pass scatters only into used rows."""
    table = as_tensor(table)
    idx = np.asarray(rows, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(
            f"embedding_lookup: row ids in [{idx.min()}, {idx.max()}] exceed table of {table.shape[0]} rows"
        )

    def backward(g):
        if table.requires_grad:
            if table.grad is None:
                buf = np.zeros_like(table.data)
                _TRACKER.note(buf)
                table.grad = buf
            np.add.at(table.grad, idx, g)

    return _make(table.data[idx], (table,), backward)


def gelu(x) -> Tensor:
    """Exact Gaussian-CDF gelu, x * Phi(x)."""
    x = as_tensor(x)
    phi_big = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def backward(g):
        if x.requires_grad:
            density = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
            x.accumulate_grad(g * (phi_big + x.data * density))

    return _make(x.data * phi_big, (x,), backward)


def layer_norm(x, gamma, beta, epsilon: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} for width {d}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = (x.data - mu) * inv_std

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            term = gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True)
            x.accumulate_grad(inv_std * term)

    return _make(gamma.data * xhat + beta.data, (x, gamma, beta), backward)


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Zero elements with probability ``rate`` and rescale survivors (training only)."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigurationError("dropout in training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * keep)

    return _make(x.data * keep, (x,), backward)


def _conv_geometry(length: int, kernel: int, stride: int, pad: tuple[int, int]) -> int:
    pad_left, pad_right = pad
    if kernel < 1 or stride < 1:
        raise ConfigurationError(f"kernel and stride must be >= 1, got ({kernel}, {stride})")
    if pad_left < 0 or pad_right < 0:
        raise ConfigurationError(f"padding must be non-negative, got {pad}")
    padded = length + pad_left + pad_right
    if kernel > padded:
        raise ConfigurationError(f"kernel {kernel} exceeds padded length {padded}")
    if (padded - kernel) % stride != 0:
        raise ConfigurationError(
            f"windows of size {kernel} at stride {stride} do not tile padded length {padded}"
        )
    return (padded - kernel) // stride + 1


def _window_cols(padded: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    # (C, Lp) -> (C * kernel, L_out) with row index c * kernel + k
    view = np.lib.stride_tricks.sliding_window_view(padded, kernel, axis=1)[:, ::stride, :]
    return view.transpose(0, 2, 1).reshape(padded.shape[0] * kernel, -1)


def conv1d(x, kernels, bias, stride: int, pad: tuple[int, int] = (0, 0)) -> Tensor:
    """Cross-correlate channels-by-length input with a bank of kernels.

    ``x`` is (C_in, L), ``kernels`` is (C_out, C_in, K); zero padding is
    applied as (left, right) before striding. The padded window count must
    divide exactly, which the schedule planner guarantees.
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    c_in, length = x.shape
    c_out, kc_in, k = kernels.shape
    if kc_in != c_in:
        raise ShapeError(f"conv1d: input has {c_in} channels, kernels expect {kc_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv1d: bias {bias.shape} for {c_out} output channels")
    l_out = _conv_geometry(length, k, stride, pad)
    padded = np.pad(x.data, ((0, 0), pad))
    cols = _window_cols(padded, k, stride)
    kernel_mat = kernels.data.reshape(c_out, c_in * k)
    out = kernel_mat @ cols + bias.data[:, None]

    def backward(g):
        if kernels.requires_grad:
            kernels.accumulate_grad((g @ cols.T).reshape(kernels.shape))
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=1))
        if x.requires_grad:
            dcols = (kernel_mat.T @ g).reshape(c_in, k, l_out)
            dpadded = np.zeros_like(padded)
            for offset in range(k):
                dpadded[:, offset : offset + stride * l_out : stride] += dcols[:, offset, :]
            x.accumulate_grad(dpadded[:, pad[0] : pad[0] + length])

    return _make(out, (x, kernels, bias), backward)


def avg_pool1d(x, window: int, stride: int, pad: tuple[int, int] = (0, 0)) -> Tensor:
    """Mean over strided windows per channel; padding never enters the mean.

    Windows are counted with the same geometry as conv1d, but each mean
    divides by the number of in-bounds elements only, so padded tails do
    not dilute the signal.
    """
    x = as_tensor(x)
    c, length = x.shape
    l_out = _conv_geometry(length, window, stride, pad)
    padded = np.pad(x.data, ((0, 0), pad))
    real = np.pad(np.ones(length), pad)
    sums = _window_cols(padded, window, stride).reshape(c, window, l_out).sum(axis=1)
    counts = _window_cols(real[None, :], window, stride).sum(axis=0)
    if np.any(counts == 0):
        raise ConfigurationError("avg_pool1d window contains no real elements")
    out = sums / counts

    def backward(g):
        if x.requires_grad:
            scaled = g / counts
            dpadded = np.zeros_like(padded)
            for offset in range(window):
                dpadded[:, offset : offset + stride * l_out : stride] += scaled
            x.accumulate_grad(dpadded[:, pad[0] : pad[0] + length])

    return _make(out, (x,), backward)


def pool_rows_to(x, target: int) -> Tensor:
    """Average rows into exactly ``target`` rows via proportional segments.

    Segment i covers rows [floor(i*L/t), ceil((i+1)*L/t)); segments tile the
    input for any (L, t) with t <= L, reducing to plain block pooling when
    L is divisible by t.
    """
    x = as_tensor(x)
    length = x.shape[0]
    if not 1 <= target <= length:
        raise ConfigurationError(f"pool_rows_to: cannot pool {length} rows to {target}")
    starts = (np.arange(target) * length) // target
    stops = -(-(np.arange(1, target + 1) * length) // target)
    counts = (stops - starts).astype(np.float64)
    csum = np.vstack([np.zeros((1, x.shape[1])), np.cumsum(x.data, axis=0)])
    out = (csum[stops] - csum[starts]) / counts[:, None]

    def backward(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            scaled = g / counts[:, None]
            for i in range(target):
                buf[starts[i] : stops[i]] += scaled[i]
            x.accumulate_grad(buf)

    return _make(out, (x,), backward)


def softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(p * (g - (g * p).sum(axis=1, keepdims=True)))

    return _make(p, (x,), backward)


def sum_all(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.full(x.shape, g.reshape(-1)[0]))

    return _make(np.array(x.data.sum()), (x,), backward)


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    n = x.size

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.full(x.shape, g.reshape(-1)[0] / n))

    return _make(np.array(x.data.mean()), (x,), backward)


def ranking_bce(logits) -> Tensor:
    """Binary cross-entropy over one positive (index 0) and N negative logits.

    Computed through log-sigmoid in its softplus form, so arbitrarily large
    logits neither overflow nor underflow.
    """
    x = as_tensor(logits)
    flat = x.data.reshape(-1)
    if flat.size < 2:
        raise ShapeError("ranking_bce needs one positive and at least one negative logit")
    signs = np.ones_like(flat)
    signs[0] = -1.0
    z = signs * flat
    # softplus(z) = max(z, 0) + log1p(exp(-|z|))
    loss = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))

    def backward(g):
        if x.requires_grad:
            sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))
            x.accumulate_grad((g.reshape(-1)[0] * signs * sig).reshape(x.shape))

    return _make(np.array(loss.sum()), (x,), backward)
