"""Fused INT8 non-linear operators: GELU, Dropout, Add, LayerNorm.

Each operator keeps the INT8 data flow: inputs and outputs are
block-quantized tensors, and the dequantize -> float32 math -> requantize
sequence happens inside the operator. Two of them have extra structure:

* Add emits per-row, per-column-block mean and sum-of-squares statistics
  of its full-precision output, so a following LayerNorm can normalize
  without re-reading the whole activation in high precision.
* Dropout never touches the integer values: it zeroes masked entries and
  folds the 1/(1-p) correction into the block scales.

The float32 cores (``gelu_f32`` and friends) are exposed separately so
full-precision reference paths can share the exact same math.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .qtensor import BlockQuantTensor, quantize_per_block, snap_to_f16
from .qgemm import AccessCounters, ExecMode

_INV_SQRT2 = np.float32(0.7071067811865476)
_INV_SQRT_2PI = np.float32(0.3989422804014327)


# ── float32 cores ───────────────────────────────────────────────────────


def norm_cdf(x: np.ndarray) -> np.ndarray:
    """Standard normal CDF via the exact error function."""
    return np.float32(0.5) * (np.float32(1.0) + erf(x * _INV_SQRT2))


def gelu_f32(x: np.ndarray) -> np.ndarray:
    return x * norm_cdf(x)


def gelu_grad_f32(x: np.ndarray) -> np.ndarray:
    """d/dx of x * CDF(x) = x * pdf(x) + CDF(x)."""
    pdf = _INV_SQRT_2PI * np.exp(np.float32(-0.5) * x * x)
    return x * pdf + norm_cdf(x)


def layernorm_f32(
    x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float
) -> np.ndarray:
    mu = x.mean(axis=1, keepdims=True)
    var = np.maximum(x.var(axis=1, keepdims=True), 0.0)
    xhat = (x - mu) / np.sqrt(var + np.float32(eps))
    return gamma * xhat + beta


def layernorm_grad_f32(
    x: np.ndarray, dy: np.ndarray, gamma: np.ndarray, eps: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Standard three-term LayerNorm gradient, all in float32."""
    mu = x.mean(axis=1, keepdims=True)
    var = np.maximum(x.var(axis=1), 0.0)
    inv_std = (1.0 / np.sqrt(var + np.float32(eps))).astype(np.float32)
    xhat = (x - mu) * inv_std[:, None]
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = inv_std[:, None] * (dxhat - m1 - xhat * m2)
    return dx.astype(np.float32), (dy * xhat).sum(axis=0), dy.sum(axis=0)


# ── cost tallies ────────────────────────────────────────────────────────


def count_elementwise(
    counters: AccessCounters | None,
    mode: ExecMode,
    in_elems: int,
    out_elems: int,
    dequant_elems: int = 0,
    quant_elems: int = 0,
) -> None:
    """Charge traffic for one element-wise operator call.

    INT8 data flow moves 8-bit elements and pays explicit quant/dequant;
    the QCD-style baseline moves the same element counts as 16-bit values
    with no conversion work inside the operator.
    """
    if counters is None:
        return
    if mode is ExecMode.INT8_DATA_FLOW:
        counters.int8_load_store += in_elems + out_elems
        counters.dequant_ops += dequant_elems
        counters.quant_ops += quant_elems
    else:
        counters.fp16_load_store += in_elems + out_elems


# ── statistics side channel ─────────────────────────────────────────────


@dataclass
class RowStats:
    """Per-row, per-column-block mean and sum of squares of an activation.

    ``mean[i, j]`` and ``sumsq[i, j]`` summarize columns
    [j * width, (j+1) * width) of row i of the full-precision tensor they
    were computed from.
    """

    mean: np.ndarray
    sumsq: np.ndarray
    width: int

    def __post_init__(self):
        if self.mean.shape != self.sumsq.shape:
            raise ValueError("mean and sumsq shapes differ")

    @property
    def cols(self) -> int:
        return self.mean.shape[1] * self.width

    def row_mean(self) -> np.ndarray:
        # Equal-width blocks: the full-row mean is the mean of block means.
        return self.mean.mean(axis=1)

    def row_var(self) -> np.ndarray:
        mu = self.row_mean()
        var = self.sumsq.sum(axis=1) / np.float32(self.cols) - mu * mu
        return np.maximum(var, 0.0)


def compute_row_stats(x: np.ndarray, width: int) -> RowStats:
    """Blockwise mean/sum-of-squares of a float32 matrix (width | C)."""
    n, c = x.shape
    if c % width:
        raise ValueError(f"stats width {width} does not divide {c} columns")
    blocked = x.reshape(n, c // width, width)
    return RowStats(
        blocked.mean(axis=2).astype(np.float32),
        (blocked * blocked).sum(axis=2).astype(np.float32),
        width,
    )


# ── GELU ────────────────────────────────────────────────────────────────


def gelu_forward(
    xq: BlockQuantTensor, counters: AccessCounters | None = None
) -> BlockQuantTensor:
    """y = x * CDF(x) on the dequantized tile, requantized per block."""
    nc = xq.rows * xq.cols
    count_elementwise(
        counters, ExecMode.INT8_DATA_FLOW, nc, nc, dequant_elems=nc, quant_elems=nc
    )
    return quantize_per_block(gelu_f32(xq.dequantize()), xq.block)


def gelu_backward(
    xq: BlockQuantTensor,
    dyq: BlockQuantTensor,
    counters: AccessCounters | None = None,
) -> BlockQuantTensor:
    """dX = dY * (x * pdf(x) + CDF(x)), elementwise on dequantized tiles."""
    if xq.shape != dyq.shape:
        raise ValueError(f"shape mismatch: x {xq.shape}, dY {dyq.shape}")
    nc = xq.rows * xq.cols
    count_elementwise(
        counters, ExecMode.INT8_DATA_FLOW, 2 * nc, nc,
        dequant_elems=2 * nc, quant_elems=nc,
    )
    dx = dyq.dequantize() * gelu_grad_f32(xq.dequantize())
    return quantize_per_block(dx, xq.block)


# ── Dropout ─────────────────────────────────────────────────────────────


@dataclass
class DropoutState:
    """Drop probability, seed, and the materialized keep mask."""

    p: float
    seed: object
    mask: np.ndarray

    @classmethod
    def generate(cls, p, seed, shape: tuple[int, int]) -> "DropoutState":
        """Deterministic keep mask from a counter-based PRNG keyed by seed.

        ``seed`` may be one 64-bit value or a pair (e.g. a base seed plus
        an operator tag) — both key the counter-based generator directly,
        so masks are reproducible regardless of thread count.
        """
        if not 0.0 <= p < 1.0:
            raise ValueError(f"drop probability must be in [0, 1), got {p}")
        u = np.random.Generator(np.random.Philox(key=seed)).random(shape)
        return cls(p, seed, u >= p)

    @property
    def keep_factor(self) -> np.float32:
        return np.float32(1.0 / (1.0 - self.p))


def _apply_dropout(
    tq: BlockQuantTensor, state: DropoutState
) -> BlockQuantTensor:
    if state.mask.shape != tq.shape:
        raise ValueError(
            f"mask shape {state.mask.shape} does not match tensor {tq.shape}"
        )
    # Integer values are only zeroed, never rescaled; the 1/(1-p) factor
    # lives entirely in the (binary16-grid) scales.
    values = np.where(state.mask, tq.values, np.int8(0))
    scales = snap_to_f16(tq.scales * state.keep_factor)
    if not np.isfinite(scales).all():
        raise ValueError("dropout scale correction overflows binary16")
    return BlockQuantTensor(values, scales, tq.block)


def dropout_forward(
    xq: BlockQuantTensor,
    state: DropoutState,
    counters: AccessCounters | None = None,
) -> BlockQuantTensor:
    nc = xq.rows * xq.cols
    count_elementwise(counters, ExecMode.INT8_DATA_FLOW, nc, nc)
    return _apply_dropout(xq, state)


def dropout_backward(
    dyq: BlockQuantTensor,
    state: DropoutState,
    counters: AccessCounters | None = None,
) -> BlockQuantTensor:
    nc = dyq.rows * dyq.cols
    count_elementwise(counters, ExecMode.INT8_DATA_FLOW, nc, nc)
    return _apply_dropout(dyq, state)


# ── Add (with statistics) ───────────────────────────────────────────────


def add_forward(
    x1q: BlockQuantTensor,
    x2q: BlockQuantTensor,
    stats_width: int = 64,
    counters: AccessCounters | None = None,
) -> tuple[BlockQuantTensor, RowStats]:
    """y = x1 + x2 in FP32, requantized; also returns blockwise row stats.

    The statistics describe the full-precision sum (before requantization)
    so a following LayerNorm can reuse them instead of re-reducing.
    """
    if x1q.shape != x2q.shape or x1q.block != x2q.block:
        raise ValueError(
            f"operands differ: {x1q.shape}/b{x1q.block} vs {x2q.shape}/b{x2q.block}"
        )
    nc = x1q.rows * x1q.cols
    count_elementwise(
        counters, ExecMode.INT8_DATA_FLOW, 2 * nc, nc,
        dequant_elems=2 * nc, quant_elems=nc,
    )
    y = x1q.dequantize() + x2q.dequantize()
    return quantize_per_block(y, x1q.block), compute_row_stats(y, stats_width)


# ── LayerNorm ───────────────────────────────────────────────────────────


@dataclass
class NormParams:
    """Affine LayerNorm parameters over the channel axis."""

    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        self.gamma = np.asarray(self.gamma, dtype=np.float32)
        self.beta = np.asarray(self.beta, dtype=np.float32)
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise ValueError("gamma and beta must be equal-length vectors")


@dataclass
class LayerNormContext:
    """Saved inputs for the backward pass: the INT8 input plus per-row
    moments (the normalized activation is recomputed, not stored)."""

    xq: BlockQuantTensor
    mu: np.ndarray
    inv_std: np.ndarray


def layernorm_forward(
    xq: BlockQuantTensor,
    stats: RowStats,
    params: NormParams,
    counters: AccessCounters | None = None,
) -> tuple[BlockQuantTensor, LayerNormContext]:
    """Normalize each row using the Add-provided statistics.

    The row mean/variance come from the full-precision Add output (via
    ``stats``); the normalization itself runs on the dequantized INT8
    input, so the two views differ by at most the round-trip error.
    """
    if stats.mean.shape[0] != xq.rows or stats.cols != xq.cols:
        raise ValueError(
            f"stats for {stats.mean.shape[0]}x{stats.cols} do not match "
            f"tensor {xq.shape}"
        )
    if params.gamma.shape[0] != xq.cols:
        raise ValueError("parameter length does not match channel count")
    nc = xq.rows * xq.cols
    count_elementwise(
        counters, ExecMode.INT8_DATA_FLOW, nc, nc, dequant_elems=nc, quant_elems=nc
    )
    mu = stats.row_mean()
    inv_std = (1.0 / np.sqrt(stats.row_var() + np.float32(params.eps))).astype(
        np.float32
    )
    x = xq.dequantize()
    xhat = (x - mu[:, None]) * inv_std[:, None]
    y = params.gamma * xhat + params.beta
    return quantize_per_block(y, xq.block), LayerNormContext(xq, mu, inv_std)


def layernorm_backward(
    ctx: LayerNormContext,
    dyq: BlockQuantTensor,
    params: NormParams,
    counters: AccessCounters | None = None,
) -> tuple[BlockQuantTensor, np.ndarray, np.ndarray]:
    """Three-term LayerNorm gradient; dX is requantized, dgamma/dbeta stay FP32."""
    if dyq.shape != ctx.xq.shape:
        raise ValueError(f"dY {dyq.shape} does not match saved input {ctx.xq.shape}")
    nc = dyq.rows * dyq.cols
    count_elementwise(
        counters, ExecMode.INT8_DATA_FLOW, 2 * nc, nc,
        dequant_elems=2 * nc, quant_elems=nc,
    )
    dy = dyq.dequantize()
    xhat = (ctx.xq.dequantize() - ctx.mu[:, None]) * ctx.inv_std[:, None]
    dxhat = dy * params.gamma
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = ctx.inv_std[:, None] * (dxhat - m1 - xhat * m2)
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    return quantize_per_block(dx.astype(np.float32), dyq.block), dgamma, dbeta
