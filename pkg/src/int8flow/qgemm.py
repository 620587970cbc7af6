"""Tiled INT8 matrix multiply with in-tile dequantize-accumulate.

All three training matrix products (forward, input gradient, weight
gradient) run on the same core: the inner dimension is walked in chunks of
one quantization block, each chunk's int8 x int8 product is formed exactly,
scaled by the two block scale factors, and accumulated into an FP32 output
tile. The chunk order is fixed (ascending), so results are bit-identical
across tile shapes and thread counts. Every call also tallies an abstract
memory-access/arithmetic cost model for comparing the INT8 data flow
against a quantize-compute-dequantize (QCD) baseline.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .qtensor import INT8_MAX, BlockQuantTensor, quantize_per_block

# Widest inner chunk for which every int8 dot product is exact in float32
# arithmetic: all partial sums are integers below 2**24.
_MAX_EXACT_CHUNK = (1 << 24) // (INT8_MAX * INT8_MAX)  # 1040


class ExecMode(Enum):
    """INT8 data flow, or an emulated quantize-compute-dequantize baseline."""

    INT8_DATA_FLOW = "int8"
    QCD_EMULATION = "qcd"


@dataclass
class AccessCounters:
    """Abstract cost tallies for one or more matrix-multiply calls."""

    int8_load_store: int = 0
    fp16_load_store: int = 0
    int_mac: int = 0
    dequant_ops: int = 0
    quant_ops: int = 0

    def reset(self) -> None:
        self.int8_load_store = 0
        self.fp16_load_store = 0
        self.int_mac = 0
        self.dequant_ops = 0
        self.quant_ops = 0

    def merge(self, other: "AccessCounters") -> None:
        self.int8_load_store += other.int8_load_store
        self.fp16_load_store += other.fp16_load_store
        self.int_mac += other.int_mac
        self.dequant_ops += other.dequant_ops
        self.quant_ops += other.quant_ops

    def as_tuple(self) -> tuple[int, int, int, int, int]:
        return (
            self.int8_load_store,
            self.fp16_load_store,
            self.int_mac,
            self.dequant_ops,
            self.quant_ops,
        )


@dataclass(frozen=True)
class TileConfig:
    """Compute-tile sizes B_N x B_C x B_D on top of quantization block B.

    The inner tile width equals the quantization block (one scale per
    chunk), and the outer tile sizes are multiples of the block so output
    tiles align with the output's scale grid.
    """

    b_n: int = 128
    b_c: int = 32
    b_d: int = 128
    block: int = 32

    def __post_init__(self):
        if self.block <= 0 or self.block % 16:
            raise ValueError(
                f"block size must be a positive multiple of 16, got {self.block}"
            )
        if self.b_c != self.block:
            raise ValueError(
                f"inner tile width {self.b_c} must equal the block size {self.block}"
            )
        for name, v in (("b_n", self.b_n), ("b_d", self.b_d)):
            if v <= 0 or v % self.block:
                raise ValueError(
                    f"{name}={v} must be a positive multiple of block {self.block}"
                )

    @classmethod
    def default_for(cls, block: int = 32) -> "TileConfig":
        """128 x B x 128 tiles (rounded down to a multiple of the block)."""
        outer = block * max(1, 128 // block)
        return cls(outer, block, outer, block)

    def clamped(self, n: int, d: int) -> "TileConfig":
        """Shrink outer tile sizes to the problem dims (kept block-multiples)."""
        return TileConfig(
            min(self.b_n, n), self.b_c, min(self.b_d, d), self.block
        )


@dataclass
class DenseResult:
    """Full-precision matmul output (QCD emulation): values plus one trivial scale."""

    values: np.ndarray
    scale: float = 1.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


# ── cost model ──────────────────────────────────────────────────────────


def _tile_spans(total: int, step: int) -> list[tuple[int, int]]:
    return [(t0, min(t0 + step, total)) for t0 in range(0, total, step)]


def _count_call(
    counters: AccessCounters,
    n: int,
    c: int,
    d: int,
    cfg: TileConfig,
    mode: ExecMode,
    quantize_output: bool,
) -> None:
    """Tally the cost model for one N x C x D matmul.

    INT8 data flow, per output tile: int8 traffic for both operand panels
    and the output, one dequantize per accumulator element per inner chunk,
    one quantize per output element. QCD baseline, per output tile: the
    same traffic in 16-bit, plus a single whole-tensor dequantize pass; its
    transient quant/dequant happen outside the tile loop by construction.
    """
    t_c = c // cfg.b_c
    for n0, n1 in _tile_spans(n, cfg.b_n):
        bn = n1 - n0
        for d0, d1 in _tile_spans(d, cfg.b_d):
            bd = d1 - d0
            counters.int_mac += bn * bd * c
            traffic = (bn + bd) * c + bn * bd
            if mode is ExecMode.INT8_DATA_FLOW:
                counters.int8_load_store += traffic
                counters.dequant_ops += bn * bd * t_c
                if quantize_output:
                    counters.quant_ops += bn * bd
            else:
                counters.fp16_load_store += traffic
    if mode is ExecMode.QCD_EMULATION:
        counters.dequant_ops += n * d


# ── integer compute core ────────────────────────────────────────────────


def micro_mm_16(a: np.ndarray, bt: np.ndarray) -> np.ndarray:
    """Exact 16x16x16 int8 product with 32-bit accumulation.

    This is the unit of integer work the tiled kernels are built from;
    16 * 127**2 is far below 2**31, so int32 accumulation never overflows.
    """
    a = np.asarray(a)
    bt = np.asarray(bt)
    if a.shape != (16, 16) or bt.shape != (16, 16):
        raise ValueError(f"expected 16x16 operands, got {a.shape} and {bt.shape}")
    if a.dtype != np.int8 or bt.dtype != np.int8:
        raise TypeError("micro kernel operates on int8 inputs")
    return a.astype(np.int32) @ bt.astype(np.int32)


def _scaled_accumulate(
    acc: np.ndarray, prod: np.ndarray, s_rows: np.ndarray, s_cols: np.ndarray
) -> None:
    # Fixed elementwise order (prod * s_row) * s_col, then add: determinism
    # requires one canonical sequence of float32 operations.
    np.multiply(prod, s_rows[:, None], out=prod)
    np.multiply(prod, s_cols[None, :], out=prod)
    acc += prod


def _mm_core(
    a_vals: np.ndarray,
    a_scales: np.ndarray,
    b_vals: np.ndarray,
    b_scales: np.ndarray,
    block: int,
    cfg: TileConfig,
    threads: int,
) -> np.ndarray:
    """FP32 accumulator for (a_vals * a_scales) @ (b_vals * b_scales).

    a is N x K with scale grid (N/B, K/B); b is K x M with grid (K/B, M/B).
    The K axis is reduced chunk by chunk in ascending order; each chunk's
    int8 product is computed exactly (via float32 BLAS, which is bit-exact
    for integer inputs of this magnitude) and dequantized into the
    accumulator. With threads > 1 the output is split into independent
    tiles with disjoint writes, which leaves the result bit-identical.
    """
    n, k = a_vals.shape
    m = b_vals.shape[1]
    if block > _MAX_EXACT_CHUNK:
        raise ValueError(
            f"block {block} too wide for exact float32 integer accumulation"
        )
    a32 = a_vals.astype(np.float32)
    b32 = b_vals.astype(np.float32)
    acc = np.zeros((n, m), dtype=np.float32)
    n_chunks = k // block

    if threads <= 1:
        for ci in range(n_chunks):
            c0 = ci * block
            prod = a32[:, c0 : c0 + block] @ b32[c0 : c0 + block, :]
            s_rows = np.repeat(a_scales[:, ci], block)
            s_cols = np.repeat(b_scales[ci, :], block)
            _scaled_accumulate(acc, prod, s_rows, s_cols)
        return acc

    spans = [
        (rows, cols)
        for rows in _tile_spans(n, cfg.b_n)
        for cols in _tile_spans(m, cfg.b_d)
    ]

    def run_tile(span: tuple[tuple[int, int], tuple[int, int]]) -> None:
        (n0, n1), (d0, d1) = span
        tile = np.zeros((n1 - n0, d1 - d0), dtype=np.float32)
        for ci in range(n_chunks):
            c0 = ci * block
            prod = a32[n0:n1, c0 : c0 + block] @ b32[c0 : c0 + block, d0:d1]
            s_rows = np.repeat(a_scales[n0 // block : n1 // block, ci], block)
            s_cols = np.repeat(b_scales[ci, d0 // block : d1 // block], block)
            _scaled_accumulate(tile, prod, s_rows, s_cols)
        acc[n0:n1, d0:d1] = tile

    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(run_tile, spans))
    return acc


# ── public matrix products ──────────────────────────────────────────────


def _resolve_cfg(cfg: TileConfig | None, block: int) -> TileConfig:
    if cfg is None:
        return TileConfig.default_for(block)
    if cfg.block != block:
        raise ValueError(
            f"tile config block {cfg.block} does not match tensor block {block}"
        )
    return cfg


def _finish(
    acc: np.ndarray,
    block: int,
    mode: ExecMode,
    bias: np.ndarray | None,
    quantize: bool,
):
    if bias is not None:
        acc += bias.astype(np.float32)[None, :]
    if mode is ExecMode.QCD_EMULATION:
        return DenseResult(acc)
    if not quantize:
        return acc
    return quantize_per_block(acc, block)


def block_mm_forward(
    xq: BlockQuantTensor,
    wq: BlockQuantTensor,
    cfg: TileConfig | None = None,
    mode: ExecMode = ExecMode.INT8_DATA_FLOW,
    counters: AccessCounters | None = None,
    *,
    bias: np.ndarray | None = None,
    threads: int = 1,
    quantize: bool = True,
):
    """Y = X W^T for X: N x C and W: D x C (one weight row per output).

    Returns a BlockQuantTensor (INT8 data flow), the raw FP32 accumulator
    (``quantize=False``), or a DenseResult (QCD emulation). An optional
    bias of length D is added to the accumulator before requantization.
    """
    if xq.cols != wq.cols:
        raise ValueError(f"inner dims differ: X is {xq.shape}, W is {wq.shape}")
    if xq.block != wq.block:
        raise ValueError(f"mixed block sizes {xq.block} and {wq.block}")
    cfg = _resolve_cfg(cfg, xq.block)
    if counters is not None:
        _count_call(counters, xq.rows, xq.cols, wq.rows, cfg, mode, quantize)
    acc = _mm_core(
        xq.values, xq.scales, wq.values.T, wq.scales.T, xq.block, cfg, threads
    )
    return _finish(acc, xq.block, mode, bias, quantize)


def block_mm_grad_input(
    dyq: BlockQuantTensor,
    wq: BlockQuantTensor,
    cfg: TileConfig | None = None,
    mode: ExecMode = ExecMode.INT8_DATA_FLOW,
    counters: AccessCounters | None = None,
    *,
    threads: int = 1,
    quantize: bool = True,
):
    """dX = dY W for dY: N x D and W: D x C (W consumed untransposed)."""
    if dyq.cols != wq.rows:
        raise ValueError(f"inner dims differ: dY is {dyq.shape}, W is {wq.shape}")
    if dyq.block != wq.block:
        raise ValueError(f"mixed block sizes {dyq.block} and {wq.block}")
    cfg = _resolve_cfg(cfg, dyq.block)
    if counters is not None:
        _count_call(counters, dyq.rows, dyq.cols, wq.cols, cfg, mode, quantize)
    acc = _mm_core(
        dyq.values, dyq.scales, wq.values, wq.scales, dyq.block, cfg, threads
    )
    return _finish(acc, dyq.block, mode, None, quantize)


def block_mm_grad_weight(
    dyq: BlockQuantTensor,
    xq: BlockQuantTensor,
    cfg: TileConfig | None = None,
    mode: ExecMode = ExecMode.INT8_DATA_FLOW,
    counters: AccessCounters | None = None,
    *,
    threads: int = 1,
    quantize: bool = True,
):
    """dW = dY^T X for dY: N x D and X: N x C; output is D x C like W."""
    if dyq.rows != xq.rows:
        raise ValueError(f"batch dims differ: dY is {dyq.shape}, X is {xq.shape}")
    if dyq.block != xq.block:
        raise ValueError(f"mixed block sizes {dyq.block} and {xq.block}")
    cfg = _resolve_cfg(cfg, dyq.block)
    if counters is not None:
        _count_call(counters, dyq.cols, dyq.rows, xq.cols, cfg, mode, quantize)
    acc = _mm_core(
        dyq.values.T, dyq.scales.T, xq.values, xq.scales, dyq.block, cfg, threads
    )
    return _finish(acc, dyq.block, mode, None, quantize)


# ── counter logging (CSV) ───────────────────────────────────────────────

COUNTER_CSV_HEADER = "op_name,N,C,D,B,mode,int8_ls,fp16_ls,int_mac,dequant,quant"


@dataclass
class CounterRecord:
    """One logged call: problem sizes plus its cost tallies."""

    op_name: str
    n: int
    c: int
    d: int
    block: int
    mode: str
    counters: AccessCounters

    def csv_row(self) -> str:
        k = self.counters
        return (
            f"{self.op_name},{self.n},{self.c},{self.d},{self.block},{self.mode},"
            f"{k.int8_load_store},{k.fp16_load_store},{k.int_mac},"
            f"{k.dequant_ops},{k.quant_ops}"
        )


class CounterLog:
    """Ordered collection of per-call counter records, dumped as CSV."""

    def __init__(self) -> None:
        self.records: list[CounterRecord] = []

    def add(
        self,
        op_name: str,
        n: int,
        c: int,
        d: int,
        block: int,
        mode: ExecMode,
        counters: AccessCounters,
    ) -> None:
        self.records.append(
            CounterRecord(op_name, n, c, d, block, mode.value, counters)
        )

    def total(self) -> AccessCounters:
        out = AccessCounters()
        for rec in self.records:
            out.merge(rec.counters)
        return out

    def to_csv(self) -> str:
        lines = [COUNTER_CSV_HEADER]
        lines.extend(rec.csv_row() for rec in self.records)
        return "\n".join(lines) + "\n"
