"""Block-quantized INT8 tensor format, quantizer variants, and error metrics.

The central data type is :class:`BlockQuantTensor`: an N x C matrix of signed
8-bit values plus one scale factor per B x B block. Scales are kept on the
binary16 grid (stored exactly representable as float16) so that a
software-emulated run matches what an FP16 scale matrix on hardware would
hold; arithmetic on scales afterwards happens in float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

INT8_MAX = 127  # symmetric range [-127, 127]; -128 is never produced

# Full-precision matrices are plain float32 ndarrays throughout the library.
DenseTensor = np.ndarray

_MAGIC = b"JQT1"


def snap_to_f16(x):
    """Round value(s) to the nearest binary16-representable number, kept as float32."""
    return np.asarray(x, dtype=np.float16).astype(np.float32)


class SchemeKind(Enum):
    PER_TENSOR = "per-tensor"
    PER_TOKEN = "per-token"
    PER_CHANNEL = "per-channel"
    PER_BLOCK = "per-block"


@dataclass(frozen=True)
class QuantScheme:
    """Quantization granularity: one scale per tensor, row, column, or B x B block."""

    kind: SchemeKind
    block: int | None = None

    def __post_init__(self):
        if self.kind is SchemeKind.PER_BLOCK:
            if self.block is None or self.block <= 0:
                raise ValueError("per-block scheme requires a positive block size")
        elif self.block is not None:
            raise ValueError(f"{self.kind.value} scheme takes no block size")

    @classmethod
    def per_block(cls, block: int) -> "QuantScheme":
        return cls(SchemeKind.PER_BLOCK, block)

    @classmethod
    def from_name(cls, name: str, block: int | None = None) -> "QuantScheme":
        kind = SchemeKind(name)
        if kind is SchemeKind.PER_BLOCK:
            return cls(kind, 32 if block is None else block)
        return cls(kind)

    @property
    def name(self) -> str:
        return self.kind.value


PER_TENSOR = QuantScheme(SchemeKind.PER_TENSOR)
PER_TOKEN = QuantScheme(SchemeKind.PER_TOKEN)
PER_CHANNEL = QuantScheme(SchemeKind.PER_CHANNEL)


@dataclass
class BlockQuantTensor:
    """INT8 value matrix with one binary16-grid scale per B x B block.

    ``values`` is N x C int8 in [-127, 127]; ``scales`` is (N/B) x (C/B)
    float32, every entry exactly representable in binary16. Arrays are
    frozen after construction; all operations build new tensors.
    """

    values: np.ndarray
    scales: np.ndarray
    block: int

    def __post_init__(self):
        if self.values.dtype != np.int8:
            raise TypeError(f"values must be int8, got {self.values.dtype}")
        if self.scales.dtype != np.float32:
            raise TypeError(f"scales must be float32, got {self.scales.dtype}")
        n, c = self.values.shape
        if n % self.block or c % self.block:
            raise ValueError(
                f"shape {n}x{c} is not a multiple of block size {self.block}"
            )
        if self.scales.shape != (n // self.block, c // self.block):
            raise ValueError(
                f"scale grid {self.scales.shape} does not match "
                f"{n}x{c} blocked by {self.block}"
            )
        self.values = np.ascontiguousarray(self.values)
        self.scales = np.ascontiguousarray(self.scales)
        self.values.flags.writeable = False
        self.scales.flags.writeable = False

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def block_rows(self) -> int:
        return self.scales.shape[0]

    @property
    def block_cols(self) -> int:
        return self.scales.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def dequantize(self) -> np.ndarray:
        """Map each stored value back to float32 via its block scale."""
        return dequantize(self)

    def transposed(self) -> "BlockQuantTensor":
        """View of the transposed matrix; blocks are square so scales transpose too."""
        return BlockQuantTensor(
            np.ascontiguousarray(self.values.T),
            np.ascontiguousarray(self.scales.T),
            self.block,
        )

    def validate(self) -> None:
        """Check every format invariant; raises AssertionError on violation."""
        assert self.values.min(initial=0) >= -INT8_MAX, "value below -127"
        assert self.values.max(initial=0) <= INT8_MAX, "value above 127"
        assert np.isfinite(self.scales).all(), "non-finite scale"
        assert (self.scales >= 0).all(), "negative scale"
        assert np.array_equal(self.scales, snap_to_f16(self.scales)), (
            "scale off the binary16 grid"
        )
        b = self.block
        blocked = self.values.reshape(self.block_rows, b, self.block_cols, b)
        nonzero = np.abs(blocked).max(axis=(1, 3)) > 0
        assert not (nonzero & (self.scales == 0)).any(), "zero scale on nonzero block"

    # -- binary serialization ("JQT1" fixture format) --------------------

    def to_bytes(self) -> bytes:
        """Little-endian: magic "JQT1", u32 rows/cols/block, int8 values, u16 binary16 scales."""
        header = _MAGIC + struct.pack("<III", self.rows, self.cols, self.block)
        scale_bits = self.scales.astype(np.float16).view(np.uint16).astype("<u2")
        return header + self.values.tobytes() + scale_bits.tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "BlockQuantTensor":
        if raw[:4] != _MAGIC:
            raise ValueError(f"bad magic {raw[:4]!r}, expected {_MAGIC!r}")
        rows, cols, block = struct.unpack_from("<III", raw, 4)
        off = 16
        values = np.frombuffer(raw, np.int8, rows * cols, off).reshape(rows, cols)
        off += rows * cols
        nb = (rows // block) * (cols // block)
        bits = np.frombuffer(raw, "<u2", nb, off)
        scales = bits.view(np.float16).astype(np.float32)
        scales = scales.reshape(rows // block, cols // block)
        return cls(values.copy(), scales, block)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "BlockQuantTensor":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _check_dense(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("input contains non-finite values")
    return np.ascontiguousarray(x, dtype=np.float32)


# Smallest positive binary16 value (subnormal); floor for nonzero-group scales
# so a zero scale can only ever belong to an all-zero group.
_F16_TINY = np.float32(2.0**-24)


def _group_scales(absmax: np.ndarray) -> np.ndarray:
    """Max-based symmetric scales on the binary16 grid; all-zero groups get scale 1."""
    with np.errstate(over="ignore"):
        fast = snap_to_f16(absmax.astype(np.float32) / INT8_MAX)
    if fast.all() and np.isfinite(fast).all():
        # no zero groups, no binary16 under/overflow: nothing to repair
        return fast
    s = absmax.astype(np.float32) / INT8_MAX
    s = np.where(absmax == 0, np.float32(1.0), s)
    with np.errstate(over="ignore"):
        s = snap_to_f16(s)
    if not np.isfinite(s).all():
        raise ValueError("scale overflows the binary16 range; input magnitude too large")
    return np.where((absmax > 0) & (s == 0), _F16_TINY, s)


def _round_clamp(x: np.ndarray) -> np.ndarray:
    # np.rint rounds halves to even, matching the round operator used throughout
    return np.clip(np.rint(x), -INT8_MAX, INT8_MAX).astype(np.int8)


def quantize_per_block(x: np.ndarray, block: int) -> BlockQuantTensor:
    """Quantize a float matrix to INT8 with one max-based scale per B x B block.

    Scales are snapped to the binary16 grid before values are computed, so the
    stored values are consistent with the stored scales. Rounds half to even
    and clamps to [-127, 127]; an all-zero block gets scale 1 so dequantize is
    exact and no division by zero can occur.
    """
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {x.shape}")
    x = np.ascontiguousarray(x, dtype=np.float32)
    n, c = x.shape
    if block <= 0:
        raise ValueError(f"block size must be positive, got {block}")
    if n % block or c % block:
        raise ValueError(f"shape {n}x{c} is not a multiple of block size {block}")
    ln, lc = n // block, c // block
    blocked = x.reshape(ln, block, lc, block)
    # abs-max propagates NaN/inf, so finiteness only needs the small grid
    absmax = np.abs(blocked).max(axis=(1, 3))
    if not np.isfinite(absmax).all():
        raise ValueError("input contains non-finite values")
    scales = _group_scales(absmax)
    q = blocked / scales[:, None, :, None]
    np.rint(q, out=q)
    np.clip(q, -INT8_MAX, INT8_MAX, out=q)
    return BlockQuantTensor(q.reshape(n, c).astype(np.int8), scales, block)


def dequantize(xq: BlockQuantTensor) -> np.ndarray:
    """Inverse map: value times its block scale, in float32."""
    b = xq.block
    out = xq.values.astype(np.float32)
    blocked = out.reshape(xq.block_rows, b, xq.block_cols, b)
    np.multiply(blocked, xq.scales[:, None, :, None], out=blocked)
    return out


def zeros_like(xq: BlockQuantTensor) -> BlockQuantTensor:
    """All-zero tensor of the same layout (scales 1 per the zero-block rule)."""
    return BlockQuantTensor(
        np.zeros_like(xq.values),
        np.ones_like(xq.scales),
        xq.block,
    )


def quantize_with_scheme(
    x: np.ndarray, scheme: QuantScheme
) -> tuple[np.ndarray, np.ndarray]:
    """Quantize under any scale granularity; returns (int8 values, scale layout).

    Scale layouts: per-tensor (1, 1); per-token (N, 1); per-channel (1, C);
    per-block (N/B, C/B). Rounding and clamping rules match
    :func:`quantize_per_block`.
    """
    x = _check_dense(x)
    kind = scheme.kind
    if kind is SchemeKind.PER_BLOCK:
        t = quantize_per_block(x, scheme.block)
        return t.values, t.scales
    if kind is SchemeKind.PER_TENSOR:
        absmax = np.abs(x).max(initial=0.0, keepdims=False)
        scales = _group_scales(np.asarray(absmax).reshape(1, 1))
    elif kind is SchemeKind.PER_TOKEN:
        scales = _group_scales(np.abs(x).max(axis=1, keepdims=True))
    elif kind is SchemeKind.PER_CHANNEL:
        scales = _group_scales(np.abs(x).max(axis=0, keepdims=True))
    else:  # pragma: no cover
        raise ValueError(f"unknown scheme {scheme}")
    return _round_clamp(x / scales), scales


def dequantize_with_scheme(
    values: np.ndarray, scales: np.ndarray, scheme: QuantScheme
) -> np.ndarray:
    """Inverse of :func:`quantize_with_scheme` for any scale layout."""
    if scheme.kind is SchemeKind.PER_BLOCK:
        return dequantize(
            BlockQuantTensor(values.astype(np.int8), scales, scheme.block)
        )
    return values.astype(np.float32) * scales


def quantization_error(x: np.ndarray, scheme: QuantScheme) -> tuple[float, float]:
    """Round-trip error of a scheme on ``x``: (mean squared error, mean |error|)."""
    x = _check_dense(x)
    values, scales = quantize_with_scheme(x, scheme)
    recon = dequantize_with_scheme(values, scales, scheme)
    err = x - recon
    return float(np.mean(err * err)), float(np.mean(np.abs(err)))
