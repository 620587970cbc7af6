"""Tests for the fused INT8 non-linear operators."""
from __future__ import annotations

import numpy as np
import pytest

from int8flow.qgemm import AccessCounters, ExecMode
from int8flow.qnonlinear import (
    DropoutState,
    LayerNormContext,
    NormParams,
    RowStats,
    add_forward,
    compute_row_stats,
    count_elementwise,
    dropout_backward,
    dropout_forward,
    gelu_backward,
    gelu_f32,
    gelu_forward,
    gelu_grad_f32,
    layernorm_backward,
    layernorm_f32,
    layernorm_forward,
    layernorm_grad_f32,
    norm_cdf,
)
from int8flow.qtensor import BlockQuantTensor, quantize_per_block, zeros_like

# ── Reference helpers ───────────────────────────────────────────────────


def _quantized(shape, seed, block=32, scale=1.0) -> BlockQuantTensor:
    rng = np.random.default_rng(seed)
    return quantize_per_block(
        (rng.normal(size=shape) * scale).astype(np.float32), block
    )


def _roundtrip_bound(t: BlockQuantTensor) -> np.ndarray:
    b = t.scales / 2 + t.scales * 2.0**-10
    return np.repeat(np.repeat(b, t.block, 0), t.block, 1)


def _fd_grad(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite difference, evaluated in float64 for a quiet oracle."""
    x64 = x.astype(np.float64)
    out = np.empty_like(x64)
    it = np.nditer(x64, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        hi = x64.copy()
        lo = x64.copy()
        hi[idx] += h
        lo[idx] -= h
        out[idx] = (np.asarray(f(hi)).sum() - np.asarray(f(lo)).sum()) / (2 * h)
    return out


# ── Test: GELU ──────────────────────────────────────────────────────────


class TestGelu:
    def test_zero_maps_to_zero(self) -> None:
        assert gelu_f32(np.float32(0.0)) == 0.0
        xq = quantize_per_block(np.zeros((32, 32), np.float32), 32)
        y = gelu_forward(xq)
        assert (y.values == 0).all()

    def test_frozen_value_at_one(self) -> None:
        # 1 * CDF(1) from a high-precision normal-CDF table
        assert abs(float(gelu_f32(np.float32(1.0))) - 0.8413447) < 1e-6

    def test_large_input_is_identity(self) -> None:
        x = np.float32(10.0)
        assert abs(float(gelu_f32(x)) - 10.0) < 1e-6

    def test_quantized_path_matches_f32_core(self) -> None:
        xq = _quantized((64, 64), seed=1, scale=2.0)
        y = gelu_forward(xq)
        expect = quantize_per_block(gelu_f32(xq.dequantize()), 32)
        assert np.array_equal(y.values, expect.values)
        assert np.array_equal(y.scales, expect.scales)

    def test_tile_independence(self) -> None:
        # Computing per 64x64 tile must reproduce the whole-tensor result
        # bit-for-bit (requantization blocks never straddle tiles).
        xq = _quantized((128, 128), seed=2, scale=1.5)
        whole = gelu_forward(xq)
        for r in range(0, 128, 64):
            for c in range(0, 128, 64):
                sub = BlockQuantTensor(
                    xq.values[r : r + 64, c : c + 64],
                    xq.scales[r // 32 : r // 32 + 2, c // 32 : c // 32 + 2],
                    32,
                )
                part = gelu_forward(sub)
                assert np.array_equal(
                    part.values, whole.values[r : r + 64, c : c + 64]
                )

    def test_backward_zero_upstream(self) -> None:
        xq = _quantized((32, 32), seed=3)
        dx = gelu_backward(xq, zeros_like(xq))
        assert (dx.values == 0).all()

    def test_backward_at_zero_is_half(self) -> None:
        assert abs(float(gelu_grad_f32(np.float32(0.0))) - 0.5) < 1e-7

    def test_grad_matches_finite_difference(self) -> None:
        x = np.linspace(-4, 4, 33, dtype=np.float32)
        fd = np.array([_fd_grad(lambda v: gelu_f32(v), np.array([xi]))[0] for xi in x])
        grad = gelu_grad_f32(x)
        assert np.abs(grad - fd).max() < 1e-4

    def test_backward_shape_mismatch_raises(self) -> None:
        with pytest.raises(ValueError):
            gelu_backward(_quantized((32, 32), 1), _quantized((32, 64), 2))

    def test_cdf_endpoints(self) -> None:
        assert abs(float(norm_cdf(np.float32(0.0))) - 0.5) < 1e-7
        assert float(norm_cdf(np.float32(8.0))) == pytest.approx(1.0)


# ── Test: Dropout ───────────────────────────────────────────────────────


class TestDropout:
    def test_p_zero_is_identity(self) -> None:
        xq = _quantized((64, 64), seed=4)
        state = DropoutState.generate(0.0, seed=9, shape=(64, 64))
        y = dropout_forward(xq, state)
        assert np.array_equal(y.values, xq.values)
        assert np.array_equal(y.scales, xq.scales)

    def test_half_drop_exact_doubling(self) -> None:
        xq = _quantized((64, 64), seed=5)
        state = DropoutState.generate(0.5, seed=10, shape=(64, 64))
        y = dropout_forward(xq, state)
        expect = np.where(state.mask, xq.dequantize() * np.float32(2.0), 0.0)
        assert np.array_equal(y.dequantize(), expect)

    def test_integer_values_never_rescaled(self) -> None:
        xq = _quantized((64, 64), seed=6)
        state = DropoutState.generate(0.3, seed=11, shape=(64, 64))
        y = dropout_forward(xq, state)
        assert np.array_equal(
            y.values, np.where(state.mask, xq.values, np.int8(0))
        )

    def test_all_dropped_row_is_zero(self) -> None:
        xq = _quantized((32, 32), seed=7)
        mask = np.ones((32, 32), dtype=bool)
        mask[5] = False
        state = DropoutState(0.5, 0, mask)
        y = dropout_forward(xq, state)
        assert (y.values[5] == 0).all()

    def test_kept_fraction_near_one_minus_p(self) -> None:
        state = DropoutState.generate(0.25, seed=12, shape=(128, 128))
        kept = state.mask.mean()
        assert abs(kept - 0.75) < 0.03

    def test_mask_reproducible_from_seed(self) -> None:
        a = DropoutState.generate(0.4, seed=77, shape=(64, 64))
        b = DropoutState.generate(0.4, seed=77, shape=(64, 64))
        c = DropoutState.generate(0.4, seed=78, shape=(64, 64))
        assert np.array_equal(a.mask, b.mask)
        assert not np.array_equal(a.mask, c.mask)

    def test_backward_uses_same_mask_and_scale(self) -> None:
        dyq = _quantized((64, 64), seed=8)
        state = DropoutState.generate(0.5, seed=13, shape=(64, 64))
        dx1 = dropout_backward(dyq, state)
        dx2 = dropout_backward(dyq, state)
        assert np.array_equal(dx1.values, dx2.values)
        assert np.array_equal(
            dx1.values, np.where(state.mask, dyq.values, np.int8(0))
        )

    def test_invalid_probability_raises(self) -> None:
        with pytest.raises(ValueError):
            DropoutState.generate(1.0, 0, (8, 8))
        with pytest.raises(ValueError):
            DropoutState.generate(-0.1, 0, (8, 8))

    def test_mask_shape_mismatch_raises(self) -> None:
        xq = _quantized((32, 32), seed=9)
        state = DropoutState.generate(0.5, 1, (32, 64))
        with pytest.raises(ValueError, match="mask shape"):
            dropout_forward(xq, state)

    def test_no_quant_dequant_work(self) -> None:
        # The scale trick means dropout moves int8 data without converting.
        counters = AccessCounters()
        xq = _quantized((64, 64), seed=10)
        dropout_forward(xq, DropoutState.generate(0.5, 2, (64, 64)), counters)
        assert counters.dequant_ops == 0
        assert counters.quant_ops == 0
        assert counters.int8_load_store == 2 * 64 * 64


# ── Test: Add with statistics ───────────────────────────────────────────


class TestAdd:
    def test_add_zero_is_requantized_passthrough(self) -> None:
        x1 = _quantized((64, 128), seed=11)
        y, stats = add_forward(x1, zeros_like(x1))
        expect = quantize_per_block(x1.dequantize(), 32)
        assert np.array_equal(y.values, expect.values)
        ref = compute_row_stats(x1.dequantize(), 64)
        assert np.array_equal(stats.mean, ref.mean)
        assert np.array_equal(stats.sumsq, ref.sumsq)

    def test_doubling_within_roundtrip_bound(self) -> None:
        x1 = _quantized((64, 64), seed=12)
        y, _ = add_forward(x1, x1)
        err = np.abs(y.dequantize() - 2.0 * x1.dequantize())
        assert (err <= _roundtrip_bound(y)).all()

    def test_stats_reconstruct_row_moments(self) -> None:
        x1 = _quantized((64, 256), seed=13)
        x2 = _quantized((64, 256), seed=14)
        _, stats = add_forward(x1, x2, stats_width=64)
        y32 = x1.dequantize() + x2.dequantize()
        np.testing.assert_allclose(
            stats.row_mean(), y32.mean(axis=1), rtol=1e-5, atol=1e-6
        )
        np.testing.assert_allclose(
            stats.row_var(), y32.var(axis=1), rtol=1e-5, atol=1e-6
        )

    @pytest.mark.parametrize("width", [32, 64, 128, 256])
    def test_stats_width_invariance(self, width: int) -> None:
        x1 = _quantized((32, 256), seed=15)
        x2 = _quantized((32, 256), seed=16)
        _, stats = add_forward(x1, x2, stats_width=width)
        y32 = x1.dequantize() + x2.dequantize()
        np.testing.assert_allclose(
            stats.row_mean(), y32.mean(axis=1), rtol=1e-5, atol=1e-6
        )
        np.testing.assert_allclose(
            stats.row_var(), y32.var(axis=1), rtol=1e-5, atol=1e-6
        )

    def test_stats_cauchy_schwarz(self) -> None:
        _, stats = add_forward(
            _quantized((32, 128), 17), _quantized((32, 128), 18)
        )
        lhs = stats.sumsq
        rhs = stats.mean**2 * stats.width
        assert (lhs >= rhs - 1e-4).all()

    def test_shape_mismatch_raises(self) -> None:
        with pytest.raises(ValueError):
            add_forward(_quantized((32, 64), 1), _quantized((32, 128), 2))

    def test_bad_stats_width_raises(self) -> None:
        with pytest.raises(ValueError, match="width"):
            add_forward(
                _quantized((32, 96), 1), _quantized((32, 96), 2), stats_width=64
            )


# ── Test: LayerNorm ─────────────────────────────────────────────────────


def _ln_inputs(shape=(64, 256), seed=20, gamma=None, beta=None):
    rng = np.random.default_rng(seed)
    x32 = rng.normal(size=shape).astype(np.float32)
    xq = quantize_per_block(x32, 32)
    stats = compute_row_stats(x32, 64)
    c = shape[1]
    params = NormParams(
        np.ones(c, np.float32) if gamma is None else gamma,
        np.zeros(c, np.float32) if beta is None else beta,
    )
    return x32, xq, stats, params


class TestLayerNorm:
    def test_constant_row_gives_beta(self) -> None:
        # Row value 127 * 2**-7 quantizes exactly, so both the statistics
        # and the dequantized input see the same constant and the
        # pre-quantization output is exactly beta.
        c = 64
        x32 = np.full((32, c), 127 * 2.0**-7, dtype=np.float32)
        xq = quantize_per_block(x32, 32)
        stats = compute_row_stats(x32, 64)
        beta = np.linspace(-0.5, 0.5, c, dtype=np.float32)
        params = NormParams(np.ones(c, np.float32), beta)
        yq, _ = layernorm_forward(xq, stats, params)
        expect = quantize_per_block(np.tile(beta, (32, 1)), 32)
        assert np.array_equal(yq.values, expect.values)

    def test_normalizes_rows(self) -> None:
        # Self-consistent statistics (taken from the values the op will
        # dequantize): every output row is standardized.
        _, xq, _, params = _ln_inputs()
        stats = compute_row_stats(xq.dequantize(), 64)
        _, ctx = layernorm_forward(xq, stats, params)
        y_pre = (xq.dequantize() - ctx.mu[:, None]) * ctx.inv_std[:, None]
        assert np.abs(y_pre.mean(axis=1)).max() < 1e-3
        assert np.abs(y_pre.var(axis=1) - 1.0).max() < 1e-3

    def test_stats_path_close_to_direct_path(self) -> None:
        # Statistics were taken pre-quantization; the direct path computes
        # them post-quantization. Both must agree within twice the
        # round-trip bound of the input.
        x32, xq, stats, params = _ln_inputs(seed=21)
        _, ctx = layernorm_forward(xq, stats, params)
        y_stats = (xq.dequantize() - ctx.mu[:, None]) * ctx.inv_std[:, None]
        y_direct = layernorm_f32(
            xq.dequantize(), params.gamma, params.beta, params.eps
        )
        assert (np.abs(y_stats - y_direct) <= 2 * _roundtrip_bound(xq)).all()

    def test_mismatched_stats_raise(self) -> None:
        _, xq, _, params = _ln_inputs()
        bad = compute_row_stats(np.zeros((64, 128), np.float32), 64)
        with pytest.raises(ValueError, match="stats"):
            layernorm_forward(xq, bad, params)

    def test_param_length_mismatch_raises(self) -> None:
        _, xq, stats, _ = _ln_inputs()
        with pytest.raises(ValueError, match="length"):
            layernorm_forward(
                xq, stats, NormParams(np.ones(16, np.float32), np.zeros(16, np.float32))
            )

    def test_eps_must_be_positive(self) -> None:
        with pytest.raises(ValueError, match="eps"):
            NormParams(np.ones(4), np.zeros(4), eps=0.0)

    def test_backward_zero_upstream(self) -> None:
        _, xq, stats, params = _ln_inputs()
        _, ctx = layernorm_forward(xq, stats, params)
        dx, dgamma, dbeta = layernorm_backward(ctx, zeros_like(xq), params)
        assert (dx.values == 0).all()
        assert (dgamma == 0).all()
        assert (dbeta == 0).all()

    def test_grad_matches_finite_difference(self) -> None:
        rng = np.random.default_rng(22)
        x = rng.normal(size=(4, 8)).astype(np.float32)
        dy = rng.normal(size=(4, 8)).astype(np.float32)
        gamma = rng.normal(size=8).astype(np.float32)
        beta = rng.normal(size=8).astype(np.float32)
        eps = 1e-5

        def loss(x64):
            y = layernorm_f32(x64, gamma.astype(np.float64), beta, eps)
            return float((dy.astype(np.float64) * y).sum())

        fd = _fd_grad(loss, x)
        dx, _, _ = layernorm_grad_f32(x, dy, gamma, eps)
        assert np.abs(dx - fd).max() < 1e-4

    def test_param_grads_match_finite_difference(self) -> None:
        rng = np.random.default_rng(23)
        x = rng.normal(size=(4, 8)).astype(np.float32)
        dy = rng.normal(size=(4, 8)).astype(np.float32)
        gamma = rng.normal(size=8).astype(np.float32)
        beta = np.zeros(8, np.float32)
        eps = 1e-5
        _, dgamma, dbeta = layernorm_grad_f32(x, dy, gamma, eps)

        def loss_gamma(g64):
            y = layernorm_f32(x.astype(np.float64), g64, beta, eps)
            return float((dy * y).sum())

        fd_g = _fd_grad(loss_gamma, gamma)
        assert np.abs(dgamma - fd_g).max() < 1e-4
        # beta enters additively, so its gradient is the upstream row sum
        np.testing.assert_allclose(dbeta, dy.sum(axis=0), rtol=1e-6)

    def test_gamma_scaling_doubles_dx(self) -> None:
        rng = np.random.default_rng(24)
        x = rng.normal(size=(8, 16)).astype(np.float32)
        dy = rng.normal(size=(8, 16)).astype(np.float32)
        gamma = rng.normal(size=16).astype(np.float32)
        dx1, _, _ = layernorm_grad_f32(x, dy, gamma, 1e-5)
        dx2, _, _ = layernorm_grad_f32(x, dy, 2 * gamma, 1e-5)
        assert np.array_equal(dx2, 2 * dx1)

    def test_quantized_backward_matches_f32_core(self) -> None:
        # With the forward statistics self-consistent (taken from the same
        # values the op dequantizes), the quantized backward must equal
        # the f32 core applied to dequantized tensors, requantized.
        x32, xq, _, params = _ln_inputs(seed=25)
        stats = compute_row_stats(xq.dequantize(), 64)
        _, ctx = layernorm_forward(xq, stats, params)
        dyq = _quantized((64, 256), seed=26)
        dx, dgamma, dbeta = layernorm_backward(ctx, dyq, params)
        ref_dx, ref_dg, ref_db = layernorm_grad_f32(
            xq.dequantize(), dyq.dequantize(), params.gamma, params.eps
        )
        np.testing.assert_allclose(
            dx.dequantize(), ref_dx, atol=2 * float(dx.scales.max())
        )
        np.testing.assert_allclose(dgamma, ref_dg, rtol=1e-4, atol=1e-4)
        np.testing.assert_allclose(dbeta, ref_db, rtol=1e-4, atol=1e-4)

    def test_backward_shape_mismatch_raises(self) -> None:
        _, xq, stats, params = _ln_inputs()
        _, ctx = layernorm_forward(xq, stats, params)
        with pytest.raises(ValueError):
            layernorm_backward(ctx, _quantized((64, 128), 1), params)


# ── Test: traffic model ─────────────────────────────────────────────────


class TestTrafficModel:
    def test_int8_bytes_are_half_of_fp16_bytes(self) -> None:
        # Same element movement, one byte vs two bytes per element.
        n = c = 64
        k8 = AccessCounters()
        gelu_forward(_quantized((n, c), 30), k8)
        k16 = AccessCounters()
        count_elementwise(k16, ExecMode.QCD_EMULATION, n * c, n * c)
        assert k8.int8_load_store == k16.fp16_load_store
        assert k8.int8_load_store * 1 * 2 == k16.fp16_load_store * 2

    def test_elementwise_counts(self) -> None:
        n = c = 64
        nc = n * c
        cases = {
            "gelu_fwd": (lambda k: gelu_forward(_quantized((n, c), 31), k), 2 * nc, nc, nc),
            "add_fwd": (
                lambda k: add_forward(
                    _quantized((n, c), 32), _quantized((n, c), 33), counters=k
                ),
                3 * nc, 2 * nc, nc,
            ),
        }
        for name, (call, ls, deq, q) in cases.items():
            k = AccessCounters()
            call(k)
            assert k.int8_load_store == ls, name
            assert k.dequant_ops == deq, name
            assert k.quant_ops == q, name

    def test_layernorm_counts(self) -> None:
        _, xq, stats, params = _ln_inputs(shape=(64, 256), seed=34)
        k = AccessCounters()
        _, ctx = layernorm_forward(xq, stats, params, k)
        nc = 64 * 256
        assert k.int8_load_store == 2 * nc
        k2 = AccessCounters()
        layernorm_backward(ctx, _quantized((64, 256), 35), params, k2)
        assert k2.int8_load_store == 3 * nc
