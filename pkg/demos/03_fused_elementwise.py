"""The non-matmul operators also speak int8-plus-scales: GELU, dropout,
residual Add, and a LayerNorm that reuses the Add's row statistics."""

import numpy as np

from int8flow import (
    AccessCounters,
    DropoutState,
    NormParams,
    add_forward,
    dropout_forward,
    gelu_forward,
    layernorm_forward,
    quantize_per_block,
)


def main():
    rng = np.random.default_rng(2)
    n, c = 128, 64
    x1 = rng.standard_normal((n, c)).astype(np.float32)
    x2 = rng.standard_normal((n, c)).astype(np.float32)
    x1q = quantize_per_block(x1, 32)
    x2q = quantize_per_block(x2, 32)

    counters = AccessCounters()
    summed, stats = add_forward(x1q, x2q, stats_width=c, counters=counters)
    print(f"add: {summed.shape} int8 out, row stats {stats.mean.shape} "
          f"(width {stats.width})")
    y = x1q.dequantize() + x2q.dequantize()
    print(f"  stats row_var vs the sum they describe: "
          f"{np.abs(stats.row_var() - y.var(axis=1)).max():.2e}")

    params = NormParams(
        np.ones(c, np.float32), np.zeros(c, np.float32), 1e-5
    )
    normed, _ = layernorm_forward(summed, stats, params, counters)
    rows = normed.dequantize()
    print(f"layernorm (reusing add stats): per-row mean "
          f"{np.abs(rows.mean(axis=1)).max():.2e}, "
          f"std {rows.std(axis=1).mean():.4f}")

    acted = gelu_forward(normed, counters)
    print(f"gelu: output range [{acted.dequantize().min():.3f}, "
          f"{acted.dequantize().max():.3f}]")

    state = DropoutState.generate(0.1, (42, 7), acted.shape)
    dropped = dropout_forward(acted, state, counters)
    kept = np.count_nonzero(dropped.values) / np.count_nonzero(acted.values)
    print(f"dropout p=0.1 keyed by (seed, tag): kept {kept:.3f} of values")
    again = dropout_forward(acted, DropoutState.generate(0.1, (42, 7), acted.shape))
    print(f"  same key, same mask: {np.array_equal(dropped.values, again.values)}")

    print("\ncounters over the whole chain:")
    print(f"  int8 loads/stores  {counters.int8_load_store}")
    print(f"  fp16 loads/stores  {counters.fp16_load_store}")
    print(f"  dequant / quant    {counters.dequant_ops} / {counters.quant_ops}")


if __name__ == "__main__":
    main()
