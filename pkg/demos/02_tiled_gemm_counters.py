"""Tiled integer matrix multiply: same bits out regardless of tiling or
thread count, and a memory-traffic ledger comparing the int8 data flow
against a 16-bit quantize-compute-dequantize baseline."""

import numpy as np

from int8flow import (
    AccessCounters,
    CounterLog,
    ExecMode,
    TileConfig,
    block_mm_forward,
    quantize_per_block,
)


def main():
    rng = np.random.default_rng(1)
    n, c, d = 256, 128, 256
    xq = quantize_per_block(rng.standard_normal((n, c)).astype(np.float32), 32)
    wq = quantize_per_block(rng.standard_normal((d, c)).astype(np.float32), 32)

    baseline = block_mm_forward(xq, wq, TileConfig(128, 32, 128))
    print(f"Y = X W^T with X {xq.shape}, W {wq.shape} -> {baseline.shape}")
    for tile in (TileConfig(64, 32, 64), TileConfig(32, 32, 32)):
        for threads in (1, 4):
            y = block_mm_forward(xq, wq, tile, threads=threads)
            same = np.array_equal(y.values, baseline.values) and np.array_equal(
                y.scales, baseline.scales
            )
            print(f"  tile {tile.b_n}x{tile.b_c}x{tile.b_d}, {threads} "
                  f"thread(s): bit-identical = {same}")

    log = CounterLog()
    for mode in (ExecMode.INT8_DATA_FLOW, ExecMode.QCD_EMULATION):
        counters = AccessCounters()
        block_mm_forward(xq, wq, TileConfig(128, 32, 128), mode, counters)
        log.add("forward_mm", n, c, d, 32, mode, counters)

    print("\nper-call access counts:")
    print(log.to_csv())
    int8_row, qcd_row = log.records
    int8_bytes = int8_row.counters.int8_load_store
    fp16_bytes = 2 * qcd_row.counters.fp16_load_store
    print(f"operand traffic: {int8_bytes} B (int8 flow) vs "
          f"{fp16_bytes} B (16-bit flow) -> {int8_bytes / fp16_bytes:.3f}x")
    print("both modes run the same integer MACs; the int8 flow halves the "
          "operand bytes and its scale arithmetic stays inside the kernel, "
          "while the baseline materializes a float16 tensor between "
          "operators.")


if __name__ == "__main__":
    main()
