"""One pre-norm transformer block running entirely on int8 tensors:
forward, backward, activation-memory accounting, and agreement with a
float32 reference that only fakes the quantization."""

import numpy as np

from int8flow import (
    AccessCounters,
    BlockConfig,
    ReferenceBlock,
    TransformerBlock,
    quantize_per_block,
)


def main():
    rng = np.random.default_rng(3)
    config = BlockConfig(c_model=64, heads=4, hidden=256, block=32)
    block = TransformerBlock.initialize(rng, config)
    batch, seq = 4, 32

    x = rng.standard_normal((batch * seq, config.c_model)).astype(np.float32)
    xq = quantize_per_block(x, config.block)
    counters = AccessCounters()
    yq = block.forward(xq, batch, seq, dropout_seed=0, counters=counters)
    print(f"forward {xq.shape} -> {yq.shape}: "
          f"{counters.int_mac} integer MACs, "
          f"{counters.fp16_load_store} fp16 accesses")

    saved = block.saved_activation_bytes()
    fp16 = block.fp16_baseline_bytes()
    print(f"saved for backward: {saved} B int8 vs {fp16} B fp16 "
          f"-> {saved / fp16:.6f} (0.5 + 1/B^2 = {0.5 + 1 / config.block**2})")

    dyq = quantize_per_block(
        rng.standard_normal(yq.shape).astype(np.float32), config.block
    )
    dxq, grads = block.backward(dyq)
    print(f"backward -> dX {dxq.shape} plus gradients for "
          f"{len(grads)} parameter tensors")

    # the float32 twin shares parameters and dropout keys; differences are
    # pure quantization noise
    ref = ReferenceBlock.from_block(block)
    y_ref = ref.forward(x, batch, seq, dropout_seed=0)
    diff = np.abs(yq.dequantize() - y_ref)
    scale = np.abs(y_ref).max()
    print(f"vs float32 reference: max |diff| {diff.max():.4f} "
          f"on outputs up to {scale:.2f} "
          f"({100 * diff.max() / scale:.2f}% of full scale)")


if __name__ == "__main__":
    main()
