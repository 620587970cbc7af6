"""Train the same tiny transformer under different numeric schemes and
compare the loss curves: int8 block quantization tracks float32 closely,
and outlier channels are where coarser scale granularities fall behind.

Takes a minute or two; pass --quick for a shorter run.
"""

import sys

from int8flow import CopySequence, TrainConfig, compare_runs, run_training


def main():
    quick = "--quick" in sys.argv[1:]
    steps = 200 if quick else 600
    task = CopySequence(vocab=64, length=32)
    base = dict(steps=steps, lr=3e-4, batch_size=4, eval_every=steps // 4,
                eval_batches=2, weight_decay=0.1, seed=0)

    runs = {}
    for scheme in ("fp32", "per-block"):
        cfg = TrainConfig(scheme=scheme, **base)
        records = run_training(cfg, task)
        runs[scheme] = records
        losses = " ".join(f"{r.val_loss:.4f}" for r in records)
        print(f"{scheme:10s} val loss: {losses}")

    print("\nwith three in every hundred channels carrying x300 values:")
    outlier_runs = {}
    for scheme in ("per-block", "per-tensor"):
        cfg = TrainConfig(scheme=scheme, outlier_gain=300.0,
                          outlier_fraction=0.03, **base)
        records = run_training(cfg, task)
        outlier_runs[scheme] = records
        losses = " ".join(f"{r.val_loss:.4f}" for r in records)
        print(f"{scheme:10s} val loss: {losses}")

    print("\nclean-input comparison (gap is relative to the first row):")
    print(compare_runs(runs))
    print("outlier-channel comparison:")
    print(compare_runs(outlier_runs))


if __name__ == "__main__":
    main()
