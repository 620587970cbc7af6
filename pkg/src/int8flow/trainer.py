"""Toy-scale training harness.

Trains a small pre-norm transformer on synthetic tasks under one of four
numeric regimes — "per-block" runs the INT8 data-flow stack, "fp32" the
plain float32 reference, and "per-token"/"per-tensor" quantize-compute-
dequantize ablations that round-trip every matmul operand through the
named scheme. All schemes share initialization, data order, and dropout
masks for a given seed, so loss curves are directly comparable. Everything
is keyed by counter-based PRNG streams: the same config and seed replays
bit-identically at any thread count.
"""

from __future__ import annotations

import hashlib
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .qgemm import AccessCounters
from .qlayers import BlockConfig, ReferenceBlock, TransformerBlock
from .qtensor import QuantScheme, quantize_per_block

TRAIN_SCHEMES = ("per-block", "per-token", "per-tensor", "per-channel", "fp32")

TRAIN_CSV_HEADER = "step,train_loss,val_loss,grad_norm,scheme,diverged"

# stream tags keeping initialization, data, dropout, and outlier-channel
# draws on disjoint counter-based PRNG streams
_TAG_INIT = 0x496E6974
_TAG_DATA = 0x44617461
_TAG_VAL = 0x56616C64
_TAG_DROP = 0x44726F70
_TAG_OUTLIER = 0x4F75746C


def derive_seed(*parts: int) -> int:
    """Fold integers into one 64-bit stream key, stable across platforms."""
    blob = struct.pack(f"<{len(parts)}Q", *((p & (2**64 - 1)) for p in parts))
    return int.from_bytes(hashlib.blake2s(blob, digest_size=8).digest(), "little")


def _stream(*parts: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=derive_seed(*parts)))


# ── toy tasks ───────────────────────────────────────────────────────────


@dataclass(frozen=True)
class CopySequence:
    """Predict each input token at its own position (identity map)."""

    vocab: int = 16
    length: int = 32


@dataclass(frozen=True)
class CharLM:
    """Next-character prediction over a byte corpus."""

    corpus: str | Path
    context: int = 32


ToyTask = CopySequence | CharLM


def _pad_length(length: int, batch_size: int, block: int) -> int:
    """Smallest padded length so batch_size * length is a block multiple."""
    padded = length
    while (batch_size * padded) % block:
        padded += 1
    return padded


class _CopySampler:
    def __init__(self, task: CopySequence) -> None:
        if task.vocab < 2 or task.length < 1:
            raise ValueError("copy task needs vocab >= 2 and length >= 1")
        self.vocab = task.vocab
        self.length = task.length

    def batch(self, seed: int, step: int, batch_size: int, block: int, val: bool):
        tag = _TAG_VAL if val else _TAG_DATA
        rng = _stream(seed, tag, step)
        padded = _pad_length(self.length, batch_size, block)
        x = np.zeros((batch_size, padded), dtype=np.int64)
        tokens = rng.integers(0, self.vocab, size=(batch_size, self.length))
        x[:, : self.length] = tokens
        mask = np.zeros((batch_size, padded), dtype=bool)
        mask[:, : self.length] = True
        return x, x.copy(), mask


class _CharSampler:
    def __init__(self, task: CharLM) -> None:
        path = Path(task.corpus)
        if not path.exists():
            raise FileNotFoundError(f"corpus not found: {path}")
        raw = path.read_bytes()
        charset = sorted(set(raw))
        if len(charset) < 2:
            raise ValueError("corpus must contain at least two distinct bytes")
        lut = np.zeros(256, dtype=np.int64)
        for i, ch in enumerate(charset):
            lut[ch] = i
        self.ids = lut[np.frombuffer(raw, dtype=np.uint8)]
        self.vocab = len(charset)
        self.context = task.context
        cut = int(len(self.ids) * 0.9)
        if cut < task.context + 2 or len(self.ids) - cut < task.context + 2:
            raise ValueError("corpus too short for the requested context length")
        self._regions = {False: (0, cut), True: (cut, len(self.ids))}

    def batch(self, seed: int, step: int, batch_size: int, block: int, val: bool):
        tag = _TAG_VAL if val else _TAG_DATA
        rng = _stream(seed, tag, step)
        lo, hi = self._regions[val]
        starts = rng.integers(lo, hi - self.context - 1, size=batch_size)
        padded = _pad_length(self.context, batch_size, block)
        x = np.zeros((batch_size, padded), dtype=np.int64)
        y = np.zeros((batch_size, padded), dtype=np.int64)
        mask = np.zeros((batch_size, padded), dtype=bool)
        for row, s in enumerate(starts):
            x[row, : self.context] = self.ids[s : s + self.context]
            y[row, : self.context] = self.ids[s + 1 : s + 1 + self.context]
        mask[:, : self.context] = True
        return x, y, mask


def make_sampler(task: ToyTask):
    if isinstance(task, CopySequence):
        return _CopySampler(task)
    if isinstance(task, CharLM):
        return _CharSampler(task)
    raise TypeError(f"unknown task type: {type(task).__name__}")


def generate_task_data(
    task: ToyTask,
    seed: int,
    *,
    batch_size: int = 8,
    count: int = 1,
    block: int = 32,
    val: bool = False,
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Materialize the first ``count`` (input, target, mask) batches."""
    sampler = make_sampler(task)
    return [
        sampler.batch(seed, step, batch_size, block, val) for step in range(count)
    ]


# ── configuration and records ───────────────────────────────────────────


@dataclass(frozen=True)
class TrainConfig:
    layers: int = 2
    c_model: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    steps: int = 2000
    lr: float = 1.5e-4
    weight_decay: float = 0.1
    block: int = 32
    scheme: str = "per-block"
    seed: int = 0
    batch_size: int = 8
    eval_every: int = 100
    eval_batches: int = 4
    dropout_p: float = 0.0
    outlier_gain: float = 0.0
    outlier_fraction: float = 0.01
    threads: int = 1

    def __post_init__(self):
        if self.scheme not in TRAIN_SCHEMES:
            raise ValueError(
                f"unknown scheme {self.scheme!r}; expected one of {TRAIN_SCHEMES}"
            )
        if self.c_model % self.block or self.c_model % self.heads:
            raise ValueError("c_model must be a multiple of both block and heads")
        if self.steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("steps, batch_size, and eval_every must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    @property
    def hidden(self) -> int:
        return self.mlp_ratio * self.c_model


@dataclass
class TrainRecord:
    step: int
    train_loss: float
    val_loss: float
    grad_norm: float
    scheme: str
    wallclock: float
    diverged: bool = False


def records_to_csv(records: list[TrainRecord]) -> str:
    """CSV stream of the records; wall-clock stays out so reruns match byte
    for byte."""
    lines = [TRAIN_CSV_HEADER]
    for r in records:
        lines.append(
            f"{r.step},{r.train_loss:.6f},{r.val_loss:.6f},"
            f"{r.grad_norm:.6f},{r.scheme},{int(r.diverged)}"
        )
    return "\n".join(lines) + "\n"


# ── optimizer ───────────────────────────────────────────────────────────


class AdamW:
    """Adam with decoupled weight decay, FP32 states, bias correction."""

    def __init__(
        self,
        params: dict[str, np.ndarray],
        lr: float,
        weight_decay: float = 0.0,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        decay_keys: set[str] | None = None,
    ) -> None:
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.decay_keys = set(params) if decay_keys is None else decay_keys
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for key, p in self.params.items():
            g = grads[key].astype(np.float32, copy=False)
            m, v = self.m[key], self.v[key]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if key in self.decay_keys and self.weight_decay:
                update = update + self.weight_decay * p
            p -= self.lr * update


# ── model ───────────────────────────────────────────────────────────────


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class ToyModel:
    """Embedding, a stack of transformer blocks, and an FP32 loss head.

    The head (final projection + cross-entropy) always runs in float32;
    its input gradient is quantized before entering the INT8 backward
    flow. A frozen diagonal gain after the embedding can amplify a fixed
    fraction of channels to create a channel-wise-outlier regime.
    """

    def __init__(self, cfg: TrainConfig, vocab: int) -> None:
        self.cfg = cfg
        self.vocab = vocab
        self.quantized = cfg.scheme == "per-block"
        rng = _stream(cfg.seed, _TAG_INIT)
        c = cfg.c_model
        self.emb = (rng.standard_normal((vocab, c)) / np.sqrt(c)).astype(np.float32)
        block_cfg = BlockConfig(
            c_model=c,
            heads=cfg.heads,
            hidden=cfg.hidden,
            block=cfg.block,
            dropout_p=cfg.dropout_p,
        )
        # identical parameter draws for every scheme at a given seed
        stacks = [TransformerBlock.initialize(rng, block_cfg) for _ in range(cfg.layers)]
        # a small head keeps initial logits near zero (loss starts at ln(vocab))
        self.head_w = (rng.standard_normal((vocab, c)) * 0.1 / np.sqrt(c)).astype(
            np.float32
        )
        self.head_b = np.zeros(vocab, dtype=np.float32)

        self.gain = np.ones(c, dtype=np.float32)
        if cfg.outlier_gain > 0.0:
            k = max(1, round(cfg.outlier_fraction * c))
            chans = _stream(cfg.seed, _TAG_OUTLIER).choice(c, size=k, replace=False)
            self.gain[chans] = cfg.outlier_gain

        if self.quantized:
            self.blocks: list = stacks
        else:
            scheme = (
                None
                if cfg.scheme == "fp32"
                else QuantScheme.from_name(cfg.scheme, cfg.block)
            )
            self.blocks = [ReferenceBlock.from_block(b, scheme) for b in stacks]

        self.params: dict[str, np.ndarray] = {
            "emb": self.emb,
            "head.w": self.head_w,
            "head.b": self.head_b,
        }
        for i, blk in enumerate(self.blocks):
            for key, arr in blk.parameters().items():
                self.params[f"block{i}.{key}"] = arr
        self.decay_keys = {
            k
            for k in self.params
            if k.endswith(".w") and k != "emb"
        }

    def mark_updated(self) -> None:
        for blk in self.blocks:
            blk.mark_updated()

    def _forward_blocks(self, h0, batch, seq, dropout_seed, train, counters):
        if self.quantized:
            hq = quantize_per_block(h0, self.cfg.block)
            for i, blk in enumerate(self.blocks):
                hq = blk.forward(
                    hq,
                    batch,
                    seq,
                    dropout_seed=derive_seed(dropout_seed, _TAG_DROP, i),
                    train=train,
                    counters=counters,
                    threads=self.cfg.threads,
                )
            return hq.dequantize()
        h = h0
        for i, blk in enumerate(self.blocks):
            h = blk.forward(
                h,
                batch,
                seq,
                dropout_seed=derive_seed(dropout_seed, _TAG_DROP, i),
                train=train,
            )
        return h

    def evaluate(self, x, y, mask, *, dropout_seed: int = 0) -> float:
        batch, seq = x.shape
        h0 = (self.emb[x.reshape(-1)] * self.gain).astype(np.float32)
        h = self._forward_blocks(h0, batch, seq, dropout_seed, False, None)
        logits = h @ self.head_w.T + self.head_b
        logp = _log_softmax(logits)
        flat_mask = mask.reshape(-1)
        picked = logp[np.arange(logits.shape[0]), y.reshape(-1)]
        return float(-(picked * flat_mask).sum() / flat_mask.sum())

    def loss_and_grads(
        self,
        x,
        y,
        mask,
        *,
        dropout_seed: int,
        counters: AccessCounters | None = None,
    ) -> tuple[float, dict[str, np.ndarray]]:
        batch, seq = x.shape
        flat_tokens = x.reshape(-1)
        h0 = (self.emb[flat_tokens] * self.gain).astype(np.float32)
        h = self._forward_blocks(h0, batch, seq, dropout_seed, True, counters)

        logits = h @ self.head_w.T + self.head_b
        logp = _log_softmax(logits)
        flat_mask = mask.reshape(-1)
        n_live = flat_mask.sum()
        rows = np.arange(logits.shape[0])
        flat_y = y.reshape(-1)
        loss = float(-(logp[rows, flat_y] * flat_mask).sum() / n_live)
        if not np.isfinite(loss):
            return loss, {}

        dlogits = np.exp(logp)
        dlogits[rows, flat_y] -= 1.0
        dlogits *= flat_mask[:, None] / n_live
        dlogits = dlogits.astype(np.float32)

        grads: dict[str, np.ndarray] = {
            "head.w": dlogits.T @ h,
            "head.b": dlogits.sum(axis=0),
        }
        dh = (dlogits @ self.head_w).astype(np.float32)

        if self.quantized:
            dq = quantize_per_block(dh, self.cfg.block)
            for i in reversed(range(len(self.blocks))):
                dq, blk_grads = self.blocks[i].backward(
                    dq, counters, self.cfg.threads
                )
                for key, g in blk_grads.items():
                    grads[f"block{i}.{key}"] = g
            dx = dq.dequantize()
        else:
            for i in reversed(range(len(self.blocks))):
                dh, blk_grads = self.blocks[i].backward(dh)
                for key, g in blk_grads.items():
                    grads[f"block{i}.{key}"] = g
            dx = dh

        demb = np.zeros_like(self.emb)
        np.add.at(demb, flat_tokens, (dx * self.gain).astype(np.float32))
        grads["emb"] = demb
        return loss, grads


def _grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.square(g, dtype=np.float64).sum())
    return float(np.sqrt(total))


# ── training loop ───────────────────────────────────────────────────────


def run_training(
    cfg: TrainConfig,
    task: ToyTask,
    *,
    checkpoint: str | Path | None = None,
    resume: bool = False,
) -> list[TrainRecord]:
    """Full run: AdamW on FP32 masters, records every ``eval_every`` steps.

    A non-finite training loss emits one flagged record and halts the run.
    With ``checkpoint`` set, a cleanly finished run saves parameters and
    optimizer state; ``resume=True`` restores them and continues from the
    saved step, reproducing the tail of an uninterrupted run bit for bit
    (all randomness is keyed by absolute step number).
    """
    from .qlayers import load_params, save_params

    sampler = make_sampler(task)
    model = ToyModel(cfg, sampler.vocab)
    opt = AdamW(
        model.params, cfg.lr, cfg.weight_decay, decay_keys=model.decay_keys
    )
    start_step = 0
    if resume:
        if checkpoint is None:
            raise ValueError("resume requested without a checkpoint path")
        state, meta = load_params(checkpoint)
        start_step = int(meta["step"])
        if start_step > cfg.steps:
            raise ValueError(
                f"checkpoint is at step {start_step}, beyond {cfg.steps}"
            )
        for key in model.params:
            np.copyto(model.params[key], state[f"param.{key}"])
            np.copyto(opt.m[key], state[f"m.{key}"])
            np.copyto(opt.v[key], state[f"v.{key}"])
        opt.t = int(meta["opt_t"])
        model.mark_updated()
    records: list[TrainRecord] = []
    t0 = time.perf_counter()
    for step in range(start_step, cfg.steps):
        x, y, mask = sampler.batch(cfg.seed, step, cfg.batch_size, cfg.block, False)
        try:
            loss, grads = model.loss_and_grads(
                x, y, mask, dropout_seed=derive_seed(cfg.seed, step)
            )
        except ValueError as err:
            # overflowing activations surface as non-finite-input or
            # scale-overflow errors inside the quantizer before the loss
            # itself goes NaN
            if "non-finite" not in str(err) and "overflows" not in str(err):
                raise
            loss = float("nan")
        if not np.isfinite(loss):
            records.append(
                TrainRecord(
                    step + 1,
                    loss,
                    float("nan"),
                    float("nan"),
                    cfg.scheme,
                    time.perf_counter() - t0,
                    diverged=True,
                )
            )
            return records
        gnorm = _grad_norm(grads)
        opt.step(grads)
        model.mark_updated()
        done = step + 1
        if done % cfg.eval_every == 0 or done == cfg.steps:
            val = float(
                np.mean(
                    [
                        model.evaluate(
                            *sampler.batch(cfg.seed, b, cfg.batch_size, cfg.block, True)
                        )
                        for b in range(cfg.eval_batches)
                    ]
                )
            )
            records.append(
                TrainRecord(
                    done, loss, val, gnorm, cfg.scheme, time.perf_counter() - t0
                )
            )
    if checkpoint is not None:
        state: dict[str, np.ndarray] = {}
        for key in model.params:
            state[f"param.{key}"] = model.params[key]
            state[f"m.{key}"] = opt.m[key]
            state[f"v.{key}"] = opt.v[key]
        save_params(
            checkpoint,
            state,
            {"step": cfg.steps, "opt_t": opt.t, "scheme": cfg.scheme},
        )
    return records


# ── run comparison ──────────────────────────────────────────────────────

COMPARE_CSV_HEADER = "label,final_step,final_val_loss,best_val_loss,rel_gap_vs_first"


def compare_runs(runs: dict[str, list[TrainRecord]]) -> str:
    """Aligns runs on their common step grid and tabulates final/best val
    losses plus each run's relative gap to the first (baseline) run."""
    if not runs:
        raise ValueError("no runs to compare")
    grids = [set(r.step for r in records) for records in runs.values()]
    common = sorted(set.intersection(*grids))
    if not common:
        raise ValueError("runs share no common step grid")
    final_step = common[-1]

    lines = [COMPARE_CSV_HEADER]
    baseline_final: float | None = None
    for label, records in runs.items():
        by_step = {r.step: r for r in records}
        on_grid = [by_step[s] for s in common]
        final_val = on_grid[-1].val_loss
        best_val = min(r.val_loss for r in on_grid)
        if baseline_final is None:
            baseline_final = final_val
            gap = 0.0
        else:
            gap = (final_val - baseline_final) / baseline_final
        lines.append(
            f"{label},{final_step},{final_val:.6f},{best_val:.6f},{gap:.6f}"
        )
    return "\n".join(lines) + "\n"
