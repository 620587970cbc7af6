"""Quantized linear layers and a pre-norm transformer block.

Every tensor handed from one operator to the next inside
:class:`TransformerBlock` is a :class:`~int8flow.qtensor.BlockQuantTensor`
(int8 values plus binary16-grid scales); dequantization happens only inside
operators. Weights keep an FP32 master copy that is requantized whenever it
changes. The attention core runs in FP32 and is the one deliberate
full-precision island; its internal saves (and dropout masks) sit outside
the INT8 activation accounting because they are identical under any data
flow.

:class:`ReferenceBlock` is the same wiring in plain float32, optionally
with a per-matmul quantize/dequantize round trip of each operand — the
quantize-compute-dequantize style baseline used for ablations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .qgemm import (
    AccessCounters,
    TileConfig,
    block_mm_forward,
    block_mm_grad_input,
    block_mm_grad_weight,
)
from .qnonlinear import (
    DropoutState,
    NormParams,
    add_forward,
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
)
from .qtensor import (
    BlockQuantTensor,
    QuantScheme,
    dequantize_with_scheme,
    quantize_per_block,
    quantize_with_scheme,
    zeros_like,
)

# ── configuration ───────────────────────────────────────────────────────


@dataclass(frozen=True)
class BlockConfig:
    """Shape and behaviour of one transformer block."""

    c_model: int = 64
    heads: int = 4
    hidden: int = 256
    block: int = 32
    dropout_p: float = 0.0
    eps: float = 1e-5

    def __post_init__(self):
        if self.c_model % self.block or self.hidden % self.block:
            raise ValueError("model and hidden widths must be block multiples")
        if self.c_model % self.heads:
            raise ValueError("head count must divide the model width")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout probability must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.c_model // self.heads

    @property
    def stats_width(self) -> int:
        # Column-block width for the Add -> LayerNorm statistics channel.
        return 64 if self.c_model % 64 == 0 else self.block


# ── quantized linear layer ──────────────────────────────────────────────


class QuantLinear:
    """Linear layer with FP32 master weight and a lazily refreshed INT8 copy.

    The quantized weight always reflects the master at forward time: call
    :meth:`mark_updated` after mutating ``master_weight`` in place.
    """

    def __init__(
        self,
        master_weight: np.ndarray,
        bias: np.ndarray | None = None,
        block: int = 32,
        cfg: TileConfig | None = None,
    ) -> None:
        self.master_weight = np.ascontiguousarray(master_weight, dtype=np.float32)
        if self.master_weight.ndim != 2:
            raise ValueError("weight must be a D x C matrix")
        self.bias = None if bias is None else np.asarray(bias, dtype=np.float32)
        if self.bias is not None and self.bias.shape != (self.master_weight.shape[0],):
            raise ValueError("bias length must match the output width")
        self.block = block
        self.cfg = cfg
        self._weight_q: BlockQuantTensor | None = None
        self.saved_input: BlockQuantTensor | None = None

    @classmethod
    def initialize(
        cls,
        rng: np.random.Generator,
        d: int,
        c: int,
        *,
        bias: bool = True,
        block: int = 32,
        gain: float = 1.0,
    ) -> "QuantLinear":
        w = (rng.standard_normal((d, c)) * gain / np.sqrt(c)).astype(np.float32)
        b = np.zeros(d, dtype=np.float32) if bias else None
        return cls(w, b, block)

    @property
    def out_features(self) -> int:
        return self.master_weight.shape[0]

    @property
    def in_features(self) -> int:
        return self.master_weight.shape[1]

    @property
    def weight_q(self) -> BlockQuantTensor:
        if self._weight_q is None:
            self._weight_q = quantize_per_block(self.master_weight, self.block)
        return self._weight_q

    def mark_updated(self) -> None:
        """Invalidate the INT8 weight copy after a master-weight update."""
        self._weight_q = None

    def forward(
        self,
        xq: BlockQuantTensor,
        counters: AccessCounters | None = None,
        threads: int = 1,
    ) -> BlockQuantTensor:
        self.saved_input = xq
        return block_mm_forward(
            xq,
            self.weight_q,
            cfg=self.cfg,
            counters=counters,
            bias=self.bias,
            threads=threads,
        )

    def backward(
        self,
        dyq: BlockQuantTensor,
        counters: AccessCounters | None = None,
        threads: int = 1,
    ) -> tuple[BlockQuantTensor, np.ndarray, np.ndarray | None]:
        """Returns (dX quantized, dW FP32 for the optimizer, dbias FP32)."""
        if self.saved_input is None:
            raise RuntimeError("backward called before forward")
        dxq = block_mm_grad_input(
            dyq, self.weight_q, cfg=self.cfg, counters=counters, threads=threads
        )
        dwq = block_mm_grad_weight(
            dyq, self.saved_input, cfg=self.cfg, counters=counters, threads=threads
        )
        dbias = None if self.bias is None else dyq.dequantize().sum(axis=0)
        return dxq, dwq.dequantize(), dbias


# ── attention core (full precision) ─────────────────────────────────────


class AttentionCore:
    """Multi-head causal self-attention, computed entirely in FP32."""

    def __init__(self, heads: int, head_dim: int, causal: bool = True) -> None:
        self.heads = heads
        self.head_dim = head_dim
        self.causal = causal
        self._saved: tuple | None = None

    def _split(self, x: np.ndarray, batch: int, seq: int) -> np.ndarray:
        # (batch*seq, H*dh) -> (batch, H, seq, dh)
        return x.reshape(batch, seq, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        batch, _, seq, _ = x.shape
        return x.transpose(0, 2, 1, 3).reshape(batch * seq, self.heads * self.head_dim)

    def forward(self, qkv: np.ndarray, batch: int, seq: int) -> np.ndarray:
        c = self.heads * self.head_dim
        if qkv.shape != (batch * seq, 3 * c):
            raise ValueError(f"expected ({batch * seq}, {3 * c}), got {qkv.shape}")
        q = self._split(qkv[:, :c], batch, seq)
        k = self._split(qkv[:, c : 2 * c], batch, seq)
        v = self._split(qkv[:, 2 * c :], batch, seq)
        scores = (q @ k.transpose(0, 1, 3, 2)) * np.float32(1.0 / np.sqrt(self.head_dim))
        if self.causal:
            mask = np.triu(np.ones((seq, seq), dtype=bool), k=1)
            scores = np.where(mask, np.float32(-np.inf), scores)
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores, dtype=np.float32)
        probs = e / e.sum(axis=-1, keepdims=True)
        out = probs @ v
        self._saved = (q, k, v, probs)
        return self._merge(out).astype(np.float32)

    def backward(self, dout: np.ndarray, batch: int, seq: int) -> np.ndarray:
        if self._saved is None:
            raise RuntimeError("backward called before forward")
        q, k, v, probs = self._saved
        d = self._split(dout, batch, seq)
        dv = probs.transpose(0, 1, 3, 2) @ d
        dprobs = d @ v.transpose(0, 1, 3, 2)
        # softmax backward: p * (dp - sum(dp * p))
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
        dscores *= np.float32(1.0 / np.sqrt(self.head_dim))
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q
        return np.concatenate(
            [self._merge(dq), self._merge(dk), self._merge(dv)], axis=1
        ).astype(np.float32)


# ── transformer block, INT8 data flow ───────────────────────────────────


@dataclass
class _SavedForward:
    """Everything the backward pass and the byte accounting need."""

    batch: int
    seq: int
    ctx1: object
    ctx2: object
    m1: BlockQuantTensor
    drop1: DropoutState
    drop2: DropoutState
    quant_saves: list = field(default_factory=list)


class TransformerBlock:
    """Pre-norm transformer block; INT8 tensors between all operators.

    Wiring: Add(x, 0) with stats -> LayerNorm -> fused QKV linear -> FP32
    attention core -> output projection -> Dropout -> residual Add with
    stats -> LayerNorm -> MLP linear -> GELU -> MLP linear -> Dropout ->
    residual Add. Parameter gradients come back in FP32; activation
    gradients stay INT8.
    """

    def __init__(
        self,
        config: BlockConfig,
        qkv: QuantLinear,
        proj: QuantLinear,
        mlp1: QuantLinear,
        mlp2: QuantLinear,
        ln1: NormParams,
        ln2: NormParams,
    ) -> None:
        self.config = config
        self.qkv = qkv
        self.proj = proj
        self.mlp1 = mlp1
        self.mlp2 = mlp2
        self.ln1 = ln1
        self.ln2 = ln2
        self.attn = AttentionCore(config.heads, config.head_dim)
        self._saved: _SavedForward | None = None

    @classmethod
    def initialize(
        cls,
        rng: np.random.Generator,
        config: BlockConfig,
        *,
        residual_gain: float = 1.0,
    ) -> "TransformerBlock":
        c, h, b = config.c_model, config.hidden, config.block
        return cls(
            config,
            qkv=QuantLinear.initialize(rng, 3 * c, c, block=b),
            proj=QuantLinear.initialize(rng, c, c, block=b, gain=residual_gain),
            mlp1=QuantLinear.initialize(rng, h, c, block=b),
            mlp2=QuantLinear.initialize(rng, c, h, block=b, gain=residual_gain),
            ln1=NormParams(np.ones(c, np.float32), np.zeros(c, np.float32), config.eps),
            ln2=NormParams(np.ones(c, np.float32), np.zeros(c, np.float32), config.eps),
        )

    # -- parameter plumbing ----------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            "qkv.w": self.qkv.master_weight,
            "qkv.b": self.qkv.bias,
            "proj.w": self.proj.master_weight,
            "proj.b": self.proj.bias,
            "mlp1.w": self.mlp1.master_weight,
            "mlp1.b": self.mlp1.bias,
            "mlp2.w": self.mlp2.master_weight,
            "mlp2.b": self.mlp2.bias,
            "ln1.gamma": self.ln1.gamma,
            "ln1.beta": self.ln1.beta,
            "ln2.gamma": self.ln2.gamma,
            "ln2.beta": self.ln2.beta,
        }

    def mark_updated(self) -> None:
        for lin in (self.qkv, self.proj, self.mlp1, self.mlp2):
            lin.mark_updated()

    # -- forward / backward ----------------------------------------------

    def forward(
        self,
        xq: BlockQuantTensor,
        batch: int,
        seq: int,
        *,
        dropout_seed: int = 0,
        train: bool = True,
        counters: AccessCounters | None = None,
        threads: int = 1,
    ) -> BlockQuantTensor:
        cfg = self.config
        p = cfg.dropout_p if train else 0.0
        n = batch * seq
        if xq.shape != (n, cfg.c_model):
            raise ValueError(f"expected ({n}, {cfg.c_model}), got {xq.shape}")
        width = cfg.stats_width

        a1, stats1 = add_forward(xq, zeros_like(xq), width, counters)
        ln1_out, ctx1 = layernorm_forward(a1, stats1, self.ln1, counters)
        qkv_q = self.qkv.forward(ln1_out, counters, threads)
        attn_f32 = self.attn.forward(qkv_q.dequantize(), batch, seq)
        attn_q = quantize_per_block(attn_f32, cfg.block)
        proj_q = self.proj.forward(attn_q, counters, threads)
        drop1 = DropoutState.generate(p, (dropout_seed, 1), proj_q.shape)
        branch1 = dropout_forward(proj_q, drop1, counters)
        h, stats2 = add_forward(a1, branch1, width, counters)

        ln2_out, ctx2 = layernorm_forward(h, stats2, self.ln2, counters)
        m1 = self.mlp1.forward(ln2_out, counters, threads)
        g = gelu_forward(m1, counters)
        m2 = self.mlp2.forward(g, counters, threads)
        drop2 = DropoutState.generate(p, (dropout_seed, 2), m2.shape)
        branch2 = dropout_forward(m2, drop2, counters)
        out, _ = add_forward(h, branch2, width, counters)

        self._saved = _SavedForward(
            batch,
            seq,
            ctx1,
            ctx2,
            m1,
            drop1,
            drop2,
            quant_saves=[
                ctx1.xq,                 # LayerNorm 1 input (= entry Add output)
                self.qkv.saved_input,    # LayerNorm 1 output
                self.proj.saved_input,   # quantized attention output
                ctx2.xq,                 # LayerNorm 2 input (= residual sum)
                self.mlp1.saved_input,   # LayerNorm 2 output
                m1,                      # GELU input
                self.mlp2.saved_input,   # GELU output
            ],
        )
        return out

    def backward(
        self,
        dyq: BlockQuantTensor,
        counters: AccessCounters | None = None,
        threads: int = 1,
    ) -> tuple[BlockQuantTensor, dict[str, np.ndarray]]:
        if self._saved is None:
            raise RuntimeError("backward called before forward")
        s = self._saved
        width = self.config.stats_width

        # MLP branch: out = h + drop2(mlp2(gelu(mlp1(ln2(h)))))
        dm2 = dropout_backward(dyq, s.drop2, counters)
        dg, dw_mlp2, db_mlp2 = self.mlp2.backward(dm2, counters, threads)
        dm1 = gelu_backward(s.m1, dg, counters)
        dln2, dw_mlp1, db_mlp1 = self.mlp1.backward(dm1, counters, threads)
        dh_branch, dgamma2, dbeta2 = layernorm_backward(s.ctx2, dln2, self.ln2, counters)
        dh, _ = add_forward(dh_branch, dyq, width, counters)

        # attention branch: h = a1 + drop1(proj(attn(qkv(ln1(a1)))))
        dproj = dropout_backward(dh, s.drop1, counters)
        dattn_q, dw_proj, db_proj = self.proj.backward(dproj, counters, threads)
        dqkv_f32 = self.attn.backward(dattn_q.dequantize(), s.batch, s.seq)
        dqkv_q = quantize_per_block(dqkv_f32, self.config.block)
        dln1, dw_qkv, db_qkv = self.qkv.backward(dqkv_q, counters, threads)
        da1_branch, dgamma1, dbeta1 = layernorm_backward(s.ctx1, dln1, self.ln1, counters)
        dx, _ = add_forward(da1_branch, dh, width, counters)

        grads = {
            "qkv.w": dw_qkv,
            "qkv.b": db_qkv,
            "proj.w": dw_proj,
            "proj.b": db_proj,
            "mlp1.w": dw_mlp1,
            "mlp1.b": db_mlp1,
            "mlp2.w": dw_mlp2,
            "mlp2.b": db_mlp2,
            "ln1.gamma": dgamma1,
            "ln1.beta": dbeta1,
            "ln2.gamma": dgamma2,
            "ln2.beta": dbeta2,
        }
        return dx, grads

    # -- activation-memory accounting ------------------------------------

    def saved_activation_bytes(self) -> int:
        """Bytes held for backward in INT8 form: one byte per value plus
        two bytes (binary16) per block scale."""
        if self._saved is None:
            raise RuntimeError("no forward pass recorded")
        return sum(
            t.values.size + 2 * t.scales.size for t in self._saved.quant_saves
        )

    def fp16_baseline_bytes(self) -> int:
        """The same saved tensors at two bytes per element (FP16 data flow)."""
        if self._saved is None:
            raise RuntimeError("no forward pass recorded")
        return sum(2 * t.values.size for t in self._saved.quant_saves)


# ── full-precision reference block ──────────────────────────────────────


def _roundtrip(x: np.ndarray, scheme: QuantScheme | None) -> np.ndarray:
    """Quantize-dequantize one operand (no-op when no scheme is given)."""
    if scheme is None:
        return x
    values, scales = quantize_with_scheme(x, scheme)
    return dequantize_with_scheme(values, scales, scheme)


class ReferenceBlock:
    """The same wiring in plain float32.

    With ``scheme=None`` this is the exact FP32 baseline. With a scheme it
    becomes a fake-quantized ablation of a fully quantized data flow: every
    tensor handed between operators — including the residual stream — plus
    each weight and upstream-gradient matmul operand takes a fresh
    quantize/dequantize round trip under that scheme. Gradients pass
    through the round trips unchanged (straight-through).
    """

    def __init__(
        self,
        config: BlockConfig,
        params: dict[str, np.ndarray],
        scheme: QuantScheme | None = None,
    ) -> None:
        self.config = config
        self.p = {k: np.asarray(v, dtype=np.float32) for k, v in params.items()}
        self.scheme = scheme
        self.attn = AttentionCore(config.heads, config.head_dim)
        self._saved: dict | None = None

    @classmethod
    def from_block(
        cls, block: TransformerBlock, scheme: QuantScheme | None = None
    ) -> "ReferenceBlock":
        params = {k: v.copy() for k, v in block.parameters().items()}
        return cls(block.config, params, scheme)

    def parameters(self) -> dict[str, np.ndarray]:
        return self.p

    def mark_updated(self) -> None:  # symmetry with TransformerBlock
        pass

    def _linear(self, name: str, x: np.ndarray, save: dict) -> np.ndarray:
        w_rt = _roundtrip(self.p[f"{name}.w"], self.scheme)
        save[name] = (x, w_rt)
        return x @ w_rt.T + self.p[f"{name}.b"]

    def _linear_grad(
        self, name: str, dy: np.ndarray, save: dict
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        x_rt, w_rt = save[name]
        dy_rt = _roundtrip(dy, self.scheme)
        return dy_rt @ w_rt, dy_rt.T @ x_rt, dy.sum(axis=0)

    def forward(
        self,
        x: np.ndarray,
        batch: int,
        seq: int,
        *,
        dropout_seed: int = 0,
        train: bool = True,
    ) -> np.ndarray:
        cfg = self.config
        p_drop = cfg.dropout_p if train else 0.0
        save: dict = {}
        eps = cfg.eps

        def q(t: np.ndarray) -> np.ndarray:
            return _roundtrip(t.astype(np.float32), self.scheme)

        x = q(x)
        save["x"] = x
        ln1_out = q(layernorm_f32(x, self.p["ln1.gamma"], self.p["ln1.beta"], eps))
        qkv = q(self._linear("qkv", ln1_out, save))
        attn = q(self.attn.forward(qkv.astype(np.float32), batch, seq))
        proj = q(self._linear("proj", attn, save))
        drop1 = DropoutState.generate(p_drop, (dropout_seed, 1), proj.shape)
        h = q(
            x + np.where(drop1.mask, proj * drop1.keep_factor, 0.0).astype(np.float32)
        )

        ln2_out = q(layernorm_f32(h, self.p["ln2.gamma"], self.p["ln2.beta"], eps))
        save["h"] = h
        m1 = q(self._linear("mlp1", ln2_out, save))
        g = q(gelu_f32(m1.astype(np.float32)))
        m2 = q(self._linear("mlp2", g, save))
        drop2 = DropoutState.generate(p_drop, (dropout_seed, 2), m2.shape)
        out = q(
            h + np.where(drop2.mask, m2 * drop2.keep_factor, 0.0).astype(np.float32)
        )

        save["m1"] = m1.astype(np.float32)
        save["drop1"] = drop1
        save["drop2"] = drop2
        save["batch_seq"] = (batch, seq)
        self._saved = save
        return out.astype(np.float32)

    def backward(
        self, dy: np.ndarray
    ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        if self._saved is None:
            raise RuntimeError("backward called before forward")
        s = self._saved
        cfg = self.config
        batch, seq = s["batch_seq"]
        drop1, drop2 = s["drop1"], s["drop2"]

        dm2 = np.where(drop2.mask, dy * drop2.keep_factor, 0.0).astype(np.float32)
        dg, dw_mlp2, db_mlp2 = self._linear_grad("mlp2", dm2, s)
        dm1 = (dg * gelu_grad_f32(s["m1"])).astype(np.float32)
        dln2, dw_mlp1, db_mlp1 = self._linear_grad("mlp1", dm1, s)
        dh_branch, dgamma2, dbeta2 = layernorm_grad_f32(
            s["h"], dln2.astype(np.float32), self.p["ln2.gamma"], cfg.eps
        )
        dh = dh_branch + dy

        dproj = np.where(drop1.mask, dh * drop1.keep_factor, 0.0).astype(np.float32)
        dattn, dw_proj, db_proj = self._linear_grad("proj", dproj, s)
        dqkv = self.attn.backward(dattn.astype(np.float32), batch, seq)
        dln1, dw_qkv, db_qkv = self._linear_grad("qkv", dqkv, s)
        dx_branch, dgamma1, dbeta1 = layernorm_grad_f32(
            s["x"], dln1.astype(np.float32), self.p["ln1.gamma"], cfg.eps
        )
        dx = dx_branch + dh

        grads = {
            "qkv.w": dw_qkv,
            "qkv.b": db_qkv,
            "proj.w": dw_proj,
            "proj.b": db_proj,
            "mlp1.w": dw_mlp1,
            "mlp1.b": db_mlp1,
            "mlp2.w": dw_mlp2,
            "mlp2.b": db_mlp2,
            "ln1.gamma": dgamma1,
            "ln1.beta": dbeta1,
            "ln2.gamma": dgamma2,
            "ln2.beta": dbeta2,
        }
        return dx.astype(np.float32), grads


# ── checkpointing ───────────────────────────────────────────────────────

_CKPT_FORMAT = "int8flow-checkpoint-v1"


def save_params(
    path: str | Path, params: dict[str, np.ndarray], manifest: dict | None = None
) -> None:
    """Write FP32 parameters as one binary blob plus a JSON manifest.

    Arrays are concatenated in sorted key order as little-endian float32;
    the manifest records shapes so :func:`load_params` reproduces every
    array bit-for-bit.
    """
    path = Path(path)
    keys = sorted(params)
    shapes = {k: list(params[k].shape) for k in keys}
    blob = b"".join(
        np.ascontiguousarray(params[k], dtype="<f4").tobytes() for k in keys
    )
    path.with_suffix(".bin").write_bytes(blob)
    doc = {"format": _CKPT_FORMAT, "params": shapes, "manifest": manifest or {}}
    path.with_suffix(".json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_params(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    doc = json.loads(path.with_suffix(".json").read_text())
    if doc.get("format") != _CKPT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format: {doc.get('format')!r}")
    blob = path.with_suffix(".bin").read_bytes()
    params: dict[str, np.ndarray] = {}
    offset = 0
    for key in sorted(doc["params"]):
        shape = tuple(doc["params"][key])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        params[key] = arr.reshape(shape).astype(np.float32)
        offset += 4 * count
    if offset != len(blob):
        raise ValueError("checkpoint blob size does not match manifest shapes")
    return params, doc["manifest"]
