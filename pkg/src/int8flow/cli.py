"""Command-line front end.

Four subcommands: ``quant-error`` sweeps quantization schemes over synthetic
outlier matrices, ``bench`` runs GEMM and elementwise operators while
auditing their memory-access counters, ``train`` drives toy training
sweeps, and ``selftest`` executes the core invariant battery. All tabular
output is CSV with fixed headers and fixed float formatting: identical
config and seed give byte-identical files at any thread count. Wall-clock
timing lives only in the JSON manifest.

Exit codes: 0 ok, 2 config error, 3 training divergence, 4 selftest
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np

from .qgemm import (
    COUNTER_CSV_HEADER,
    AccessCounters,
    CounterLog,
    ExecMode,
    TileConfig,
    block_mm_forward,
    block_mm_grad_input,
    block_mm_grad_weight,
    micro_mm_16,
)
from .qnonlinear import (
    add_forward,
    count_elementwise,
    gelu_f32,
    gelu_forward,
    gelu_grad_f32,
    layernorm_f32,
    layernorm_grad_f32,
)
from .qtensor import (
    QuantScheme,
    dequantize_with_scheme,
    quantization_error,
    quantize_per_block,
    quantize_with_scheme,
    zeros_like,
)
from .trainer import (
    TRAIN_SCHEMES,
    CharLM,
    CopySequence,
    TrainConfig,
    compare_runs,
    derive_seed,
    records_to_csv,
    run_training,
)

QUANT_ERROR_CSV_HEADER = "scheme,block,rows,cols,outlier_gain,trial,mse,mean_abs"

_ERROR_SCHEMES = ("per-block", "per-token", "per-channel", "per-tensor")


class ConfigError(Exception):
    """Configuration or environment problem detected before any computation."""


# ── config schema ───────────────────────────────────────────────────────

_SIZE2 = {
    "type": "array",
    "items": {"type": "integer", "minimum": 1},
    "minItems": 2,
    "maxItems": 2,
}
_SIZE3 = {
    "type": "array",
    "items": {"type": "integer", "minimum": 1},
    "minItems": 3,
    "maxItems": 3,
}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["version"],
    "additionalProperties": False,
    "properties": {
        "version": {"const": 1},
        "code_version": {"type": "string"},
        "quant_error": {
            "type": "object",
            "required": ["sizes"],
            "additionalProperties": False,
            "properties": {
                "sizes": {"type": "array", "items": _SIZE2, "minItems": 1},
                "schemes": {
                    "type": "array",
                    "items": {"enum": list(_ERROR_SCHEMES)},
                    "minItems": 1,
                },
                "outlier_gains": {
                    "type": "array",
                    "items": {"type": "number", "minimum": 0},
                    "minItems": 1,
                },
                "outlier_fraction": {
                    "type": "number",
                    "exclusiveMinimum": 0,
                    "maximum": 1,
                },
                "trials": {"type": "integer", "minimum": 1},
                "block": {"type": "integer", "minimum": 1},
            },
        },
        "bench": {
            "type": "object",
            "required": ["gemm_sizes"],
            "additionalProperties": False,
            "properties": {
                "gemm_sizes": {"type": "array", "items": _SIZE3, "minItems": 1},
                "elementwise_sizes": {"type": "array", "items": _SIZE2},
                "modes": {
                    "type": "array",
                    "items": {"enum": ["int8", "qcd"]},
                    "minItems": 1,
                },
                "block": {"type": "integer", "minimum": 1},
                "tile": _SIZE3,
            },
        },
        "train": {
            "type": "object",
            "required": ["task", "schemes", "steps"],
            "additionalProperties": False,
            "properties": {
                "task": {
                    "oneOf": [
                        {
                            "type": "object",
                            "required": ["type"],
                            "additionalProperties": False,
                            "properties": {
                                "type": {"const": "copy"},
                                "vocab": {"type": "integer", "minimum": 2},
                                "length": {"type": "integer", "minimum": 1},
                            },
                        },
                        {
                            "type": "object",
                            "required": ["type", "corpus"],
                            "additionalProperties": False,
                            "properties": {
                                "type": {"const": "char-lm"},
                                "corpus": {"type": "string"},
                                "context": {"type": "integer", "minimum": 1},
                            },
                        },
                    ]
                },
                "schemes": {
                    "type": "array",
                    "items": {"enum": list(TRAIN_SCHEMES)},
                    "minItems": 1,
                },
                "steps": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "weight_decay": {"type": "number", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "eval_every": {"type": "integer", "minimum": 1},
                "eval_batches": {"type": "integer", "minimum": 1},
                "layers": {"type": "integer", "minimum": 1},
                "c_model": {"type": "integer", "minimum": 1},
                "heads": {"type": "integer", "minimum": 1},
                "mlp_ratio": {"type": "integer", "minimum": 1},
                "dropout_p": {"type": "number", "minimum": 0, "maximum": 0.99},
                "outlier_gain": {"type": "number", "minimum": 0},
                "outlier_fraction": {
                    "type": "number",
                    "exclusiveMinimum": 0,
                    "maximum": 1,
                },
                "block": {"type": "integer", "minimum": 1},
                "checkpoint": {"type": "string"},
                "resume": {"type": "boolean"},
            },
        },
    },
}


def load_config(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from err
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as err:
        raise ConfigError(f"config schema violation: {err.message}") from err
    return doc


def _section(doc: dict, name: str) -> dict:
    if name not in doc:
        raise ConfigError(f"config has no {name!r} section")
    return doc[name]


def _git_blob_hash(text: str) -> str:
    payload = text.encode()
    return hashlib.sha1(b"blob %d\x00%s" % (len(payload), payload)).hexdigest()


def _write_manifest(
    out: Path,
    subcommand: str,
    args: argparse.Namespace,
    doc: dict,
    timing: dict,
) -> None:
    code_version = doc.get("code_version", "")
    manifest = {
        "format": "int8flow-manifest-v1",
        "subcommand": subcommand,
        "seed": args.seed,
        "threads": args.threads,
        "config": doc,
        "code_version": code_version,
        "code_version_hash": _git_blob_hash(code_version),
        "timing": timing,
        "created_unix": time.time(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _prepare_out(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as err:
        raise ConfigError(f"output directory not writable: {err}") from err
    return out


# ── quant-error ─────────────────────────────────────────────────────────


def _outlier_matrix(
    rng: np.random.Generator, rows: int, cols: int, gain: float, fraction: float
) -> np.ndarray:
    x = rng.standard_normal((rows, cols)).astype(np.float32)
    if gain != 1.0:
        k = max(1, round(fraction * cols))
        chans = rng.choice(cols, size=k, replace=False)
        x[:, chans] *= np.float32(gain)
    return x


def cmd_quant_error(args: argparse.Namespace, doc: dict) -> int:
    sec = _section(doc, "quant_error")
    out = _prepare_out(args.out)
    schemes = sec.get("schemes", list(_ERROR_SCHEMES))
    if args.scheme:
        if args.scheme not in schemes:
            raise ConfigError(
                f"--scheme {args.scheme} is not in the configured sweep"
            )
        schemes = [args.scheme]
    gains = sec.get("outlier_gains", [1.0, 30.0])
    fraction = sec.get("outlier_fraction", 0.01)
    trials = sec.get("trials", 5)
    block = args.block_size or sec.get("block", 32)

    for rows, cols in sec["sizes"]:
        if rows % block or cols % block:
            raise ConfigError(
                f"size {rows}x{cols} is not a multiple of block {block}"
            )

    t0 = time.perf_counter()
    lines = [QUANT_ERROR_CSV_HEADER]
    for si, (rows, cols) in enumerate(sec["sizes"]):
        for gi, gain in enumerate(gains):
            for trial in range(trials):
                rng = np.random.Generator(
                    np.random.Philox(key=derive_seed(args.seed, si, gi, trial))
                )
                x = _outlier_matrix(rng, rows, cols, gain, fraction)
                for scheme_name in schemes:
                    scheme = QuantScheme.from_name(scheme_name, block)
                    mse, mean_abs = quantization_error(x, scheme)
                    lines.append(
                        f"{scheme_name},{block},{rows},{cols},{gain:g},"
                        f"{trial},{mse:.10e},{mean_abs:.10e}"
                    )
    (out / "quant_error.csv").write_text("\n".join(lines) + "\n")
    _write_manifest(
        out, "quant-error", args, doc, {"total_s": time.perf_counter() - t0}
    )
    return 0


# ── bench ───────────────────────────────────────────────────────────────


def _expected_gemm_counters(
    n: int, c: int, d: int, cfg: TileConfig, mode: ExecMode
) -> AccessCounters:
    """The closed-form per-tile cost model, tallied over the output grid."""
    expect = AccessCounters()
    tiles_c = -(-c // cfg.b_c)
    for i0 in range(0, n, cfg.b_n):
        bn = min(cfg.b_n, n - i0)
        for j0 in range(0, d, cfg.b_d):
            bd = min(cfg.b_d, d - j0)
            if mode is ExecMode.INT8_DATA_FLOW:
                expect.int8_load_store += (bn + bd) * c + bn * bd
                expect.int_mac += bn * bd * c
                expect.dequant_ops += bn * bd * tiles_c
                expect.quant_ops += bn * bd
            else:
                expect.fp16_load_store += (bn + bd) * c + bn * bd
                expect.int_mac += bn * bd * c
    if mode is ExecMode.QCD_EMULATION:
        expect.dequant_ops += n * d
    return expect


def cmd_bench(args: argparse.Namespace, doc: dict) -> int:
    sec = _section(doc, "bench")
    out = _prepare_out(args.out)
    block = args.block_size or sec.get("block", 32)
    modes = sec.get("modes", ["int8", "qcd"])
    if args.mode:
        modes = [args.mode]
    tile = sec.get("tile")
    try:
        cfg = TileConfig(*tile, block=block) if tile else TileConfig.default_for(block)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    elementwise = sec.get("elementwise_sizes", [])

    for n, c, d in sec["gemm_sizes"]:
        if n % block or c % block or d % block:
            raise ConfigError(
                f"gemm size {n}x{c}x{d} is not a multiple of block {block}"
            )
    for n, c in elementwise:
        if n % block or c % block:
            raise ConfigError(
                f"elementwise size {n}x{c} is not a multiple of block {block}"
            )

    t0 = time.perf_counter()
    log = CounterLog()
    timing: dict[str, float] = {}
    byte_totals = {"int8": 0, "qcd": 0}
    for n, c, d in sec["gemm_sizes"]:
        rng = np.random.Generator(np.random.Philox(key=derive_seed(args.seed, n, c, d)))
        xq = quantize_per_block(
            rng.standard_normal((n, c)).astype(np.float32), block
        )
        wq = quantize_per_block(
            rng.standard_normal((d, c)).astype(np.float32), block
        )
        for mode_name in modes:
            mode = ExecMode(mode_name)
            counters = AccessCounters()
            t_op = time.perf_counter()
            yq = block_mm_forward(
                xq, wq, cfg=cfg.clamped(n, d), mode=mode,
                counters=counters, threads=args.threads,
            )
            timing[f"forward_mm/{n}x{c}x{d}/{mode_name}"] = (
                time.perf_counter() - t_op
            )
            expect = _expected_gemm_counters(n, c, d, cfg.clamped(n, d), mode)
            if counters.as_tuple() != expect.as_tuple():
                raise RuntimeError(
                    f"counter model violation for {n}x{c}x{d} {mode_name}: "
                    f"got {counters.as_tuple()}, expected {expect.as_tuple()}"
                )
            log.add("forward_mm", n, c, d, block, mode, counters)
            del yq
    for n, c in elementwise:
        rng = np.random.Generator(np.random.Philox(key=derive_seed(args.seed, n, c)))
        xq = quantize_per_block(
            rng.standard_normal((n, c)).astype(np.float32), block
        )
        for mode_name in modes:
            mode = ExecMode(mode_name)
            counters = AccessCounters()
            t_op = time.perf_counter()
            if mode is ExecMode.INT8_DATA_FLOW:
                gelu_forward(xq, counters)
                add_forward(xq, zeros_like(xq), 64, counters)
            else:
                # FP16 data flow: same elementwise traffic in 16-bit words
                nc = n * c
                count_elementwise(counters, mode, nc, nc)  # gelu
                count_elementwise(counters, mode, 2 * nc, nc)  # add
            timing[f"elementwise/{n}x{c}/{mode_name}"] = (
                time.perf_counter() - t_op
            )
            log.add("elementwise", n, c, 0, block, mode, counters)
            byte_totals[mode_name] += (
                counters.int8_load_store + 2 * counters.fp16_load_store
            )
    (out / "bench.csv").write_text(log.to_csv())
    timing["total_s"] = time.perf_counter() - t0
    manifest_extra = dict(timing)
    if byte_totals["qcd"]:
        manifest_extra["elementwise_byte_ratio_int8_vs_fp16"] = (
            byte_totals["int8"] / byte_totals["qcd"]
        )
    _write_manifest(out, "bench", args, doc, manifest_extra)
    return 0


# ── train ───────────────────────────────────────────────────────────────


def _build_task(task_doc: dict):
    if task_doc["type"] == "copy":
        return CopySequence(
            vocab=task_doc.get("vocab", 16), length=task_doc.get("length", 32)
        )
    return CharLM(
        corpus=task_doc["corpus"], context=task_doc.get("context", 32)
    )


_TRAIN_CFG_KEYS = (
    "steps", "lr", "weight_decay", "batch_size", "eval_every", "eval_batches",
    "layers", "c_model", "heads", "mlp_ratio", "dropout_p", "outlier_gain",
    "outlier_fraction", "block",
)


def cmd_train(args: argparse.Namespace, doc: dict) -> int:
    sec = _section(doc, "train")
    out = _prepare_out(args.out)
    schemes = sec["schemes"]
    if args.scheme:
        if args.scheme not in schemes:
            raise ConfigError(
                f"--scheme {args.scheme} is not in the configured sweep"
            )
        schemes = [args.scheme]
    kwargs = {k: sec[k] for k in _TRAIN_CFG_KEYS if k in sec}
    if args.block_size:
        kwargs["block"] = args.block_size
    try:
        task = _build_task(sec["task"])
        configs = {
            scheme: TrainConfig(
                scheme=scheme, seed=args.seed, threads=args.threads, **kwargs
            )
            for scheme in schemes
        }
    except (ValueError, FileNotFoundError) as err:
        raise ConfigError(str(err)) from err

    t0 = time.perf_counter()
    timing: dict[str, float] = {}
    runs = {}
    diverged = False
    for scheme, cfg in configs.items():
        ck = sec.get("checkpoint")
        ck_path = out / f"{ck}_{scheme}" if ck else None
        t_run = time.perf_counter()
        records = run_training(
            cfg, task, checkpoint=ck_path, resume=sec.get("resume", False)
        )
        timing[f"run/{scheme}"] = time.perf_counter() - t_run
        runs[scheme] = records
        (out / f"train_{scheme}.csv").write_text(records_to_csv(records))
        if any(r.diverged for r in records):
            diverged = True
    if not diverged:
        (out / "summary.csv").write_text(compare_runs(runs))
    timing["total_s"] = time.perf_counter() - t0
    _write_manifest(out, "train", args, doc, timing)
    if diverged and not args.allow_divergence:
        print("training diverged; records flagged", file=sys.stderr)
        return 3
    return 0


# ── selftest ────────────────────────────────────────────────────────────


def _check_micro_kernel(rng: np.random.Generator) -> None:
    for _ in range(300):
        a = rng.integers(-127, 128, (16, 16), dtype=np.int8)
        bt = rng.integers(-127, 128, (16, 16), dtype=np.int8)
        got = micro_mm_16(a, bt)
        want = a.astype(np.int64) @ bt.astype(np.int64)
        if not np.array_equal(got, want.astype(np.int32)):
            raise AssertionError("micro kernel disagrees with 64-bit oracle")


def _check_round_trip(rng: np.random.Generator) -> None:
    slack = 1.0 / 2.0 + 2.0**-10
    for name in _ERROR_SCHEMES:
        scheme = QuantScheme.from_name(name, 32)
        for _ in range(20):
            x = (rng.standard_normal((64, 64)) * 10 ** rng.uniform(-2, 2)).astype(
                np.float32
            )
            values, scales = quantize_with_scheme(x, scheme)
            back = dequantize_with_scheme(values, scales, scheme)
            if name == "per-block":
                bound = np.repeat(np.repeat(scales, 32, 0), 32, 1) * slack
            else:
                bound = np.broadcast_to(scales, x.shape) * slack
            if not np.all(np.abs(back - x) <= bound):
                raise AssertionError(f"round-trip bound violated for {name}")


def _check_gradients(rng: np.random.Generator) -> None:
    h = 1e-3
    x = rng.uniform(-4, 4, 100).astype(np.float64)
    fd = (gelu_f32(x + h) - gelu_f32(x - h)) / (2 * h)
    if np.abs(fd - gelu_grad_f32(x)).max() > 1e-4:
        raise AssertionError("activation gradient disagrees with finite differences")
    n, c = 4, 64
    xm = rng.standard_normal((n, c))
    gamma = rng.standard_normal(c)
    beta = rng.standard_normal(c)
    dy = rng.standard_normal((n, c))
    dx, _, _ = layernorm_grad_f32(xm, dy, gamma, 1e-5)
    for _ in range(40):
        i, j = rng.integers(0, n), rng.integers(0, c)
        bump = np.zeros_like(xm)
        bump[i, j] = h
        up = (layernorm_f32(xm + bump, gamma, beta, 1e-5) * dy).sum()
        dn = (layernorm_f32(xm - bump, gamma, beta, 1e-5) * dy).sum()
        if abs((up - dn) / (2 * h) - dx[i, j]) > 1e-4:
            raise AssertionError(
                "normalization gradient disagrees with finite differences"
            )


def _check_tiling(rng: np.random.Generator) -> None:
    xq = quantize_per_block(rng.standard_normal((128, 96)).astype(np.float32), 32)
    wq = quantize_per_block(rng.standard_normal((64, 96)).astype(np.float32), 32)
    outputs = []
    for cfg in (
        TileConfig(128, 32, 128),
        TileConfig(64, 32, 64),
        TileConfig(32, 32, 32),
    ):
        for threads in (1, 4):
            yq = block_mm_forward(xq, wq, cfg=cfg.clamped(128, 64), threads=threads)
            outputs.append((yq.values, yq.scales))
    v0, s0 = outputs[0]
    for values, scales in outputs[1:]:
        if not (np.array_equal(values, v0) and np.array_equal(scales, s0)):
            raise AssertionError("tiling or threading changed the output bits")


SELFTEST_CHECKS = [
    ("micro-kernel-oracle", _check_micro_kernel),
    ("round-trip-bounds", _check_round_trip),
    ("gradient-checks", _check_gradients),
    ("tiling-transparency", _check_tiling),
]


def run_selftest(seed: int, checks=None) -> list[dict]:
    report = []
    for index, (name, fn) in enumerate(checks or SELFTEST_CHECKS):
        rng = np.random.Generator(np.random.Philox(key=derive_seed(seed, index)))
        t0 = time.perf_counter()
        try:
            fn(rng)
            ok, detail = True, ""
        except AssertionError as err:
            ok, detail = False, str(err)
        report.append(
            {
                "name": name,
                "ok": ok,
                "duration_s": time.perf_counter() - t0,
                "detail": detail,
            }
        )
    return report


def cmd_selftest(args: argparse.Namespace, doc: dict | None) -> int:
    report = run_selftest(args.seed)
    for entry in report:
        status = "ok  " if entry["ok"] else "FAIL"
        line = f"{status} {entry['name']} ({entry['duration_s']:.2f}s)"
        if entry["detail"]:
            line += f": {entry['detail']}"
        print(line)
    if args.out:
        out = _prepare_out(args.out)
        (out / "selftest.json").write_text(json.dumps(report, indent=2) + "\n")
    return 0 if all(e["ok"] for e in report) else 4


# ── argument parsing and dispatch ───────────────────────────────────────


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="int8flow",
        description="INT8 data-flow training: error sweeps, counter "
        "benchmarks, toy training, and self tests.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, help_text in (
        ("quant-error", "quantization-error sweep over schemes and outliers"),
        ("bench", "operator benchmark with memory-access counter audit"),
        ("train", "toy training sweep across numeric schemes"),
        ("selftest", "run the core invariant battery"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, default=0, help="master seed (u64)")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads (never changes output bytes)")
        p.add_argument("--mode", choices=["int8", "qcd"],
                       help="restrict bench to one execution mode")
        p.add_argument(
            "--scheme",
            choices=["per-block", "per-token", "per-channel", "per-tensor", "fp32"],
            help="restrict a sweep to one quantization scheme",
        )
        p.add_argument("--block-size", type=int, help="override block size B")
        if name == "train":
            p.add_argument(
                "--allow-divergence",
                action="store_true",
                help="exit 0 even if a run diverges",
            )
    return parser


_DISPATCH = {
    "quant-error": cmd_quant_error,
    "bench": cmd_bench,
    "train": cmd_train,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.subcommand == "selftest":
            return cmd_selftest(args, None)
        if not args.config:
            raise ConfigError(f"{args.subcommand} requires --config")
        if not args.out:
            raise ConfigError(f"{args.subcommand} requires --out")
        doc = load_config(args.config)
        return _DISPATCH[args.subcommand](args, doc)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
