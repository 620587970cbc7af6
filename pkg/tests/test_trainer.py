"""Tests for the toy training harness."""

from __future__ import annotations

import numpy as np
import pytest

from int8flow.trainer import (
    COMPARE_CSV_HEADER,
    TRAIN_CSV_HEADER,
    AdamW,
    CharLM,
    CopySequence,
    ToyModel,
    TrainConfig,
    TrainRecord,
    compare_runs,
    derive_seed,
    generate_task_data,
    make_sampler,
    records_to_csv,
    run_training,
)


@pytest.fixture
def corpus(tmp_path):
    rng = np.random.default_rng(1234)
    alphabet = b"abcdefghijklmnopqrstuvwxyz .,\n"
    text = bytes(alphabet[i] for i in rng.integers(0, len(alphabet), 6000))
    path = tmp_path / "corpus.txt"
    path.write_bytes(text)
    return path


# ── Test: task data generation ──────────────────────────────────────────


class TestTaskData:
    def test_fixed_seed_reproduces_first_batch_bytes(self):
        task = CopySequence(vocab=16, length=32)
        a = generate_task_data(task, seed=7, batch_size=4)[0]
        b = generate_task_data(task, seed=7, batch_size=4)[0]
        assert a[0].tobytes() == b[0].tobytes()
        c = generate_task_data(task, seed=8, batch_size=4)[0]
        assert a[0].tobytes() != c[0].tobytes()

    def test_copy_target_equals_input(self):
        x, y, mask = generate_task_data(CopySequence(16, 32), seed=0)[0]
        assert np.array_equal(x, y)
        assert mask.all()

    def test_vocab_bounds_respected(self):
        x, y, _ = generate_task_data(CopySequence(vocab=5, length=32), seed=3)[0]
        assert x.min() >= 0 and x.max() < 5

    def test_train_and_val_streams_differ(self):
        task = CopySequence(16, 32)
        train = generate_task_data(task, seed=0, val=False)[0]
        val = generate_task_data(task, seed=0, val=True)[0]
        assert not np.array_equal(train[0], val[0])

    def test_batch_padded_to_block_multiple(self):
        x, y, mask = generate_task_data(
            CopySequence(vocab=6, length=10), seed=0, batch_size=3, block=32
        )[0]
        n = x.shape[0] * x.shape[1]
        assert n % 32 == 0
        assert mask.sum() == 3 * 10
        assert not mask[:, 10:].any()

    def test_charlm_next_byte_shift(self, corpus):
        x, y, mask = generate_task_data(
            CharLM(corpus, context=32), seed=5, batch_size=4
        )[0]
        assert np.array_equal(x[:, 1:32], y[:, :31])
        assert mask.all()

    def test_charlm_vocab_counts_distinct_bytes(self, corpus):
        sampler = make_sampler(CharLM(corpus, context=32))
        assert sampler.vocab == len(set(corpus.read_bytes()))

    def test_charlm_missing_corpus(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            make_sampler(CharLM(tmp_path / "absent.txt", context=32))

    def test_unknown_task_type(self):
        with pytest.raises(TypeError):
            make_sampler("copy")


# ── Test: configuration ─────────────────────────────────────────────────


class TestTrainConfig:
    def test_defaults_and_hidden(self):
        cfg = TrainConfig()
        assert cfg.lr == 1.5e-4
        assert cfg.weight_decay == 0.1
        assert cfg.hidden == 256

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"scheme": "int4"},
            {"c_model": 48},
            {"c_model": 60, "block": 30, "heads": 7},
            {"steps": 0},
            {"lr": 0.0},
        ],
    )
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


# ── Test: optimizer ─────────────────────────────────────────────────────


class TestAdamW:
    def test_single_step_matches_closed_form(self):
        theta0 = 1.5
        lr, wd, eps = 0.01, 0.1, 1e-8
        p = {"w": np.array([theta0], dtype=np.float32)}
        opt = AdamW(p, lr, wd, eps=eps)
        g = theta0  # gradient of 0.5 * theta^2
        opt.step({"w": np.array([g], dtype=np.float32)})
        # bias-corrected first step: m_hat = g, v_hat = g^2
        expected = theta0 - lr * (g / (abs(g) + eps) + wd * theta0)
        assert abs(p["w"][0] - expected) <= 1e-6

    def test_decay_is_decoupled(self):
        lr, wd = 0.1, 0.5
        p = {"w": np.array([2.0], dtype=np.float32)}
        opt = AdamW(p, lr, wd)
        opt.step({"w": np.zeros(1, dtype=np.float32)})
        # zero gradient: only the decay term moves the parameter
        assert abs(p["w"][0] - 2.0 * (1 - lr * wd)) <= 1e-7

    def test_decay_keys_respected(self):
        p = {
            "w": np.array([2.0], dtype=np.float32),
            "b": np.array([2.0], dtype=np.float32),
        }
        opt = AdamW(p, lr=0.1, weight_decay=0.5, decay_keys={"w"})
        zero = {"w": np.zeros(1, np.float32), "b": np.zeros(1, np.float32)}
        opt.step(zero)
        assert p["w"][0] != 2.0
        assert p["b"][0] == 2.0


# ── Test: model ─────────────────────────────────────────────────────────


class TestToyModel:
    @pytest.mark.parametrize("scheme", ["fp32", "per-block"])
    def test_initial_loss_near_log_vocab(self, scheme):
        vocab = 64
        cfg = TrainConfig(scheme=scheme, seed=0, steps=1)
        model = ToyModel(cfg, vocab)
        x, y, mask = generate_task_data(
            CopySequence(vocab, 32), seed=0, batch_size=4
        )[0]
        loss = model.evaluate(x, y, mask)
        assert abs(loss - np.log(vocab)) / np.log(vocab) <= 0.05

    def test_initial_charlm_loss_near_log_vocab(self, corpus):
        sampler = make_sampler(CharLM(corpus, context=32))
        cfg = TrainConfig(scheme="fp32", seed=2, steps=1)
        model = ToyModel(cfg, sampler.vocab)
        x, y, mask = sampler.batch(2, 0, 4, 32, False)
        loss = model.evaluate(x, y, mask)
        assert abs(loss - np.log(sampler.vocab)) / np.log(sampler.vocab) <= 0.05

    def test_schemes_share_initialization(self):
        vocab = 32
        models = {
            s: ToyModel(TrainConfig(scheme=s, seed=4, steps=1), vocab)
            for s in ("fp32", "per-block", "per-tensor")
        }
        base = models["fp32"].params
        for name, model in models.items():
            assert sorted(model.params) == sorted(base)
            for key in base:
                assert np.array_equal(model.params[key], base[key]), (name, key)

    def test_outlier_gain_is_frozen_and_scheme_independent(self):
        cfg_a = TrainConfig(scheme="per-block", seed=9, outlier_gain=30.0, steps=1)
        cfg_b = TrainConfig(scheme="per-tensor", seed=9, outlier_gain=30.0, steps=1)
        ga = ToyModel(cfg_a, 16).gain
        gb = ToyModel(cfg_b, 16).gain
        assert np.array_equal(ga, gb)
        assert (ga == 30.0).sum() == max(1, round(0.01 * cfg_a.c_model))
        assert (ga == 1.0).sum() == cfg_a.c_model - 1
        other = ToyModel(
            TrainConfig(scheme="per-block", seed=10, outlier_gain=30.0, steps=1), 16
        ).gain
        assert other.sum() == ga.sum()  # same channel count, any position

    def test_grads_cover_every_parameter(self):
        cfg = TrainConfig(scheme="per-block", seed=1, steps=1, layers=1)
        model = ToyModel(cfg, 16)
        x, y, mask = generate_task_data(CopySequence(16, 32), seed=1, batch_size=4)[0]
        loss, grads = model.loss_and_grads(x, y, mask, dropout_seed=0)
        assert np.isfinite(loss)
        assert sorted(grads) == sorted(model.params)
        for key, g in grads.items():
            assert g.shape == model.params[key].shape, key

    def test_fp32_grads_match_finite_differences(self):
        vocab = 8
        cfg = TrainConfig(
            scheme="fp32", seed=6, steps=1, layers=1, c_model=32, heads=2,
            mlp_ratio=1, weight_decay=0.0,
        )
        model = ToyModel(cfg, vocab)
        x, y, mask = generate_task_data(
            CopySequence(vocab, 32), seed=6, batch_size=1
        )[0]
        _, grads = model.loss_and_grads(x, y, mask, dropout_seed=0)
        h = 1e-2
        rng = np.random.default_rng(0)
        for key in ("emb", "head.w", "block0.mlp1.w"):
            flat = model.params[key].reshape(-1)
            gflat = grads[key].reshape(-1)
            for ix in rng.choice(flat.size, size=8, replace=False):
                orig = flat[ix]
                flat[ix] = orig + h
                up = model.evaluate(x, y, mask)
                flat[ix] = orig - h
                down = model.evaluate(x, y, mask)
                flat[ix] = orig
                assert abs((up - down) / (2 * h) - gflat[ix]) <= 5e-4, key


# ── Test: training loop ─────────────────────────────────────────────────


class TestRunTraining:
    def _cfg(self, **kw):
        base = dict(
            steps=6, eval_every=2, eval_batches=1, batch_size=4, lr=1e-3,
            weight_decay=0.1, seed=0,
        )
        base.update(kw)
        return TrainConfig(**base)

    def test_records_on_eval_grid(self):
        recs = run_training(self._cfg(scheme="fp32", steps=10, eval_every=4),
                            CopySequence(16, 32))
        assert [r.step for r in recs] == [4, 8, 10]
        for r in recs:
            assert np.isfinite(r.val_loss) and np.isfinite(r.grad_norm)
            assert r.scheme == "fp32" and not r.diverged
        assert all(
            recs[i].wallclock <= recs[i + 1].wallclock for i in range(len(recs) - 1)
        )

    @pytest.mark.parametrize("scheme", ["fp32", "per-block", "per-tensor"])
    def test_rerun_is_bit_identical(self, scheme):
        task = CopySequence(16, 32)
        a = run_training(self._cfg(scheme=scheme), task)
        b = run_training(self._cfg(scheme=scheme), task)
        assert records_to_csv(a) == records_to_csv(b)

    def test_thread_count_never_changes_records(self):
        task = CopySequence(16, 32)
        one = run_training(self._cfg(scheme="per-block", threads=1), task)
        four = run_training(self._cfg(scheme="per-block", threads=4), task)
        assert records_to_csv(one) == records_to_csv(four)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_flags_and_halts(self):
        recs = run_training(
            self._cfg(scheme="per-block", lr=1e6, steps=50), CopySequence(16, 32)
        )
        assert recs[-1].diverged
        assert len(recs) < 50
        assert not np.isfinite(recs[-1].train_loss)

    def test_fp32_copy_task_converges_fast(self):
        cfg = TrainConfig(
            scheme="fp32", steps=150, eval_every=150, eval_batches=2,
            batch_size=8, lr=5e-4, weight_decay=0.1, seed=0,
        )
        recs = run_training(cfg, CopySequence(16, 32))
        assert recs[-1].val_loss < 0.1


# ── Test: record CSV ────────────────────────────────────────────────────


class TestRecordsCsv:
    def test_header_and_no_wallclock_column(self):
        rec = TrainRecord(10, 1.5, 1.25, 0.5, "fp32", wallclock=123.4)
        text = records_to_csv([rec])
        assert text.splitlines()[0] == TRAIN_CSV_HEADER
        assert "wallclock" not in text and "123" not in text
        assert text.splitlines()[1] == "10,1.500000,1.250000,0.500000,fp32,0"

    def test_diverged_flag_serialized(self):
        rec = TrainRecord(3, float("nan"), float("nan"), float("nan"), "per-block",
                          0.1, diverged=True)
        line = records_to_csv([rec]).splitlines()[1]
        assert line.endswith(",per-block,1")


# ── Test: run comparison ────────────────────────────────────────────────


def _rec(step, val, scheme="fp32"):
    return TrainRecord(step, 1.0, val, 1.0, scheme, 0.0)


class TestCompareRuns:
    def test_identical_runs_have_zero_gap(self):
        records = [_rec(2, 0.5), _rec(4, 0.25)]
        table = compare_runs({"a": records, "b": list(records)})
        lines = table.splitlines()
        assert lines[0] == COMPARE_CSV_HEADER
        assert lines[1] == "a,4,0.250000,0.250000,0.000000"
        assert lines[2] == "b,4,0.250000,0.250000,0.000000"

    def test_mismatched_grids_resampled_to_common_steps(self):
        a = [_rec(2, 0.8), _rec(4, 0.4), _rec(6, 0.2)]
        b = [_rec(2, 0.9), _rec(3, 0.7), _rec(4, 0.5)]
        lines = compare_runs({"a": a, "b": b}).splitlines()
        # common grid {2, 4}: final at step 4, best over the common grid
        assert lines[1] == "a,4,0.400000,0.400000,0.000000"
        assert lines[2] == "b,4,0.500000,0.500000,0.250000"

    def test_no_common_grid_raises(self):
        with pytest.raises(ValueError):
            compare_runs({"a": [_rec(2, 0.5)], "b": [_rec(3, 0.5)]})
        with pytest.raises(ValueError):
            compare_runs({})

    def test_derive_seed_is_stable(self):
        assert derive_seed(1, 2) == derive_seed(1, 2)
        assert derive_seed(1, 2) != derive_seed(2, 1)
        assert 0 <= derive_seed(2**63, 5) < 2**64
