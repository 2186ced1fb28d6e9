"""Training loop tests. The replay oracle reproduces the loop's RNG
consumption step by step and checks the committed parameters exactly."""

from dataclasses import replace

import numpy as np
import pytest

from metareweight.data import Dataset, NoiseSpec, corrupt_uniform_flip
from metareweight.errors import ConfigError
from metareweight.nn import (
    Batch,
    MLPModel,
    backward_per_example,
    forward,
    sgd_step,
    weighted_gradient,
)
from metareweight.trainer import TrainConfig, evaluate, train

from conftest import make_blobs


def blob_sets(seed=0, n_per=80, d=6, k=2):
    # One draw of blob centers, then disjoint slices, so train/val/test come
    # from the same distribution.
    rng = np.random.default_rng(seed)
    full = make_blobs(rng, n_per + 46, d, k)
    n_train, n_val = k * n_per, k * 6
    train = full.subset(np.arange(n_train))
    val = full.subset(np.arange(n_train, n_train + n_val))
    test = full.subset(np.arange(n_train + n_val, len(full)))
    assert np.unique(val.labels).size == k
    return train, val, test


def small_config(**kw):
    base = dict(
        strategy="uniform",
        learning_rate=0.05,
        batch_size_train=16,
        batch_size_val=4,
        total_steps=60,
        eval_every=20,
        hidden_sizes=(8,),
        include_val_in_train=False,
        seed=1,
    )
    base.update(kw)
    return TrainConfig(**base)


class TestConfigValidation:
    def test_good_config_passes(self):
        small_config().validate()

    @pytest.mark.parametrize(
        "kw",
        [
            {"strategy": "mystery"},
            {"learning_rate": 0.0},
            {"batch_size_train": 0},
            {"batch_size_val": 0},
            {"total_steps": 0},
            {"eval_every": 0},
            {"lr_schedule": [(5, 0.1), (5, 0.01)]},
            {"lr_schedule": [(5, -1.0)]},
            {"hard_mining_k": 0},
            {"hidden_sizes": ()},
            {"hidden_sizes": (0,)},
            {"activation": "softplus"},
        ],
    )
    def test_bad_configs_raise(self, kw):
        with pytest.raises(ConfigError):
            small_config(**kw).validate()


class TestTrainBasics:
    def test_uniform_learns_blobs(self):
        train_ds, val_ds, test_ds = blob_sets()
        result = train(small_config(total_steps=300), train_ds, val_ds, test_ds)
        assert result.final_test_error <= 0.2
        assert result.steps == 300

    def test_deterministic_bitwise(self):
        train_ds, val_ds, test_ds = blob_sets()
        cfg = small_config(strategy="meta_reweight")
        a = train(cfg, train_ds, val_ds, test_ds)
        b = train(cfg, train_ds, val_ds, test_ds)
        assert np.array_equal(a.model.flatten(), b.model.flatten())
        assert len(a.records) == len(b.records)
        for ra, rb in zip(a.records, b.records):
            for x, y in zip(ra.csv_row(), rb.csv_row()):
                assert x == y or (np.isnan(x) and np.isnan(y))

    def test_metrics_cadence(self):
        train_ds, val_ds, test_ds = blob_sets()
        result = train(small_config(total_steps=120, eval_every=50), train_ds, val_ds, test_ds)
        assert [r.step for r in result.records] == [50, 100, 120]

    def test_work_counters_exact(self):
        train_ds, val_ds, test_ds = blob_sets()
        uni = train(small_config(), train_ds, val_ds, test_ds)
        assert uni.forward_examples == 60 * 16
        assert uni.backward_examples == 60 * 16
        meta = train(small_config(strategy="meta_reweight"), train_ds, val_ds, test_ds)
        assert meta.forward_examples == 60 * (16 + 4)
        assert meta.work_units == 2 * 60 * 20

    def test_uniform_weight_stats(self):
        train_ds, val_ds, test_ds = blob_sets()
        result = train(small_config(), train_ds, val_ds, test_ds)
        for r in result.records:
            assert r.mean_w_clean == pytest.approx(1.0 / 16, abs=0)
            assert r.frac_zero_w == 0.0
            assert np.isnan(r.mean_w_flipped)  # no corrupted examples exist

    def test_corrupted_val_rejected(self):
        train_ds, val_ds, test_ds = blob_sets()
        rng = np.random.default_rng(3)
        bad_val = corrupt_uniform_flip(val_ds, NoiseSpec("uniform_flip", 1.0, num_classes=2), rng)
        with pytest.raises(ConfigError):
            train(small_config(), train_ds, bad_val, test_ds)

    def test_meta_requires_validation(self):
        train_ds, _val_ds, test_ds = blob_sets()
        empty = train_ds.subset(np.empty(0, dtype=np.int64))
        with pytest.raises(ConfigError):
            train(small_config(strategy="meta_reweight"), train_ds, empty, test_ds)

    def test_empty_train_rejected(self):
        train_ds, val_ds, test_ds = blob_sets()
        empty = train_ds.subset(np.empty(0, dtype=np.int64))
        with pytest.raises(ConfigError):
            train(small_config(), empty, val_ds, test_ds)

    def test_all_strategies_run(self):
        train_ds, val_ds, test_ds = blob_sets()
        for strategy in ("uniform", "meta_reweight", "proportion", "resample", "hard_mining", "random"):
            result = train(small_config(strategy=strategy, total_steps=10), train_ds, val_ds, test_ds)
            assert len(result.records) >= 1
            assert np.isfinite(result.model.flatten()).all()


class TestReplayOracle:
    def _replay_uniform(self, cfg, train_ds):
        """Reference loop: same RNG stream, explicit batch draw and update."""
        rng = np.random.default_rng(cfg.seed)
        model = MLPModel.init(
            [train_ds.images.shape[1], *cfg.hidden_sizes, 2], activation=cfg.activation, rng=rng
        )
        n = cfg.batch_size_train
        for t in range(cfg.total_steps):
            alpha = cfg.learning_rate
            for boundary, mult in cfg.lr_schedule:
                if t >= boundary:
                    alpha = cfg.learning_rate * mult
            idx = rng.choice(len(train_ds), size=n, replace=False)
            batch = Batch(train_ds.images[idx], train_ds.labels[idx])
            grads = backward_per_example(model, forward(model, batch), batch)
            model = sgd_step(model, weighted_gradient(grads, np.full(n, 1.0 / n)), alpha)
        return model

    def test_uniform_steps_match_reference(self):
        train_ds, val_ds, test_ds = blob_sets()
        cfg = small_config(total_steps=5, eval_every=5)
        result = train(cfg, train_ds, val_ds, test_ds)
        want = self._replay_uniform(cfg, train_ds)
        assert np.array_equal(result.model.flatten(), want.flatten())

    def test_lr_schedule_applied(self):
        train_ds, val_ds, test_ds = blob_sets()
        cfg = small_config(total_steps=6, eval_every=6, lr_schedule=[(3, 0.1)])
        result = train(cfg, train_ds, val_ds, test_ds)
        want = self._replay_uniform(cfg, train_ds)
        assert np.array_equal(result.model.flatten(), want.flatten())
        # And the schedule must actually change the outcome.
        plain = self._replay_uniform(small_config(total_steps=6, eval_every=6), train_ds)
        assert not np.array_equal(result.model.flatten(), plain.flatten())


class TestValidationFolding:
    def test_val_examples_enter_training_pool(self):
        train_ds, val_ds, test_ds = blob_sets(n_per=10)
        # With include_val_in_train the pool is larger than the train set, so
        # a full-pool batch must be able to exceed len(train).
        cfg = small_config(
            batch_size_train=len(train_ds) + len(val_ds),
            total_steps=2,
            eval_every=2,
            include_val_in_train=True,
        )
        result = train(cfg, train_ds, val_ds, test_ds)
        assert result.forward_examples == 2 * (len(train_ds) + len(val_ds))

    def test_meta_sees_identical_pool(self):
        # meta_reweight gets no extra examples: pool goes from train+val for
        # both strategies; only the weighting differs.
        train_ds, val_ds, test_ds = blob_sets()
        cfg_uni = small_config(include_val_in_train=True)
        cfg_meta = small_config(strategy="meta_reweight", include_val_in_train=True)
        uni = train(cfg_uni, train_ds, val_ds, test_ds)
        meta = train(cfg_meta, train_ds, val_ds, test_ds)
        assert meta.forward_examples - uni.forward_examples == 60 * 4


class TestHardMiningDefaults:
    def test_no_minority_batch_is_noop(self):
        # A single-class dataset means k defaults to 0 and nothing is kept,
        # so the update degenerates to a zero step and parameters hold still.
        rng = np.random.default_rng(9)
        images = rng.random((40, 4))
        ds = Dataset(images, np.zeros(40, dtype=int))
        test = Dataset(rng.random((10, 4)), np.zeros(10, dtype=int))
        # Include one example of class 1 in test so the model has 2 outputs.
        test.labels[0] = 1
        cfg = small_config(strategy="hard_mining", total_steps=3, eval_every=3, batch_size_train=8)
        result = train(cfg, ds, ds.subset(np.arange(4)), test)
        init_rng = np.random.default_rng(cfg.seed)
        init = MLPModel.init([4, *cfg.hidden_sizes, 2], rng=init_rng)
        assert np.array_equal(result.model.flatten(), init.flatten())

    def test_explicit_k_used(self):
        train_ds, val_ds, test_ds = blob_sets()
        result = train(
            small_config(strategy="hard_mining", hard_mining_k=4, total_steps=20),
            train_ds,
            val_ds,
            test_ds,
        )
        # Weights are indicator/|sel|; with both classes present some examples
        # must be zero-weighted.
        assert result.records[-1].frac_zero_w > 0


class TestEarlyStopping:
    def test_needs_hyperval(self):
        train_ds, val_ds, test_ds = blob_sets()
        with pytest.raises(ConfigError):
            train(small_config(early_stop_on_hyperval=True), train_ds, val_ds, test_ds)

    def test_returns_best_snapshot_consistently(self):
        train_ds, val_ds, test_ds = blob_sets()
        hyper = make_blobs(np.random.default_rng(8), 30, 6, 2)
        cfg = small_config(early_stop_on_hyperval=True, total_steps=100, eval_every=10)
        result = train(cfg, train_ds, val_ds, test_ds, hyper)
        err, _ = evaluate(result.model, test_ds)
        assert err == result.final_test_error
        best_recorded = min(r.hyperval_error for r in result.records)
        final_err, _ = evaluate(result.model, hyper)
        assert final_err == pytest.approx(best_recorded, abs=0)


class TestEvaluate:
    def test_exact_error_count(self):
        # Identity logits: prediction equals the argmax of the input row.
        model = MLPModel([np.vstack([np.eye(3), np.zeros(3)])])
        images = np.eye(3)[[0, 1, 2, 0]]
        labels = np.array([0, 1, 0, 0])  # third example is wrong on purpose
        err, loss = evaluate(model, Dataset(images, labels))
        assert err == 0.25
        assert loss > 0

    def test_chunking_invariant(self):
        rng = np.random.default_rng(12)
        ds = make_blobs(rng, 70, 5, 3)
        model = MLPModel.init([5, 6, 3], rng=rng)
        a = evaluate(model, ds, chunk=7)
        b = evaluate(model, ds, chunk=1000)
        assert a[0] == b[0]
        assert a[1] == pytest.approx(b[1], rel=1e-12)

    def test_empty_rejected(self):
        model = MLPModel.init([3, 2])
        with pytest.raises(ConfigError):
            evaluate(model, Dataset(np.zeros((0, 3)), np.zeros(0, dtype=int)))


class TestWeightLog:
    def test_last_window_recorded(self):
        train_ds, val_ds, test_ds = blob_sets()
        cfg = small_config(total_steps=50, eval_every=10)
        result = train(cfg, train_ds, val_ds, test_ds)
        log = result.weight_log
        assert set(np.unique(log["step"])) == set(range(40, 50))
        assert log["weight"].size == 10 * 16
        assert log["weight"].min() >= 0
