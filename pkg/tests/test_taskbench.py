import numpy as np
import pytest
from scipy import stats

from aflsim import taskbench as tb
from aflsim.numkit import RngStream


def train_full_gradient(model, ds, steps, lr):
    """Reference trainer oracle: plain full-gradient descent."""
    w = model.params.copy()
    for _ in range(steps):
        w = w - lr * tb.gradient(model.with_params(w), ds.features, ds.labels)
    return model.with_params(w)


def ols_fit(ds):
    """Closed-form least squares oracle returning a linear Model."""
    x = np.column_stack([ds.features, np.ones(len(ds))])
    coef, *_ = np.linalg.lstsq(x, ds.labels, rcond=None)
    return tb.Model("linear", ds.feature_dim, params=coef)


class TestGenClassification:
    def test_separable_data_trains_clean(self):
        ds = tb.gen_classification(2, 2, 200, 4.0, RngStream(0))
        model = train_full_gradient(tb.Model("softmax", 2, 2), ds, 500, 0.1)
        assert tb.test_error_rate(model, ds) <= 0.05

    def test_empty_request_rejected(self):
        with pytest.raises(ValueError):
            tb.gen_classification(3, 5, 0, 1.0, RngStream(0))

    def test_zero_separation_is_chance_level(self):
        ds = tb.gen_classification(2, 2, 100, 0.0, RngStream(3))
        # majority-vote oracle: no feature carries class information
        counts = np.bincount(ds.labels, minlength=2)
        majority_error = 1.0 - counts.max() / len(ds)
        assert abs(majority_error - 0.5) <= 0.07
        model = train_full_gradient(tb.Model("softmax", 2, 2), ds, 200, 0.1)
        test = tb.gen_classification(2, 2, 1000, 0.0, RngStream(4))
        assert abs(tb.test_error_rate(model, test) - 0.5) <= 0.07

    def test_balanced_labels(self):
        ds = tb.gen_classification(3, 5, 200, 1.0, RngStream(1))
        counts = np.bincount(ds.labels, minlength=3)
        assert counts.max() - counts.min() <= 1


class TestGenRegression:
    def test_noiseless_recovered_by_ols(self):
        ds = tb.gen_regression(4, 200, 0.0, RngStream(2))
        model = ols_fit(ds)
        assert tb.rmse(model, ds) <= 1e-6

    def test_two_points_define_line(self):
        ds = tb.gen_regression(1, 2, 0.0, RngStream(5))
        model = ols_fit(ds)
        assert tb.rmse(model, ds) <= 1e-8

    def test_noise_floor(self):
        sigma = 0.7
        pool = tb.gen_regression(3, 4000, sigma, RngStream(6))
        train, test = pool.subset(np.arange(2000)), pool.subset(np.arange(2000, 4000))
        model = ols_fit(train)
        assert 0.8 * sigma <= tb.rmse(model, test) <= 1.2 * sigma

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            tb.gen_regression(3, 0, 0.1, RngStream(0))


class TestPartitionNoniid:
    def test_every_sample_assigned_once(self):
        ds = tb.gen_classification(3, 5, 500, 1.0, RngStream(7))
        shards = tb.partition_noniid(ds, 9, 0.5, RngStream(8))
        assert sum(len(s) for s in shards) == len(ds)
        merged = np.sort(np.concatenate([s.features[:, 0] for s in shards]))
        assert np.allclose(merged, np.sort(ds.features[:, 0]))

    def test_x_one_is_degenerate(self):
        z = 4
        ds = tb.gen_classification(z, 6, 400, 1.0, RngStream(9))
        shards = tb.partition_noniid(ds, 8, 1.0, RngStream(10))
        for c, shard in enumerate(shards):
            assert np.all(shard.labels == c % z)

    def test_uniform_at_x_equal_inverse_z(self):
        z = 4
        ds = tb.gen_classification(z, 6, 5000, 1.0, RngStream(11))
        shards = tb.partition_noniid(ds, 8, 1.0 / z, RngStream(12))
        # label-by-group contingency versus uniform expectation
        counts = np.zeros((z, z))
        for c, shard in enumerate(shards):
            for q in range(z):
                counts[q, c % z] += np.sum(shard.labels == q)
        stat = 0.0
        for q in range(z):
            expected = counts[q].sum() / z
            stat += np.sum((counts[q] - expected) ** 2 / expected)
        assert stat < stats.chi2.ppf(0.99, z * (z - 1))

    def test_own_group_fraction_at_default_x(self):
        z, x = 10, 0.5
        ds = tb.gen_classification(z, 10, 10000, 1.0, RngStream(13))
        shards = tb.partition_noniid(ds, 20, x, RngStream(14))
        own = sum(np.sum(shard.labels == c % z) for c, shard in enumerate(shards))
        assert abs(own / len(ds) - x) <= 0.03

    def test_fewer_clients_than_groups(self):
        ds = tb.gen_classification(5, 6, 50, 1.0, RngStream(15))
        with pytest.raises(ValueError, match="fewer clients than groups"):
            tb.partition_noniid(ds, 4, 0.5, RngStream(16))


class TestGradient:
    def test_linear_hand_computed(self):
        model = tb.Model("linear", 1, params=[0.0, 0.0])
        g = tb.gradient(model, np.array([[1.0]]), np.array([2.0]))
        assert np.allclose(g, [-2.0, -2.0])

    def test_softmax_uniform_logits_bias_block(self):
        z, p = 4, 5
        model = tb.Model("softmax", p, z)
        c = 2
        g = tb.gradient(model, np.zeros((1, p)), np.array([c]))
        bias = g[p * z:]
        expected = np.full(z, 1.0 / z)
        expected[c] -= 1.0
        assert np.allclose(bias, expected)

    @pytest.mark.parametrize("arch,z", [("softmax", 3), ("linear", None)])
    def test_matches_finite_differences(self, arch, z):
        rng = RngStream(17)
        p = 4
        if arch == "softmax":
            ds = tb.gen_classification(z, p, 30, 1.0, rng)
        else:
            ds = tb.gen_regression(p, 30, 0.3, rng)
        model = tb.Model(arch, p, z)
        for trial in range(10):
            w = rng.normal(0.0, 1.0, model.dim)
            m = model.with_params(w)
            g = tb.gradient(m, ds.features, ds.labels)
            h = 1e-6
            fd = np.empty_like(g)
            for j in range(model.dim):
                e = np.zeros(model.dim)
                e[j] = h
                fd[j] = (tb.loss(model.with_params(w + e), ds.features, ds.labels)
                         - tb.loss(model.with_params(w - e), ds.features, ds.labels)) / (2 * h)
            assert np.linalg.norm(g - fd) <= 1e-5 * max(1.0, np.linalg.norm(fd))

    def test_vanishes_at_minimizer(self):
        ds = tb.gen_regression(3, 100, 0.0, RngStream(18))
        model = ols_fit(ds)
        g = tb.gradient(model, ds.features, ds.labels)
        assert np.linalg.norm(g) <= 1e-6

    def test_empty_batch_rejected(self):
        model = tb.Model("linear", 2)
        with pytest.raises(ValueError):
            tb.gradient(model, np.zeros((0, 2)), np.zeros(0))


class TestMetrics:
    def test_trained_model_on_own_training_set(self):
        ds = tb.gen_classification(3, 4, 300, 4.0, RngStream(19))
        model = train_full_gradient(tb.Model("softmax", 4, 3), ds, 400, 0.1)
        assert tb.test_error_rate(model, ds) <= 0.05

    def test_constant_zero_model_balanced_binary(self):
        ds = tb.gen_classification(2, 3, 400, 2.0, RngStream(20))
        model = tb.Model("softmax", 3, 2)  # all-zero params, argmax picks class 0
        err = tb.test_error_rate(model, ds)
        assert abs(err - 0.5) <= 0.07

    def test_error_rate_zero_when_all_correct(self):
        ds = tb.gen_classification(2, 2, 50, 8.0, RngStream(21))
        model = train_full_gradient(tb.Model("softmax", 2, 2), ds, 800, 0.2)
        preds = model.predict(ds.features)
        correct = ds.subset(preds == ds.labels)
        assert tb.test_error_rate(model, correct) == 0.0

    def test_error_plus_accuracy_is_one(self):
        ds = tb.gen_classification(3, 4, 200, 1.0, RngStream(22))
        model = tb.Model("softmax", 4, 3, params=RngStream(23).normal(0, 1, 15))
        err = tb.test_error_rate(model, ds)
        acc = np.mean(model.predict(ds.features) == ds.labels)
        assert err + acc == 1.0

    def test_rmse_perfect_and_constant(self):
        ds = tb.gen_regression(2, 100, 0.0, RngStream(24))
        assert tb.rmse(ols_fit(ds), ds) <= 1e-6
        c = 3.5
        const_ds = tb.Dataset(np.zeros((40, 2)), np.full(40, c), "regression")
        zero_model = tb.Model("linear", 2)
        assert tb.rmse(zero_model, const_ds) == pytest.approx(abs(c))

    def test_rmse_needs_regression(self):
        ds = tb.gen_classification(2, 2, 20, 1.0, RngStream(25))
        with pytest.raises(ValueError):
            tb.rmse(tb.Model("linear", 2), ds)


class TestTrigger:
    def test_embed_overwrites_listed_indices_only(self):
        trig = tb.TriggerSpec((0,), (9.0,), 1)
        out = tb.embed_trigger(np.array([1.0, 2.0]), trig)
        assert np.array_equal(out, [9.0, 2.0])

    def test_empty_indices_noop(self):
        trig = tb.TriggerSpec((), (), 0)
        x = np.array([1.0, 2.0, 3.0])
        assert np.array_equal(tb.embed_trigger(x, trig), x)

    def test_idempotent(self):
        trig = tb.TriggerSpec((1, 3), (5.0, -5.0), 0)
        x = np.arange(5, dtype=float)
        once = tb.embed_trigger(x, trig)
        assert np.array_equal(tb.embed_trigger(once, trig), once)

    def test_out_of_range_rejected(self):
        trig = tb.TriggerSpec((7,), (1.0,), 0)
        with pytest.raises(ValueError):
            tb.embed_trigger(np.zeros(3), trig)

    def test_duplicate_indices_rejected(self):
        with pytest.raises(ValueError):
            tb.TriggerSpec((1, 1), (2.0, 3.0), 0)

    def test_asr_of_backdoor_free_model_near_target_prior(self):
        z, p = 3, 6
        ds = tb.gen_classification(z, p, 3000, 3.0, RngStream(26))
        model = train_full_gradient(tb.Model("softmax", p, z), ds, 300, 0.1)
        trig = tb.TriggerSpec((p - 1,), (0.0,), 0)  # writes a typical value, no signal
        asr = tb.attack_success_rate(model, ds, trig)
        prior = np.mean(model.predict(ds.features[ds.labels != 0]) == 0)
        assert abs(asr - prior) <= 0.05

    def test_asr_of_fully_poisoned_model(self):
        z, p = 3, 6
        clean = tb.gen_classification(z, p, 600, 3.0, RngStream(27))
        trig = tb.TriggerSpec((p - 2, p - 1), (4.0, -4.0), 1)
        poisoned = tb.apply_trigger(clean, trig, relabel=True)
        both = tb.Dataset(np.vstack([clean.features, poisoned.features]),
                          np.concatenate([clean.labels, poisoned.labels]),
                          "classification", z)
        model = train_full_gradient(tb.Model("softmax", p, z), both, 600, 0.2)
        assert tb.attack_success_rate(model, clean, trig) >= 0.95

    def test_asr_undefined_when_all_target(self):
        ds = tb.Dataset(np.zeros((5, 3)), np.zeros(5, dtype=int), "classification", 2)
        trig = tb.TriggerSpec((0,), (1.0,), 0)
        with pytest.raises(ValueError, match="undefined ASR"):
            tb.attack_success_rate(tb.Model("softmax", 3, 2), ds, trig)


class TestCsv:
    def test_round_trip(self, tmp_path):
        ds = tb.gen_classification(3, 4, 50, 1.0, RngStream(28))
        path = tmp_path / "ds.csv"
        tb.save_csv(ds, path)
        back = tb.load_csv(path, "classification", 3)
        assert np.allclose(back.features, ds.features)
        assert np.array_equal(back.labels, ds.labels)
