import math

import numpy as np
import pytest

from rgwnet.errors import ConfigError, DataError, ShapeError, TrainingError
from rgwnet.network import (
    Adam,
    EvalReport,
    TrainConfig,
    _backward_batch,
    _forward_batch,
    _mean_loss,
    build_baseline,
    build_network,
    cross_validate_arrays,
    evaluate,
    fit,
    forward,
    front_end_scalar_count,
    load_checkpoint,
    loss,
    net_parameters,
    save_checkpoint,
    train_step,
)


def tiny_config(**kw):
    defaults = dict(epochs=2, batch_size=4, q=2, kernel_length=8, m=2, p=1,
                    n=2, hidden=3, seed=3)
    defaults.update(kw)
    return TrainConfig(**defaults)


class TestForward:
    def test_softmax_sums_to_one(self):
        config = tiny_config()
        net = build_network("wknn", config, 3, 64, rng=1)
        probs = forward(net, np.random.default_rng(0).standard_normal(64))
        assert probs.shape == (3,)
        assert abs(probs.sum() - 1.0) <= 1e-9

    def test_uniform_logits_give_uniform_probabilities(self):
        config = tiny_config()
        net = build_network("wknn", config, 3, 64, rng=1)
        net.w1[:] = 0.0
        net.b1[:] = 0.0
        net.w2[:] = 0.0
        net.b2[:] = 0.0
        probs = forward(net, np.random.default_rng(0).standard_normal(64))
        assert np.allclose(probs, [1 / 3, 1 / 3, 1 / 3], atol=1e-12)

    def test_sigmoid_output_in_unit_interval(self):
        config = tiny_config()
        net = build_network("wknn", config, 2, 64, rng=1)
        probs = forward(net, np.random.default_rng(0).standard_normal(64))
        assert probs.shape == (1,)
        assert 0.0 <= probs[0] <= 1.0

    def test_matches_hand_stepped_oracle(self):
        # m=2, Q=2, hidden=3, 2 classes; every layer recomputed with plain loops
        config = tiny_config(std_mode="std")
        net = build_network("wknn", config, 2, 12, rng=7)
        rng = np.random.default_rng(41)
        segment = rng.standard_normal(12)
        probs = forward(net, segment)

        from rgwnet.wavelet import sample_kernel
        rows = []
        for k in range(2):
            taps = sample_kernel(net.params, k, 8).values
            row = [sum(segment[tau + j] * taps[7 - j] for j in range(8))
                   for tau in range(5)]
            rows.append(row)
        rows = np.array(rows)
        centered = rows - rows.mean(axis=1, keepdims=True)
        std = np.sqrt((centered ** 2).mean(axis=1, keepdims=True))
        standardized = centered / std
        pooled = []
        for row in standardized:
            mags = sorted(((abs(v), i) for i, v in enumerate(row)),
                          key=lambda t: (-t[0], t[1]))[:2]
            pooled.extend(v for v, _ in mags)
        x = np.maximum(np.array(pooled), 0.0)
        h = np.maximum(net.w1 @ x + net.b1, 0.0)
        logit = float(net.w2 @ h + net.b2)
        expected = 1.0 / (1.0 + math.exp(-logit))
        assert probs[0] == pytest.approx(expected, abs=1e-10)

    def test_shape_mismatch(self):
        net = build_network("wknn", tiny_config(), 2, 64, rng=1)
        with pytest.raises(ShapeError):
            forward(net, np.zeros(65))

    def test_baselines_match_layerwise_recomputation(self):
        rng = np.random.default_rng(2)
        segment = rng.standard_normal(32)
        fcnn = build_baseline("fcnn", tiny_config(), 2, 32, rng=5)
        x = np.maximum(segment, 0.0)
        h = np.maximum(fcnn.w1 @ x + fcnn.b1, 0.0)
        expected = 1.0 / (1.0 + math.exp(-float(fcnn.w2 @ h + fcnn.b2)))
        assert forward(fcnn, segment)[0] == pytest.approx(expected, abs=1e-10)

        cnn = build_baseline("cnn", tiny_config(std_mode="std"), 2, 32, rng=5)
        rows = []
        for taps in cnn.kernels:
            row = [sum(segment[tau + j] * taps[7 - j] for j in range(8))
                   for tau in range(25)]
            rows.append(row)
        rows = np.array(rows)
        centered = rows - rows.mean(axis=1, keepdims=True)
        standardized = centered / np.sqrt((centered ** 2).mean(axis=1, keepdims=True))
        pooled = []
        for row in standardized:
            mags = sorted(((abs(v), i) for i, v in enumerate(row)),
                          key=lambda t: (-t[0], t[1]))[:2]
            pooled.extend(v for v, _ in mags)
        x = np.maximum(np.array(pooled), 0.0)
        h = np.maximum(cnn.w1 @ x + cnn.b1, 0.0)
        expected = 1.0 / (1.0 + math.exp(-float(cnn.w2 @ h + cnn.b2)))
        assert forward(cnn, segment)[0] == pytest.approx(expected, abs=1e-10)


class TestLoss:
    def test_perfect_prediction_zero_loss(self):
        assert loss([0.0, 1.0, 0.0], 1) == pytest.approx(0.0, abs=1e-9)

    def test_binary_half_is_ln2(self):
        assert loss([0.5], 0) == pytest.approx(math.log(2), abs=1e-12)
        assert loss([0.5], 1) == pytest.approx(math.log(2), abs=1e-12)

    def test_multiclass_value(self):
        assert loss([0.2, 0.3, 0.5], 2) == pytest.approx(0.6931471805599453,
                                                         abs=1e-12)

    def test_floor_keeps_loss_finite(self):
        assert np.isfinite(loss([0.0, 1.0], 0))
        assert loss([1.0], 0) > 0


class TestAdam:
    def test_zero_learning_rate_keeps_parameters(self):
        net = build_network("wknn", tiny_config(), 2, 64, rng=1)
        before = {k: v.copy() for k, v in net_parameters(net).items()}
        opt = Adam(learning_rate=0.0)
        rng = np.random.default_rng(0)
        train_step(net, rng.standard_normal((4, 64)), np.array([0, 1, 0, 1]), opt)
        for key, value in net_parameters(net).items():
            assert np.array_equal(value, before[key]), key

    def test_matches_hand_computed_trajectory(self):
        # f(x) = x^2/2 so grad = x; three steps from x0 = 1 at lr 0.1;
        # expected iterates frozen from a 50-digit mpmath replay of the rule
        params = {"x": np.array([1.0])}
        opt = Adam(learning_rate=0.1)
        expected = [0.90000000099999999, 0.80041222971233739, 0.70158627450441421]
        for step_expected in expected:
            opt.step(params, {"x": params["x"].copy()})
            assert params["x"][0] == pytest.approx(step_expected, abs=1e-12)

    def test_separable_toy_reaches_full_accuracy(self):
        # linearly separable 2-D points (margin 0.15), no front end, 200 steps
        rng = np.random.default_rng(6)
        x = rng.uniform(0.0, 1.0, size=(200, 2))
        x = x[np.abs(x[:, 0] - x[:, 1]) > 0.15][:64]
        y = (x[:, 0] > x[:, 1]).astype(np.int64)
        config = TrainConfig(epochs=1, batch_size=64, hidden=16, seed=0,
                             kernel_length=2, q=1, m=1, n=1)
        net = build_network("fcnn", config, 2, 2, rng=0)
        opt = Adam(config.learning_rate)
        for _ in range(200):
            train_step(net, x, y, opt)
        assert evaluate(net, x, y)[0] == 1.0

    def test_non_finite_loss_raises_with_batch_index(self):
        net = build_network("fcnn", tiny_config(), 2, 4, rng=1)
        net.w1[:] = np.nan
        with pytest.raises(TrainingError) as err:
            train_step(net, np.ones((2, 4)), np.array([0, 1]), Adam(), batch_index=7)
        assert err.value.batch_index == 7


class TestGradients:
    def test_end_to_end_gradcheck_all_parameters(self):
        # tiny WK-NN: every learnable scalar vs central finite differences
        rng = np.random.default_rng(12)
        worst = 0.0
        for draw in range(5):
            config = TrainConfig(epochs=1, batch_size=4, q=4, kernel_length=16,
                                 m=3, p=1, n=3, hidden=8, seed=100 + draw)
            net = build_network("wknn", config, 2, 256, rng=100 + draw)
            x = rng.standard_normal((3, 256))
            y = np.array([0, 1, 1])
            probs, cache = _forward_batch(net, x, want_cache=True)
            grads = _backward_batch(net, cache, y)
            tensors = net_parameters(net)
            step = 1e-5
            for key, arr in tensors.items():
                fd = np.zeros_like(arr)
                it = np.nditer(arr, flags=["multi_index"])
                for _ in it:
                    idx = it.multi_index
                    saved = arr[idx]
                    arr[idx] = saved + step
                    up = _mean_loss(_forward_batch(net, x), y)
                    arr[idx] = saved - step
                    down = _mean_loss(_forward_batch(net, x), y)
                    arr[idx] = saved
                    fd[idx] = (up - down) / (2 * step)
                denom = max(np.max(np.abs(fd)), 1e-8)
                rel = np.max(np.abs(grads[key] - fd)) / denom
                worst = max(worst, rel)
                assert rel <= 1e-4, (key, rel)
        assert worst <= 1e-4

    def test_weights_stay_finite_under_aggressive_training(self):
        rng = np.random.default_rng(0)
        config = tiny_config(learning_rate=0.5, epochs=1)
        net = build_network("wknn", config, 2, 64, rng=9)
        opt = Adam(config.learning_rate)
        x = rng.standard_normal((16, 64))
        y = rng.integers(0, 2, 16)
        for step in range(25):
            train_step(net, x, y, opt, grad_clip=config.grad_clip)
        for key, value in net_parameters(net).items():
            assert np.all(np.isfinite(value)), key
        assert np.all(np.abs(net.params.poles[:, 1]) >= 1e-3)


class TestParameterCounts:
    def test_wknn_front_end_count_independent_of_kernel_length(self):
        for length in (16, 32, 64):
            config = TrainConfig(kernel_length=length, seed=0)
            net = build_network("wknn", config, 2, 800, rng=0)
            assert front_end_scalar_count(net) == 1 + 2 * 10 + 10 == 31

    def test_cnn_front_end_is_tap_count(self):
        config = TrainConfig(kernel_length=32, seed=0)
        cnn = build_baseline("cnn", config, 2, 800, rng=0)
        assert front_end_scalar_count(cnn) == 10 * 32 == 320

    def test_fcnn_hidden_width_is_segment_length(self):
        net = build_baseline("fcnn", TrainConfig(seed=0), 2, 321, rng=0)
        assert net.w1.shape == (200, 321)

    def test_baseline_kind_checked(self):
        with pytest.raises(ConfigError):
            build_baseline("wknn", TrainConfig(seed=0), 2, 100, rng=0)


class TestCrossValidation:
    def make_toy(self, count=60, length=32, seed=0):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((count, length))
        y = (np.arange(count) % 2).astype(np.int64)
        x[y == 1] += 3.0
        return x, y

    def test_accuracy_formula(self):
        predictions = np.array([1, 0, 1, 1])
        labels = np.array([1, 1, 1, 0])
        accuracy = float((predictions == labels).mean())
        assert accuracy == 0.5

    def test_deterministic_reports(self):
        x, y = self.make_toy()
        config = tiny_config(epochs=2, folds=3)
        first = cross_validate_arrays(x, y, 2, config, "fcnn")
        second = cross_validate_arrays(x, y, 2, config, "fcnn")
        assert first.fold_accuracies == second.fold_accuracies
        for a, b in zip(first.confusions, second.confusions):
            assert np.array_equal(a, b)

    def test_report_invariants(self):
        x, y = self.make_toy()
        report = cross_validate_arrays(x, y, 2, tiny_config(folds=3), "fcnn")
        assert report.min_accuracy <= report.mean_accuracy <= report.max_accuracy
        assert all(0.0 <= a <= 1.0 for a in report.fold_accuracies)
        assert len(report.confusions) == 3
        assert all(c.sum() == len(y) - int(0.8 * len(y)) for c in report.confusions)

    def test_empty_class_rejected(self):
        x = np.zeros((10, 8))
        y = np.zeros(10, dtype=np.int64)
        with pytest.raises(DataError):
            cross_validate_arrays(x, y, 2, tiny_config(), "fcnn")

    def test_too_small_dataset_rejected(self):
        x = np.zeros((6, 8))
        y = np.array([0, 1, 0, 1, 0, 1])
        with pytest.raises(DataError):
            cross_validate_arrays(x, y, 2, tiny_config(folds=5), "fcnn")

    def test_parallel_folds_match_serial(self):
        x, y = self.make_toy(count=40, length=16)
        config = tiny_config(epochs=1, folds=2)
        serial = cross_validate_arrays(x, y, 2, config, "fcnn", jobs=1)
        parallel = cross_validate_arrays(x, y, 2, config, "fcnn", jobs=2)
        assert serial.fold_accuracies == parallel.fold_accuracies

    def test_perfect_constant_dataset(self):
        # trivially separable constant-level classes (nonnegative so the input
        # ReLU passes them through)
        rng = np.random.default_rng(5)
        x = np.concatenate([np.full((30, 16), 0.2), np.full((30, 16), 1.0)])
        x += 0.01 * rng.standard_normal(x.shape)
        y = np.array([0] * 30 + [1] * 30)
        # hidden wide enough that an all-dead-ReLU start is impossible in practice
        report = cross_validate_arrays(
            x, y, 2, tiny_config(epochs=30, folds=2, hidden=16), "fcnn")
        assert report.fold_accuracies == [1.0, 1.0]

    def test_evalreport_from_folds(self):
        report = EvalReport.from_folds([0.5, 1.0], [np.eye(2), np.eye(2)])
        assert report.mean_accuracy == 0.75
        assert report.min_accuracy == 0.5
        assert report.max_accuracy == 1.0


class TestCheckpoint:
    @pytest.mark.parametrize("kind", ["wknn", "cnn", "fcnn"])
    def test_round_trip_identical_forward(self, tmp_path, kind):
        config = tiny_config()
        net = build_network(kind, config, 3, 48, rng=21)
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 48))
        path = tmp_path / "model.npz"
        save_checkpoint(path, net, config)
        loaded, config_echo, seed = load_checkpoint(path)
        assert seed == config.seed
        assert config_echo == config
        before = _forward_batch(net, x)
        after = _forward_batch(loaded, x)
        assert np.array_equal(before, after)

    def test_unknown_version_rejected(self, tmp_path):
        config = tiny_config()
        net = build_network("fcnn", config, 2, 16, rng=0)
        path = tmp_path / "model.npz"
        save_checkpoint(path, net, config)
        data = dict(np.load(path, allow_pickle=False))
        data["version"] = np.int64(99)
        np.savez(path, **data)
        with pytest.raises(ConfigError):
            load_checkpoint(path)
