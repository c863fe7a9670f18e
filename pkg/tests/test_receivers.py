"""Detector tests: threshold rules, analytic BER oracles at fixed channel,
and the CSI corruption model."""

import math

import numpy as np
import pytest
from scipy.special import erfc

from fsolc import nncore
from fsolc.compress import post_train_compress
from fsolc.receivers import (
    CsiErrorModel,
    ReceiverKind,
    corrupt_csi,
    detect_cnn,
    detect_ml_simo,
    detect_ml_siso,
)


def q_func(x):
    return 0.5 * erfc(x / math.sqrt(2.0))


def ml_siso_ber(h, sigma, n_symbols, seed):
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, size=n_symbols).astype(float)
    y = h * bits + rng.normal(0.0, sigma, size=n_symbols)
    pred = detect_ml_siso(y, h)
    return float(np.mean(pred != bits))


def ml_simo_ber(h, sigma, n_symbols, seed):
    rng = np.random.default_rng(seed)
    m = h.size
    bits = rng.integers(0, 2, size=n_symbols).astype(float)
    y = h[:, None] * bits[None, :] + rng.normal(0.0, sigma, size=(m, n_symbols))
    pred = detect_ml_simo(y, h)
    return float(np.mean(pred != bits))


class TestMlSiso:
    def test_received_equals_channel_decides_one(self):
        assert detect_ml_siso(np.array([2.0]), 2.0)[0] == 1.0

    def test_threshold_rule(self):
        y = np.array([0.49, 0.51, 1.2, -0.3])
        assert np.array_equal(detect_ml_siso(y, 1.0), [0.0, 1.0, 1.0, 0.0])

    @pytest.mark.parametrize("sigma", [0.8, 0.5, 0.35, 0.25, 0.18])
    def test_matches_gaussian_tail_at_fixed_channel(self, sigma):
        n = 1_000_000
        h = 1.0
        ber = ml_siso_ber(h, sigma, n, seed=hash(sigma) % 2 ** 31)
        expected = q_func(h / (2.0 * sigma))
        se = math.sqrt(expected * (1.0 - expected) / n)
        assert abs(ber - expected) < 3.0 * se

    def test_batched_thresholds(self):
        y = np.array([[0.4, 0.6], [0.9, 1.1]])
        h = np.array([1.0, 2.0])
        assert np.array_equal(detect_ml_siso(y, h), [[0.0, 1.0], [0.0, 1.0]])


class TestMlSimo:
    def test_single_antenna_reduces_to_siso(self):
        rng = np.random.default_rng(0)
        y = rng.normal(size=(1, 50)) + 0.5
        h = np.array([0.9])
        simo = detect_ml_simo(y, h)
        siso = detect_ml_siso(y[0], h[0])
        assert np.array_equal(simo, siso)

    def test_received_equals_channel_decides_one(self):
        h = np.array([0.5, 1.0, 0.25])
        assert np.all(detect_ml_simo(h[:, None], h) == 1.0)

    def test_matches_matched_filter_tail(self):
        h = np.array([0.7, 1.1, 0.4, 0.9])
        sigma = 0.6
        n = 1_000_000
        ber = ml_simo_ber(h, sigma, n, seed=7)
        expected = q_func(np.linalg.norm(h) / (2.0 * sigma))
        se = math.sqrt(expected * (1.0 - expected) / n)
        assert abs(ber - expected) < 3.0 * se

    def test_batched(self):
        rng = np.random.default_rng(1)
        y = rng.normal(size=(6, 3, 4))
        h = rng.uniform(0.5, 1.5, size=(6, 3))
        batched = detect_ml_simo(y, h)
        rows = np.stack([detect_ml_simo(y[k], h[k]) for k in range(6)])
        assert np.array_equal(batched, rows)


class TestCorruptCsi:
    def test_zero_error_is_identity(self):
        h = np.array([1.0, 2.0])
        out = corrupt_csi(h, CsiErrorModel(error_std=0.0), np.random.default_rng(0))
        assert np.array_equal(out, h)

    def test_relative_error_is_unbiased(self):
        rng = np.random.default_rng(1)
        h = np.full(100_000, 2.0)
        est = corrupt_csi(h, CsiErrorModel(error_std=0.2), rng)
        ratio = est / h
        assert abs(ratio.mean() - 1.0) < 3.0 * 0.2 / math.sqrt(h.size)

    def test_negative_draws_clamped_to_floor(self):
        rng = np.random.default_rng(2)
        h = np.full(10_000, 1.0)
        est = corrupt_csi(h, CsiErrorModel(error_std=5.0), rng)
        assert np.all(est >= 1e-6)
        assert np.any(est == 1e-6)  # huge error_std guarantees clamped draws

    def test_ber_rises_with_error_std(self):
        # fixed channel, moderate noise: bigger CSI error moves the threshold
        # off h/2 and costs errors, monotonically on average
        h, sigma, n = 1.0, 0.35, 200_000
        rng_data = np.random.default_rng(3)
        bits = rng_data.integers(0, 2, size=n).astype(float)
        y = h * bits + rng_data.normal(0.0, sigma, size=n)
        bers = []
        for error_std in (0.0, 0.2, 0.4, 0.8):
            rng = np.random.default_rng(4)
            h_est = corrupt_csi(np.full(n, h), CsiErrorModel(error_std), rng)
            pred = (y > h_est / 2.0).astype(float)
            bers.append(float(np.mean(pred != bits)))
        assert all(b2 > b1 - 1e-4 for b1, b2 in zip(bers, bers[1:]))
        assert bers[-1] > bers[0]

    def test_invalid_model_rejected(self):
        with pytest.raises(ValueError):
            CsiErrorModel(error_std=-0.1)
        with pytest.raises(ValueError):
            CsiErrorModel(mode="additive")


class TestDetectCnn:
    def test_tie_probability_decides_one(self):
        specs = [nncore.LayerSpec("dense", in_dim=4, out_dim=4), nncore.LayerSpec("sigmoid")]
        net = nncore.build_network(specs, seed=0)
        net.set_params({"dense1.kernel": np.zeros((4, 4)), "dense1.bias": np.zeros(4)})
        bits = detect_cnn(net, np.zeros(4))  # sigmoid(0) = 0.5 exactly
        assert np.all(bits == 1.0)

    def test_single_and_batched_agree(self):
        specs = nncore.siso_cnn_specs(5, filters=(3,), kernel_size=3)
        net = nncore.build_network(specs, seed=1)
        x = np.random.default_rng(2).normal(size=(4, 5))
        batched = detect_cnn(net, x)
        singles = np.stack([detect_cnn(net, x[k]) for k in range(4)])
        assert np.array_equal(batched, singles)

    def test_quantized_payload_works(self):
        specs = nncore.siso_cnn_specs(5, filters=(3,), kernel_size=3)
        net = nncore.build_network(specs, seed=3)
        model = post_train_compress(net, bits=2)
        x = np.random.default_rng(4).normal(size=(2, 5))
        got = detect_cnn(model, x)
        want = detect_cnn(model.to_network(), x)
        assert np.array_equal(got, want)

    def test_deterministic(self):
        specs = nncore.siso_cnn_specs(5, filters=(3,), kernel_size=3)
        net = nncore.build_network(specs, seed=5)
        x = np.random.default_rng(6).normal(size=(3, 5))
        assert np.array_equal(detect_cnn(net, x), detect_cnn(net, x))

    def test_noiseless_high_gain_block_recovered(self):
        # trained-free check: with an identity-like dense detector the
        # noiseless block at high gain maps through sigmoid(x) >= 0.5
        specs = [nncore.LayerSpec("dense", in_dim=6, out_dim=6), nncore.LayerSpec("sigmoid")]
        net = nncore.build_network(specs, seed=7)
        net.set_params({"dense1.kernel": np.eye(6), "dense1.bias": np.full(6, -1.0)})
        bits = np.array([1.0, 0.0, 1.0, 1.0, 0.0, 0.0])
        x = 3.0 * bits  # h = 3, no noise; dense gives 3s-1 or -1
        assert np.array_equal(detect_cnn(net, x), bits)

    def test_receiver_kind_validation(self):
        specs = [nncore.LayerSpec("dense", in_dim=2, out_dim=2)]
        net = nncore.build_network(specs, seed=8)
        ReceiverKind("cnn_full", net)
        ReceiverKind("ml_perfect_csi", CsiErrorModel(0.0))
        with pytest.raises(ValueError):
            ReceiverKind("cnn_full", CsiErrorModel(0.0))
        with pytest.raises(ValueError):
            ReceiverKind("ml_perfect_csi", net)
        with pytest.raises(ValueError):
            ReceiverKind("mystery", net)
