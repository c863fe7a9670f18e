"""Quantized-model container: exact decode and both on-disk formats."""

import numpy as np
import pytest

from fsolc import nncore
from fsolc.compress import post_train_compress
from fsolc.qmodel import QuantizedModel, pack_indices, unpack_indices


def small_quantized_model(seed=0, bits=2):
    specs = nncore.siso_cnn_specs(6, filters=(4, 4), kernel_size=3)
    net = nncore.build_network(specs, seed=seed)
    return net, post_train_compress(net, bits=bits)


class TestBitPacking:
    def test_roundtrip_widths(self):
        rng = np.random.default_rng(0)
        for width in (2, 3, 5):
            vals = rng.integers(0, 2 ** width, size=501)
            buf = pack_indices(vals, width)
            assert len(buf) == (501 * width + 7) // 8
            assert np.array_equal(unpack_indices(buf, width, 501), vals)

    def test_rejects_overflow(self):
        with pytest.raises(ValueError):
            pack_indices(np.array([4]), 2)


class TestQuantizedModel:
    def test_decode_reproduces_projection_exactly(self):
        net, model = small_quantized_model()
        for name, qt in model.quantized.items():
            decoded = model.decode()[name]
            assert decoded.shape == qt.shape
            values = qt.codebook.values
            assert np.array_equal(decoded.ravel(), values[qt.indices])

    def test_every_index_addresses_a_level(self):
        _, model = small_quantized_model()
        for qt in model.quantized.values():
            assert qt.indices.max() < len(qt.codebook)

    def test_binary_roundtrip_bit_exact(self, tmp_path):
        _, model = small_quantized_model(seed=3)
        path = tmp_path / "model.p2qm"
        model.save_binary(path)
        loaded = QuantizedModel.load_binary(path)
        assert loaded.bits == model.bits
        assert [s.to_dict() for s in loaded.arch] == [s.to_dict() for s in model.arch]
        for name, qt in model.quantized.items():
            lq = loaded.quantized[name]
            assert np.array_equal(lq.indices, qt.indices)
            assert np.array_equal(lq.codebook.values, qt.codebook.values)
            assert np.array_equal(loaded.decode()[name], model.decode()[name])
        for name, arr in model.raw.items():
            assert np.array_equal(loaded.raw[name], arr)

    def test_json_mirror_roundtrip(self, tmp_path):
        _, model = small_quantized_model(seed=4, bits=1)
        path = tmp_path / "model.json"
        model.save_json(path)
        loaded = QuantizedModel.load_json(path)
        for name in model.quantized:
            assert np.array_equal(loaded.decode()[name], model.decode()[name])

    def test_rejects_wrong_magic(self, tmp_path):
        path = tmp_path / "bogus.p2qm"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="not a quantized model"):
            QuantizedModel.load_binary(path)

    def test_to_network_runs_with_decoded_weights(self):
        net, model = small_quantized_model(seed=5)
        rebuilt = model.to_network()
        x = np.random.default_rng(1).normal(size=(3, 6))
        out = rebuilt.forward(x)
        assert out.shape == (3, 6)
        # the rebuilt network carries the quantized kernels, not the originals
        assert np.array_equal(rebuilt.params()["conv1d1.kernel"],
                              model.decode()["conv1d1.kernel"])

    def test_storage_rate_uses_quantized_tensors_only(self):
        _, model = small_quantized_model(seed=6, bits=1)
        p = model.param_count()
        layers = model.quantized_layer_count()
        expected = 32.0 * p / (2 * p + 2 * 17 * layers)
        assert abs(model.storage_compression_rate() - expected) < 1e-12
