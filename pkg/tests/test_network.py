"""Tests for the gated feedforward network: forwards, gradients, serialization."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from dropscale.errors import DataFormatError, DimensionMismatchError
from dropscale.network import (DropoutGate, LayerSpec, Masked, NetworkParams,
                               Plain, Scaled, backprop_params, backprop_scale,
                               forward, head_forward, load_network,
                               save_network, trunk_forward,
                               validate_layer_specs)
from dropscale.tensor import RngStream, cross_entropy_batch
from dropscale.trainer import init_params

from conftest import small_net


def probe_head(w_row, bias):
    """Single linear layer with one output unit; gate on its input."""
    w = np.asarray(w_row, dtype=np.float64)[None, :]
    params = NetworkParams([w], [np.asarray([bias], dtype=np.float64)],
                           ("linear",))
    gate = DropoutGate(position=0, p=0.5, convention="classical")
    return params, gate


class TestSpecs:
    def test_bad_dims_rejected(self):
        with pytest.raises(ValueError):
            LayerSpec(0, 3, "relu")
        with pytest.raises(ValueError):
            LayerSpec(3, 3, "sigmoid")

    def test_chain_validation(self):
        with pytest.raises(DimensionMismatchError):
            validate_layer_specs([LayerSpec(4, 5, "relu"),
                                  LayerSpec(6, 2, "softmax")])

    def test_softmax_only_final(self):
        with pytest.raises(ValueError):
            validate_layer_specs([LayerSpec(4, 5, "softmax"),
                                  LayerSpec(5, 2, "softmax")])
        validate_layer_specs([LayerSpec(4, 5, "relu"),
                              LayerSpec(5, 2, "softmax")])

    def test_gate_validation(self):
        with pytest.raises(ValueError):
            DropoutGate(position=0, p=0.0)
        with pytest.raises(ValueError):
            DropoutGate(position=0, p=0.5, convention="other")
        with pytest.raises(ValueError):
            DropoutGate(position=-1, p=0.5)

    def test_gate_factors(self):
        classical = DropoutGate(position=0, p=0.25, convention="classical")
        inverted = DropoutGate(position=0, p=0.25, convention="inverted")
        assert classical.train_factor() == 1.0
        assert classical.uniform_scale() == 0.25
        assert classical.scale_upper_bound() == 1.0
        assert inverted.train_factor() == 4.0
        assert inverted.uniform_scale() == 1.0
        assert inverted.scale_upper_bound() == 4.0


class TestForward:
    def test_two_unit_linear_head_hand_values(self):
        params, gate = probe_head([1.0, 1.0], 0.0)
        x = np.array([2.0, 4.0])
        out1, _ = forward(params, gate, Masked(np.array([1.0, 0.0])), x)
        out2, _ = forward(params, gate, Masked(np.array([0.0, 1.0])), x)
        out3, _ = forward(params, gate, Scaled(np.array([0.5, 0.5])), x)
        assert_allclose(out1, [2.0], rtol=0, atol=0)
        assert_allclose(out2, [4.0], rtol=0, atol=0)
        assert_allclose(out3, [3.0], rtol=0, atol=0)

    def test_all_ones_mask_equals_plain_classical(self):
        params, gate = small_net(seed=5, convention="classical")
        x = RngStream(1).normals((6, 5))
        plain, _ = forward(params, gate, Plain(), x)
        masked, _ = forward(params, gate, Masked(np.ones(8)), x)
        assert_array_equal(plain, masked)

    def test_inverted_mask_applies_train_factor(self):
        params, gate = small_net(seed=5, p=0.5, convention="inverted")
        x = RngStream(2).normals(5)
        masked, _ = forward(params, gate, Masked(np.ones(8)), x)
        doubled, _ = forward(params, gate, Scaled(np.full(8, 2.0)), x)
        assert_array_equal(masked, doubled)

    def test_softmax_output_is_distribution(self):
        params, gate = small_net(seed=6)
        out, _ = forward(params, gate, Plain(), RngStream(3).normals((10, 5)))
        assert np.all(out >= 0.0)
        assert_allclose(out.sum(axis=1), 1.0, atol=1e-12, rtol=0)

    def test_batch_matches_single(self):
        # Matrix and vector operands can take different BLAS kernels,
        # so agreement is to rounding, not bitwise.
        params, gate = small_net(seed=7)
        X = RngStream(4).normals((5, 5))
        batch, _ = forward(params, gate, Plain(), X)
        for i in range(5):
            single, _ = forward(params, gate, Plain(), X[i])
            assert_allclose(batch[i], single, rtol=1e-14, atol=1e-16)

    def test_rejects_bad_shapes(self):
        params, gate = small_net()
        with pytest.raises(DimensionMismatchError):
            forward(params, gate, Plain(), np.ones(4))
        with pytest.raises(DimensionMismatchError):
            forward(params, gate, Masked(np.ones(3)), np.ones(5))
        with pytest.raises(DimensionMismatchError):
            forward(params, gate, Scaled(np.ones(3)), np.ones(5))

    def test_rejects_non_binary_mask(self):
        params, gate = small_net()
        with pytest.raises(ValueError):
            forward(params, gate, Masked(np.full(8, 0.5)), np.ones(5))

    def test_gate_position_out_of_range(self):
        params, _ = small_net()
        bad = DropoutGate(position=5, p=0.5)
        with pytest.raises(DimensionMismatchError):
            forward(params, bad, Plain(), np.ones(5))


class TestBackpropParams:
    def test_zero_gradient_at_one_hot(self):
        """If the softmax output already equals the label one-hot, the
        cross-entropy gradient vanishes."""
        w = np.array([[400.0, 0.0], [0.0, 400.0]])
        params = NetworkParams([w], [np.zeros(2)], ("softmax",))
        gate = DropoutGate(position=0, p=0.5, convention="classical")
        out, cache = forward(params, gate, Plain(), np.array([1.0, 0.0]))
        assert_allclose(out, [1.0, 0.0], atol=1e-15, rtol=0)
        dws, dbs = backprop_params(cache, np.array([0]))
        assert_allclose(dws[0], 0.0, atol=1e-12, rtol=0)
        assert_allclose(dbs[0], 0.0, atol=1e-12, rtol=0)

    def test_finite_difference_4_2_2(self):
        specs = [LayerSpec(4, 2, "relu"), LayerSpec(2, 2, "softmax")]
        params = init_params(specs, 12)
        gate = DropoutGate(position=1, p=0.5, convention="classical")
        X = RngStream(12).normals((3, 4))
        labels = np.array([0, 1, 0])
        _, cache = forward(params, gate, Plain(), X)
        dws, dbs = backprop_params(cache, labels)

        def loss():
            out, _ = forward(params, gate, Plain(), X)
            return float(cross_entropy_batch(out, labels).sum())

        step = 1e-6
        for li in range(2):
            for arr, grad in ((params.weights[li], dws[li]),
                              (params.biases[li], dbs[li])):
                it = np.nditer(arr, flags=["multi_index"])
                for _ in it:
                    ix = it.multi_index
                    old = arr[ix]
                    arr[ix] = old + step
                    up = loss()
                    arr[ix] = old - step
                    down = loss()
                    arr[ix] = old
                    fd = (up - down) / (2 * step)
                    if abs(fd) > 1e-7 or abs(grad[ix]) > 1e-7:
                        rel = abs(fd - grad[ix]) / max(abs(fd), abs(grad[ix]))
                        assert rel <= 1e-5

    def test_dropped_unit_has_zero_column_gradient(self):
        params, gate = small_net(seed=9, convention="classical")
        mask = np.ones(8)
        mask[2] = 0.0
        x = RngStream(5).normals(5)
        _, cache = forward(params, gate, Masked(mask), x)
        dws, _ = backprop_params(cache, np.array([1]))
        assert_array_equal(dws[1][:, 2], 0.0)

    def test_requires_softmax_output(self):
        params, gate = probe_head([1.0, 1.0], 0.0)
        _, cache = forward(params, gate, Plain(), np.array([1.0, 2.0]))
        with pytest.raises(ValueError):
            backprop_params(cache, np.array([0]))


class TestBackpropScale:
    def test_requires_scaled_cache(self):
        params, gate = small_net(seed=10)
        _, cache = forward(params, gate, Plain(), np.ones(5))
        with pytest.raises(ValueError):
            backprop_scale(cache, np.array([0]))

    def test_zero_gate_input_zero_gradient(self):
        params, gate = small_net(seed=11)
        x = np.zeros(5)  # relu trunk with zero biases gives a zero gate input
        _, cache = forward(params, gate, Scaled(np.full(8, 0.5)), x)
        ds = backprop_scale(cache, np.array([0]))
        assert_array_equal(ds, np.zeros(8))

    def test_finite_difference_8_unit_head(self):
        specs = [LayerSpec(5, 8, "relu"), LayerSpec(8, 3, "softmax")]
        params = init_params(specs, 15)
        gate = DropoutGate(position=1, p=0.5, convention="classical")
        X = RngStream(15).normals((4, 5))
        labels = np.array([0, 2, 1, 1])
        s = 0.4 + 0.2 * RngStream(16).uniforms(8)

        _, cache = forward(params, gate, Scaled(s), X)
        ds = backprop_scale(cache, labels).sum(axis=0)

        def loss(vec):
            out, _ = forward(params, gate, Scaled(vec), X)
            return float(cross_entropy_batch(out, labels).sum())

        step = 1e-6
        for k in range(8):
            up = s.copy()
            up[k] += step
            down = s.copy()
            down[k] -= step
            fd = (loss(up) - loss(down)) / (2 * step)
            if abs(fd) > 1e-7 or abs(ds[k]) > 1e-7:
                assert abs(fd - ds[k]) / max(abs(fd), abs(ds[k])) <= 1e-5

    def test_single_linear_unit_hand_gradient(self):
        """Head logit w*(s*z): moving s by eps moves the logit by w*z*eps."""
        params, gate = probe_head([2.0], 0.0)
        z = np.array([3.0])
        out0, _ = forward(params, gate, Scaled(np.array([0.5])), z)
        out1, _ = forward(params, gate, Scaled(np.array([0.5 + 1e-6])), z)
        assert_allclose((out1 - out0) / 1e-6, [6.0], rtol=1e-6)


class TestTrunkHeadSplit:
    def test_split_matches_full_forward_bitwise(self):
        params, gate = small_net(seed=20)
        X = RngStream(21).normals((7, 5))
        s = 0.3 + 0.5 * RngStream(22).uniforms(8)
        full, _ = forward(params, gate, Scaled(s), X)
        trunk = trunk_forward(params, gate, X)
        head = head_forward(params, gate, trunk * s)
        assert_array_equal(full, head)

    def test_log_head_matches_log_of_probs(self):
        params, gate = small_net(seed=23)
        trunk = trunk_forward(params, gate, RngStream(24).normals(5))
        probs = head_forward(params, gate, trunk)
        logs = head_forward(params, gate, trunk, return_log=True)
        assert_allclose(logs, np.log(probs), atol=1e-12, rtol=0)


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        params, gate = small_net(seed=30, convention="inverted", p=0.25)
        path = tmp_path / "model.net"
        save_network(path, params, gate)
        loaded, lgate = load_network(path)
        assert lgate == gate
        assert loaded.activations == params.activations
        for a, b in zip(loaded.weights, params.weights):
            assert_array_equal(a, b)
        for a, b in zip(loaded.biases, params.biases):
            assert_array_equal(a, b)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataFormatError, match="no such file"):
            load_network(tmp_path / "absent.net")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.net"
        path.write_bytes(b"NOTANET" + b"\x00" * 64)
        with pytest.raises(DataFormatError, match="bad magic"):
            load_network(path)

    def test_bad_version(self, tmp_path):
        params, gate = small_net(seed=31)
        path = tmp_path / "model.net"
        save_network(path, params, gate)
        raw = bytearray(path.read_bytes())
        raw[6] = 99  # version halfword follows the 6-byte magic
        path.write_bytes(bytes(raw))
        with pytest.raises(DataFormatError, match="version"):
            load_network(path)

    def test_trailing_bytes(self, tmp_path):
        params, gate = small_net(seed=32)
        path = tmp_path / "model.net"
        save_network(path, params, gate)
        path.write_bytes(path.read_bytes() + b"x")
        with pytest.raises(DataFormatError, match="trailing"):
            load_network(path)
