"""Layer semantics: gated/partial conv behavior, mask updates, spectral norm."""

import numpy as np
import numpy.testing as npt
import pytest

from gfill.layers import (
    GatedConv,
    PartialConv,
    SpectralNormState,
    VanillaConv,
    init_layer,
    propagate_mask,
    spectral_normalize,
)
from gfill.tensor import ConvGeometry, Tensor, conv2d, grad_check, mul, reduce_mean, reduce_sum, sigmoid

from oracles import conv2d_loops, dilate_valid_set, partial_conv_loops, top_singular_value_power


def geom3(pad=1, stride=1, dilation=1):
    return ConvGeometry(kernel=(3, 3), stride=stride, dilation=dilation, padding=pad)


def make_gated(rng, cin=3, cout=4, dtype=np.float32, **kw):
    return init_layer("gated", cout, cin, geom3(), rng, dtype=dtype, **kw)


class TestGatedConv:
    def test_zero_gating_gives_half_feature(self):
        rng = np.random.default_rng(0)
        layer = make_gated(rng)
        layer.w_g.data[:] = 0.0
        layer.b_g.data[:] = 0.0
        x = Tensor(rng.standard_normal((2, 3, 8, 8)).astype(np.float32))
        feat_only = GatedConv(layer.w_f, layer.w_g, layer.b_f, layer.b_g, layer.geom,
                              activation=layer.activation, gate_mode="uniform")
        npt.assert_array_equal(layer(x).data, feat_only(x).data)

    def test_large_negative_gate_bias_closes_gate(self):
        rng = np.random.default_rng(1)
        layer = make_gated(rng)
        layer.w_g.data[:] = 0.0
        layer.b_g.data[:] = -20.0
        x = Tensor(rng.standard_normal((1, 3, 8, 8)).astype(np.float32))
        out = layer(x).data
        feat = conv2d(x, layer.w_f, layer.b_f, layer.geom)
        from gfill.layers import apply_activation
        phi = apply_activation(layer.activation, feat).data
        assert np.all(np.abs(out) <= 1e-8 * np.abs(phi))

    def test_matches_primitive_composition_bitwise(self):
        rng = np.random.default_rng(2)
        layer = make_gated(rng)
        x = Tensor(rng.standard_normal((2, 3, 9, 9)).astype(np.float32))
        got = layer(x).data
        from gfill.tensor import elu
        want = mul(elu(conv2d(x, layer.w_f, layer.b_f, layer.geom)),
                   sigmoid(conv2d(x, layer.w_g, layer.b_g, layer.geom))).data
        npt.assert_array_equal(got, want)

    def test_gate_values_strictly_in_unit_interval(self):
        rng = np.random.default_rng(3)
        layer = make_gated(rng)
        layer.b_g.data[:] = np.array([50.0, -50.0, 0.0, 7.0], dtype=np.float32)
        x = Tensor(rng.standard_normal((1, 3, 8, 8)).astype(np.float32) * 30)
        record = []
        layer(x, gate_record=record)
        (_, gates), = record
        assert np.all(gates > 0.0) and np.all(gates < 1.0)

    def test_kernel_shape_mismatch_rejected(self):
        rng = np.random.default_rng(4)
        with pytest.raises(Exception):
            GatedConv(Tensor(rng.standard_normal((4, 3, 3, 3))),
                      Tensor(rng.standard_normal((4, 2, 3, 3))),
                      Tensor(np.zeros(4)), Tensor(np.zeros(4)), geom3())

    def test_grad_check(self):
        rng = np.random.default_rng(5)
        layer = make_gated(rng, dtype=np.float64)
        x = Tensor(rng.standard_normal((1, 3, 6, 6)), requires_grad=True, name="x")

        def f():
            return reduce_mean(mul(layer(x), layer(x)))

        err = grad_check(f, [x, *layer.parameters()])
        assert err < 1e-4

    def test_uniform_mode_gives_no_gating_gradient(self):
        rng = np.random.default_rng(6)
        layer = make_gated(rng, dtype=np.float64, gate_mode="uniform")
        x = Tensor(rng.standard_normal((1, 3, 6, 6)))
        loss = reduce_sum(layer(x))
        loss.backward()
        assert layer.w_g.grad is None
        assert layer.w_f.grad is not None


class TestPartialConv:
    def make(self, rng, cin=2, cout=3, dtype=np.float32, **kw):
        return init_layer("partial", cout, cin, geom3(), rng, dtype=dtype, **kw)

    def test_all_zero_mask_gives_zero_output_and_mask(self):
        rng = np.random.default_rng(0)
        layer = self.make(rng)
        layer.bias.data[:] = 1.5  # must be suppressed
        x = Tensor(rng.standard_normal((1, 2, 6, 6)).astype(np.float32))
        out, new_mask = layer(x, np.zeros((1, 1, 6, 6), dtype=np.float32))
        npt.assert_array_equal(out.data, 0.0)
        npt.assert_array_equal(new_mask, 0.0)

    def test_all_ones_mask_is_scaled_vanilla_conv(self):
        rng = np.random.default_rng(1)
        layer = self.make(rng, dtype=np.float64)
        layer.bias.data[:] = rng.standard_normal(3)
        x = Tensor(rng.standard_normal((1, 2, 6, 6)))
        out, new_mask = layer(x, np.ones((1, 1, 6, 6)))
        npt.assert_array_equal(new_mask, 1.0)
        want = conv2d_loops(x.data, layer.weight.data, None, padding=1)
        counts = conv2d_loops(np.ones((1, 1, 6, 6)), np.ones((1, 1, 3, 3)), None, padding=1)
        want = want / counts + layer.bias.data[None, :, None, None]
        npt.assert_allclose(out.data, want, atol=1e-12)
        # interior windows are fully valid: literal M/sum(M) means conv/9 + b
        interior = conv2d_loops(x.data, layer.weight.data, None, padding=1)[:, :, 1:-1, 1:-1] / 9.0
        npt.assert_allclose(out.data[:, :, 1:-1, 1:-1],
                            interior + layer.bias.data[None, :, None, None], atol=1e-12)

    def test_single_valid_pixel_in_window_corner(self):
        rng = np.random.default_rng(2)
        layer = self.make(rng, cin=1, cout=1, dtype=np.float64)
        layer.bias.data[:] = 0.25
        x = np.zeros((1, 1, 5, 5))
        x[0, 0, 0, 0] = 2.0
        mask = np.zeros((1, 1, 5, 5))
        mask[0, 0, 0, 0] = 1.0
        out, new_mask = layer(Tensor(x), mask)
        # window centered at (1,1) sees the valid pixel at its top-left tap
        assert new_mask[0, 0, 1, 1] == 1.0
        want = layer.weight.data[0, 0, 0, 0] * 2.0 / 1.0 + 0.25
        npt.assert_allclose(out.data[0, 0, 1, 1], want, atol=1e-12)
        # windows that see no valid pixel emit exactly zero
        assert out.data[0, 0, 4, 4] == 0.0
        assert new_mask[0, 0, 4, 4] == 0.0

    def test_matches_loop_oracle_random_configs(self):
        rng = np.random.default_rng(3)
        for scaling in ("count", "ratio"):
            for _ in range(8):
                s = int(rng.integers(1, 3))
                p = int(rng.integers(0, 3))
                layer = init_layer("partial", 2, 3,
                                   ConvGeometry(kernel=(3, 3), stride=s, padding=p),
                                   rng, dtype=np.float64, scaling=scaling)
                layer.bias.data[:] = rng.standard_normal(2)
                x = rng.standard_normal((2, 3, 7, 7))
                mask = (rng.random((2, 1, 7, 7)) < 0.6).astype(np.float64)
                out, new_mask = layer(Tensor(x), mask)
                want, want_mask = partial_conv_loops(
                    x, mask, layer.weight.data, layer.bias.data,
                    stride=s, padding=p, ratio=(scaling == "ratio"))
                npt.assert_allclose(out.data, want, atol=1e-9)
                npt.assert_array_equal(new_mask, want_mask)

    def test_masked_input_independence_exact(self):
        rng = np.random.default_rng(4)
        layer = self.make(rng)
        mask = (rng.random((1, 1, 8, 8)) < 0.5).astype(np.float32)
        x = rng.standard_normal((1, 2, 8, 8)).astype(np.float32)
        x2 = x.copy()
        x2[:, :, mask[0, 0] == 0] = 1234.5  # garbage in the holes
        out1, _ = layer(Tensor(x), mask)
        out2, _ = layer(Tensor(x2), mask)
        npt.assert_array_equal(out1.data, out2.data)

    def test_non_binary_mask_rejected(self):
        rng = np.random.default_rng(5)
        layer = self.make(rng)
        x = Tensor(np.zeros((1, 2, 6, 6), dtype=np.float32))
        with pytest.raises(ValueError, match="binary"):
            layer(x, np.full((1, 1, 6, 6), 0.5, dtype=np.float32))

    def test_grad_check_with_constant_mask(self):
        rng = np.random.default_rng(6)
        layer = self.make(rng, dtype=np.float64)
        mask = (rng.random((1, 1, 6, 6)) < 0.7).astype(np.float64)
        x = Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True, name="x")

        def f():
            out, _ = layer(x, mask)
            return reduce_sum(mul(out, out))

        assert grad_check(f, [x, *layer.parameters()]) < 1e-4


class TestMaskPropagation:
    def chain(self, n):
        return [geom3()] * n

    def test_full_ones_stays_full(self):
        masks = propagate_mask(self.chain(3), np.ones((16, 16), dtype=np.uint8))
        for m in masks:
            npt.assert_array_equal(m, 1)

    def test_centered_hole_shrinks_one_ring_per_layer(self):
        bits = np.ones((32, 32), dtype=np.uint8)
        bits[12:20, 12:20] = 0
        masks = propagate_mask(self.chain(5), bits)
        hole_sizes = [int((1 - m).sum()) for m in masks]
        assert hole_sizes == [36, 16, 4, 0, 0]  # 6x6, 4x4, 2x2, gone
        npt.assert_array_equal(masks[3], 1)

    def test_equals_binary_dilation_oracle(self):
        rng = np.random.default_rng(7)
        bits = (rng.random((20, 20)) < 0.85).astype(np.uint8)
        current = bits
        for m in propagate_mask(self.chain(4), bits):
            want = dilate_valid_set(current, 3, 3, stride=1, padding=1)
            npt.assert_array_equal(m.astype(bool), want)
            current = m

    def test_monotone_and_saturates(self):
        rng = np.random.default_rng(8)
        bits = (rng.random((24, 24)) < 0.5).astype(np.uint8)
        if bits.sum() == 0:
            bits[0, 0] = 1
        masks = propagate_mask(self.chain(30), bits)
        prev = bits
        for m in masks:
            assert np.all(m >= prev)  # valid set only grows
            prev = m
        npt.assert_array_equal(masks[-1], 1)

    def test_empty_chain_rejected(self):
        with pytest.raises(ValueError):
            propagate_mask([], np.ones((4, 4), dtype=np.uint8))


class TestSpectralNorm:
    def test_diagonal_matrix_converged(self):
        w = Tensor(np.diag([3.0, 1.0]).reshape(2, 2, 1, 1).astype(np.float32))
        state = SpectralNormState(u=np.array([1.0, 0.0]))
        out, sigma = spectral_normalize(w, state)
        assert sigma == pytest.approx(3.0, abs=1e-12)
        norm = np.linalg.svd(out.data.reshape(2, 2), compute_uv=False)[0]
        assert norm == pytest.approx(1.0, abs=1e-6)

    def test_positive_scale_invariance(self):
        rng = np.random.default_rng(0)
        w = rng.standard_normal((4, 6, 1, 1)).astype(np.float32)
        u = rng.standard_normal(4)
        out1, s1 = spectral_normalize(Tensor(w), SpectralNormState(u=u.copy()))
        out2, s2 = spectral_normalize(Tensor(2 * w), SpectralNormState(u=u.copy()))
        npt.assert_allclose(out1.data, out2.data, atol=1e-7)
        assert s2 == pytest.approx(2 * s1, rel=1e-6)

    def test_sigma_matches_svd_and_power_oracles(self):
        rng = np.random.default_rng(1)
        w = rng.standard_normal((16, 48)).astype(np.float64)
        state = SpectralNormState(u=rng.standard_normal(16), n_power_iterations=50)
        _, sigma = spectral_normalize(Tensor(w.reshape(16, 48, 1, 1)), state)
        svd_top = np.linalg.svd(w, compute_uv=False)[0]
        assert abs(sigma - svd_top) / svd_top < 0.01
        power_top = top_singular_value_power(w)
        assert abs(sigma - power_top) / power_top < 0.01

    def test_normalized_spectral_norm_bounded_after_five_iters(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            rows = int(rng.integers(2, 32))
            cols = int(rng.integers(2, 64))
            w = Tensor(rng.standard_normal((rows, cols, 1, 1)).astype(np.float32))
            state = SpectralNormState(u=rng.standard_normal(rows), n_power_iterations=5)
            out, _ = spectral_normalize(w, state)
            top = np.linalg.svd(out.data.reshape(rows, cols).astype(np.float64),
                                compute_uv=False)[0]
            assert top <= 1.0 + 1e-2

    def test_u_persists_and_stays_unit(self):
        rng = np.random.default_rng(3)
        w = Tensor(rng.standard_normal((8, 12, 1, 1)).astype(np.float32))
        state = SpectralNormState(u=rng.standard_normal(8))
        before = state.u.copy()
        spectral_normalize(w, state)
        assert not np.allclose(state.u, before)
        assert np.linalg.norm(state.u) == pytest.approx(1.0, abs=1e-9)
        held = state.u.copy()
        spectral_normalize(w, state, update=False)
        npt.assert_array_equal(state.u, held)

    def test_zero_matrix_rejected(self):
        w = Tensor(np.zeros((3, 4, 1, 1), dtype=np.float32))
        with pytest.raises(ValueError, match="zero"):
            spectral_normalize(w, SpectralNormState(u=np.ones(3)))

    def test_gradient_with_converged_u(self):
        rng = np.random.default_rng(4)
        w = Tensor(rng.standard_normal((3, 8, 1, 1)), requires_grad=True, name="W")
        state = SpectralNormState(u=rng.standard_normal(3), n_power_iterations=200)
        spectral_normalize(w, state)  # converge u
        state.n_power_iterations = 1
        coeff = Tensor(rng.standard_normal((3, 8, 1, 1)))

        def f():
            wn, _ = spectral_normalize(w, state, update=False)
            return reduce_sum(mul(wn, coeff))

        assert grad_check(f, [w]) < 1e-4


class TestInit:
    def test_fixed_seed_reproducible(self):
        a = init_layer("gated", 4, 3, geom3(), np.random.default_rng(42))
        b = init_layer("gated", 4, 3, geom3(), np.random.default_rng(42))
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            npt.assert_array_equal(pa.data, pb.data)

    def test_weight_variance_matches_scheme(self):
        rng = np.random.default_rng(0)
        geom = ConvGeometry(kernel=(5, 5))
        layer = init_layer("gated", 80, 50, geom, rng)  # 80*50*25 = 1e5 draws per kernel
        fan_in = 50 * 25
        fan_out = 80 * 25
        var_f = layer.w_f.data.var()
        var_g = layer.w_g.data.var()
        assert abs(var_f - 2.0 / fan_in) < 0.1 * (2.0 / fan_in)
        assert abs(var_g - 2.0 / (fan_in + fan_out)) < 0.1 * (2.0 / (fan_in + fan_out))

    def test_zero_bias_means_half_open_gates_on_zero_input(self):
        layer = init_layer("gated", 4, 3, geom3(), np.random.default_rng(1))
        x = Tensor(np.zeros((1, 3, 6, 6), dtype=np.float32))
        record = []
        layer(x, gate_record=record)
        npt.assert_array_equal(record[0][1], 0.5)

    def test_vanilla_layer_runs(self):
        layer = init_layer("vanilla", 2, 3, geom3(), np.random.default_rng(2),
                           activation="leaky_relu")
        y = layer(Tensor(np.ones((1, 3, 5, 5), dtype=np.float32)))
        assert y.data.shape == (1, 2, 5, 5)
        assert isinstance(layer, VanillaConv)

    def test_spectral_layer_u_unit_norm(self):
        layer = init_layer("spectral", 6, 3, geom3(), np.random.default_rng(3))
        assert np.linalg.norm(layer.state.u) == pytest.approx(1.0, abs=1e-12)
