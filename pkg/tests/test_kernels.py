"""Kernel tests against independent oracles.

The forward convolution is checked against an im2col + GEMM oracle, both
backward convolutions against central finite differences of the loss
0.5*||O||^2, FC against a naive triple loop, and attention against a
two-step matmul.
"""

import numpy as np
import pytest

from reusim.kernels import (
    IDENTITY,
    RELU,
    AttentionSpec,
    ConfigError,
    ConvLayerSpec,
    FCLayerSpec,
    ShapeError,
    activation_grad,
    apply_activation,
    attention_forward,
    backward_window_grid,
    conv2d_forward,
    conv2d_input_grad,
    conv2d_weight_grad,
    extract_input_vectors,
    fc_forward,
    tensor,
)


def spec_1ch(h, w, k, stride=1, padding=0, activation=IDENTITY):
    return ConvLayerSpec(1, 1, (k, k), (h, w), stride, padding, activation)


# ---------------------------------------------------------------------------
# oracles

def im2col_conv_oracle(inp, weights, spec):
    """Independent forward oracle: im2col matrix times flattened filters."""
    inp = np.atleast_3d(np.asarray(inp, dtype=np.float64))
    if inp.shape[-1] == 1 and inp.ndim == 3 and inp.shape[0] == spec.input_size[0]:
        inp = np.moveaxis(inp, -1, 0)  # (H, W, 1) from atleast_3d of a 2-D array
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 2:
        w = w[None, None]
    k1, k2 = spec.kernel
    cols = []
    for c in range(inp.shape[0]):
        plane = np.pad(inp[c], spec.padding) if spec.padding else inp[c]
        oh, ow = spec.out_size
        col = np.empty((oh * ow, k1 * k2))
        idx = 0
        for i in range(oh):
            for j in range(ow):
                r, s = i * spec.stride, j * spec.stride
                col[idx] = plane[r : r + k1, s : s + k2].ravel()
                idx += 1
        cols.append(col)
    big = np.hstack(cols)                        # (positions, C*k1*k2)
    wmat = w.reshape(w.shape[0], -1).T           # (C*k1*k2, F)
    out = (big @ wmat).T.reshape(w.shape[0], *spec.out_size)
    out = apply_activation(out.astype(np.float32), spec.activation)
    return out


def fd_loss(inp, weights, spec):
    """0.5 * sum(O^2) computed entirely in float64 (via the im2col oracle)
    so central differences are not polluted by float32 rounding."""
    inp3 = np.asarray(inp, dtype=np.float64)
    if inp3.ndim == 2:
        inp3 = inp3[None]
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 2:
        w = w[None, None]
    k1, k2 = spec.kernel
    oh, ow = spec.out_size
    out = np.zeros((w.shape[0], oh, ow))
    for c in range(inp3.shape[0]):
        plane = np.pad(inp3[c], spec.padding) if spec.padding else inp3[c]
        for f in range(w.shape[0]):
            for i in range(oh):
                for j in range(ow):
                    r, s = i * spec.stride, j * spec.stride
                    out[f, i, j] += np.sum(plane[r : r + k1, s : s + k2] * w[f, c])
    if spec.activation == RELU:
        out = np.maximum(out, 0.0)
    return 0.5 * float(np.sum(out * out))


# ---------------------------------------------------------------------------
# tensor constructor

class TestTensor:
    def test_shape_product_enforced(self):
        with pytest.raises(ShapeError):
            tensor([1.0, 2.0, 3.0], shape=(2, 2))

    def test_rejects_nan_inf(self):
        with pytest.raises(ValueError):
            tensor([1.0, np.nan])
        with pytest.raises(ValueError):
            tensor([np.inf, 0.0])

    def test_roundtrip(self):
        t = tensor([1, 2, 3, 4], shape=(2, 2))
        assert t.dtype == np.float32 and t.shape == (2, 2)


class TestSpecs:
    def test_bad_output_extent(self):
        with pytest.raises(ConfigError):
            ConvLayerSpec(1, 1, (3, 3), (4, 4), stride=2)

    def test_out_size(self):
        spec = ConvLayerSpec(1, 1, (3, 3), (5, 5))
        assert spec.out_size == (3, 3) and spec.num_vectors == 9

    def test_fc_blocks(self):
        spec = FCLayerSpec(20, 4, block_vector_len=9)
        assert spec.num_blocks == 3 and spec.padded_features == 27

    def test_attention_spec_validates(self):
        with pytest.raises(ConfigError):
            AttentionSpec(0, 4)


# ---------------------------------------------------------------------------
# extract_input_vectors

class TestExtractInputVectors:
    def test_5x5_3x3_gives_nine_vectors(self):
        spec = spec_1ch(5, 5, 3)
        vecs = extract_input_vectors(np.arange(25, dtype=np.float32).reshape(5, 5), spec)
        assert vecs.shape == (9, 9)

    def test_single_window_equals_flat_input(self):
        spec = spec_1ch(3, 3, 3)
        plane = np.arange(9, dtype=np.float32).reshape(3, 3)
        vecs = extract_input_vectors(plane, spec)
        assert vecs.shape == (1, 9)
        assert np.array_equal(vecs[0], plane.ravel())

    def test_first_window_hand_enumerated(self):
        # 4x4 input of values 0..15, 2x2 kernel: first window is [0, 1, 4, 5]
        spec = spec_1ch(4, 4, 2)
        vecs = extract_input_vectors(np.arange(16, dtype=np.float32).reshape(4, 4), spec)
        assert np.array_equal(vecs[0], [0, 1, 4, 5])
        assert np.array_equal(vecs[1], [1, 2, 5, 6])

    @pytest.mark.parametrize("h,k,stride,padding", [
        (5, 3, 1, 0), (5, 3, 1, 1), (6, 2, 2, 0), (7, 3, 2, 1), (4, 1, 1, 0),
    ])
    def test_count_matches_analytic_output_size(self, h, k, stride, padding):
        spec = spec_1ch(h, h, k, stride, padding)
        rng = np.random.default_rng(1)
        vecs = extract_input_vectors(rng.standard_normal((h, h)).astype(np.float32), spec)
        assert vecs.shape == (spec.num_vectors, k * k)

    def test_shape_mismatch_rejected(self):
        spec = spec_1ch(5, 5, 3)
        with pytest.raises(ConfigError):
            extract_input_vectors(np.zeros((4, 4), dtype=np.float32), spec)


# ---------------------------------------------------------------------------
# conv2d_forward

class TestConvForward:
    def test_1x1_scalar(self):
        spec = spec_1ch(1, 1, 1)
        out = conv2d_forward([[2.0]], [[3.0]], spec)
        assert out.shape == (1, 1) and out[0, 0] == 6.0

    def test_all_ones_3x3(self):
        spec = spec_1ch(3, 3, 3)
        out = conv2d_forward(np.ones((3, 3)), np.ones((3, 3)), spec)
        assert out.shape == (1, 1) and out[0, 0] == 9.0

    def test_matches_im2col_oracle_random(self):
        rng = np.random.default_rng(7)
        spec = spec_1ch(6, 6, 3)
        inp = rng.standard_normal((6, 6)).astype(np.float32)
        w = rng.standard_normal((3, 3)).astype(np.float32)
        ours = conv2d_forward(inp, w, spec)
        oracle = im2col_conv_oracle(inp, w, spec)[0]
        np.testing.assert_allclose(ours, oracle, atol=1e-5)

    @pytest.mark.parametrize("seed", range(6))
    def test_multichannel_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        spec = ConvLayerSpec(3, 4, (3, 3), (8, 8), stride=1, padding=1, activation=RELU)
        inp = rng.standard_normal((3, 8, 8)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        ours = conv2d_forward(inp, w, spec)
        oracle = im2col_conv_oracle(inp, w, spec)
        assert ours.shape == (4, 8, 8)
        np.testing.assert_allclose(ours, oracle, atol=1e-5)

    def test_strided_matches_oracle(self):
        rng = np.random.default_rng(3)
        spec = ConvLayerSpec(2, 2, (2, 2), (6, 6), stride=2, activation=IDENTITY)
        inp = rng.standard_normal((2, 6, 6)).astype(np.float32)
        w = rng.standard_normal((2, 2, 2, 2)).astype(np.float32)
        np.testing.assert_allclose(
            conv2d_forward(inp, w, spec), im2col_conv_oracle(inp, w, spec), atol=1e-5
        )

    def test_shape_mismatch(self):
        spec = spec_1ch(5, 5, 3)
        with pytest.raises(ShapeError):
            conv2d_forward(np.zeros((4, 4)), np.zeros((3, 3)), spec)


# ---------------------------------------------------------------------------
# conv2d_weight_grad (finite-difference oracle)

class TestWeightGrad:
    def test_zero_delta_gives_zero_gradient(self):
        spec = spec_1ch(5, 5, 3)
        g = conv2d_weight_grad(np.zeros((3, 3)), np.random.default_rng(0).standard_normal((5, 5)), spec)
        assert np.all(g == 0.0)

    def test_1x1_kernel_collapses_to_dot(self):
        spec = spec_1ch(4, 4, 1)
        rng = np.random.default_rng(5)
        d = rng.standard_normal((4, 4)).astype(np.float32)
        x = rng.standard_normal((4, 4)).astype(np.float32)
        g = conv2d_weight_grad(d, x, spec)
        expect = np.float32(np.sum(d.astype(np.float64) * x.astype(np.float64)))
        np.testing.assert_allclose(g, [[expect]], rtol=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        spec = ConvLayerSpec(1, 1, (3, 3), (5, 5), activation=IDENTITY)
        x = rng.standard_normal((5, 5)).astype(np.float32)
        w = rng.standard_normal((3, 3)).astype(np.float32)
        out = conv2d_forward(x, w, spec)
        analytic = conv2d_weight_grad(out, x, spec)  # dL/dw for L = 0.5 ||O||^2
        h = 1e-3
        for m in range(3):
            for n in range(3):
                wp, wm = w.copy(), w.copy()
                wp[m, n] += h
                wm[m, n] -= h
                fd = (fd_loss(x, wp, spec) - fd_loss(x, wm, spec)) / (2 * h)
                assert analytic[m, n] == pytest.approx(fd, rel=1e-3, abs=1e-4)

    def test_relu_multichannel_finite_differences(self):
        rng = np.random.default_rng(11)
        spec = ConvLayerSpec(2, 2, (2, 2), (4, 4), activation=RELU)
        x = rng.standard_normal((2, 4, 4)).astype(np.float32)
        w = rng.standard_normal((2, 2, 2, 2)).astype(np.float32)
        pre_spec = ConvLayerSpec(2, 2, (2, 2), (4, 4), activation=IDENTITY)
        z = conv2d_forward(x, w, pre_spec)
        out = apply_activation(z, RELU)
        delta = out * activation_grad(z, RELU)  # dL/dz for L = 0.5 ||relu(z)||^2
        analytic = conv2d_weight_grad(delta, x, spec)
        h = 1e-3
        for f in range(2):
            for c in range(2):
                for m in range(2):
                    for n in range(2):
                        wp, wm = w.copy(), w.copy()
                        wp[f, c, m, n] += h
                        wm[f, c, m, n] -= h
                        fd = (fd_loss(x, wp, spec) - fd_loss(x, wm, spec)) / (2 * h)
                        assert analytic[f, c, m, n] == pytest.approx(fd, rel=2e-3, abs=2e-3)


# ---------------------------------------------------------------------------
# conv2d_input_grad (finite-difference oracle)

class TestInputGrad:
    def test_identity_1x1_weight_scales_delta(self):
        spec = ConvLayerSpec(1, 1, (1, 1), (4, 4), activation=IDENTITY)
        rng = np.random.default_rng(2)
        d = rng.standard_normal((4, 4)).astype(np.float32)
        x = rng.standard_normal((4, 4)).astype(np.float32)
        g = conv2d_input_grad(d, np.array([[2.5]], dtype=np.float32), x, spec)
        np.testing.assert_allclose(g, 2.5 * d, rtol=1e-6)

    def test_relu_all_negative_pre_activation_zeroes_gradient(self):
        spec = ConvLayerSpec(1, 1, (3, 3), (5, 5), activation=RELU)
        d = np.ones((3, 3), dtype=np.float32)
        w = np.ones((3, 3), dtype=np.float32)
        g = conv2d_input_grad(d, w, -np.ones((5, 5), dtype=np.float32), spec)
        assert np.all(g == 0.0)

    def test_grid_matches_padded_input(self):
        spec = ConvLayerSpec(1, 1, (3, 3), (6, 6), padding=1)
        assert backward_window_grid(spec) == (8, 8)

    @pytest.mark.parametrize("seed,padding", [(0, 0), (1, 0), (2, 1)])
    def test_matches_finite_differences(self, seed, padding):
        # Chain: P --relu--> x --conv(identity)--> O, L = 0.5 ||O||^2.
        # dL/dP must equal conv2d_input_grad(delta=O, W, act_input=P).
        rng = np.random.default_rng(seed)
        spec = ConvLayerSpec(1, 1, (3, 3), (5, 5), padding=padding, activation=IDENTITY)
        p = rng.standard_normal((5, 5)).astype(np.float32)
        w = rng.standard_normal((3, 3)).astype(np.float32)

        def loss_of(pre):
            x = apply_activation(pre, RELU)
            return fd_loss(x, w, spec)

        x0 = apply_activation(p, RELU)
        delta = conv2d_forward(x0, w, spec)  # dL/dO = O
        analytic = conv2d_input_grad(delta, w, p, spec, activation=RELU)
        h = 1e-3
        for i in range(5):
            for j in range(5):
                pp, pm = p.copy(), p.copy()
                pp[i, j] += h
                pm[i, j] -= h
                fd = (loss_of(pp) - loss_of(pm)) / (2 * h)
                # skip points pinned at the ReLU kink
                if abs(p[i, j]) < 2 * h:
                    continue
                assert analytic[i, j] == pytest.approx(fd, rel=1e-3, abs=1e-4)

    def test_multichannel_strided_finite_differences(self):
        rng = np.random.default_rng(9)
        spec = ConvLayerSpec(2, 3, (2, 2), (6, 6), stride=2, activation=IDENTITY)
        p = rng.standard_normal((2, 6, 6)).astype(np.float32)
        w = rng.standard_normal((3, 2, 2, 2)).astype(np.float32)
        x0 = apply_activation(p, IDENTITY)
        delta = conv2d_forward(x0, w, spec)
        analytic = conv2d_input_grad(delta, w, p, spec, activation=IDENTITY)
        h = 1e-3
        for c in range(2):
            for i in range(0, 6, 2):
                for j in range(1, 6, 2):
                    pp, pm = p.copy(), p.copy()
                    pp[c, i, j] += h
                    pm[c, i, j] -= h
                    fd = (fd_loss(pp, w, spec) - fd_loss(pm, w, spec)) / (2 * h)
                    assert analytic[c, i, j] == pytest.approx(fd, rel=1e-3, abs=1e-3)


# ---------------------------------------------------------------------------
# fc_forward

class TestFCForward:
    def test_identity_weight(self):
        x = np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32)
        np.testing.assert_array_equal(fc_forward(x, np.eye(4, dtype=np.float32)), x)

    def test_single_dot_product(self):
        out = fc_forward([[1.0, 2.0, 3.0]], [[1.0], [10.0], [100.0]])
        assert out.shape == (1, 1) and out[0, 0] == 321.0

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((4, 8)).astype(np.float32)
        w = rng.standard_normal((8, 3)).astype(np.float32)
        expect = np.zeros((4, 3))
        for r in range(4):
            for j in range(3):
                for i in range(8):
                    expect[r, j] += float(x[r, i]) * float(w[i, j])
        np.testing.assert_allclose(fc_forward(x, w), expect, atol=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            fc_forward(np.zeros((2, 3)), np.zeros((4, 2)))


# ---------------------------------------------------------------------------
# attention_forward

class TestAttention:
    def test_single_row(self):
        x = np.array([[1.0, 2.0]], dtype=np.float32)
        # Y = (x . x) * x
        np.testing.assert_allclose(attention_forward(x), 5.0 * x, rtol=1e-6)

    def test_orthonormal_rows_identity(self):
        x = np.eye(3, 4, dtype=np.float32)
        np.testing.assert_allclose(attention_forward(x), x, atol=1e-6)

    def test_matches_two_step_matmul_oracle(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((3, 4)).astype(np.float32)
        x64 = x.astype(np.float64)
        oracle = (x64 @ x64.T).astype(np.float32).astype(np.float64) @ x64
        np.testing.assert_allclose(attention_forward(x), oracle, atol=1e-4)
