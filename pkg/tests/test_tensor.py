"""Kernel-level checks against brute-force oracles."""

import numpy as np
import pytest

from spike2.tensor import (
    BatchNormParams,
    ConvSpec,
    DimensionError,
    batchnorm,
    bilinear_sample,
    conv2d,
    fold_bn_into_conv,
    round_half_away,
)


def conv_oracle(x, w, b, stride, padding, groups):
    """Six-nested-loop convolution, deliberately naive."""
    n, cin, h, wd = x.shape
    cout, cing, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    xp = np.zeros((n, cin, h + 2 * ph, wd + 2 * pw))
    xp[:, :, ph:ph + h, pw:pw + wd] = x
    out = np.zeros((n, cout, ho, wo))
    coutg = cout // groups
    for ni in range(n):
        for co in range(cout):
            g = co // coutg
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cing):
                        for a in range(kh):
                            for bb in range(kw):
                                acc += w[co, ci, a, bb] * xp[ni, g * cing + ci, i * sh + a, j * sw + bb]
                    out[ni, co, i, j] = acc + (b[co] if b is not None else 0.0)
    return out


class TestConv2d:
    def test_all_ones_sums_kernel(self):
        x = np.ones((1, 1, 3, 3))
        w = np.ones((1, 1, 3, 3))
        spec = ConvSpec("standard", 1, 1, (3, 3), (1, 1), (0, 0))
        out = conv2d(x, spec, w)
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 9.0

    def test_pointwise_scales(self):
        x = np.eye(4)[None, None]
        spec = ConvSpec.pointwise(1, 1)
        out = conv2d(x, spec, np.full((1, 1, 1, 1), 2.0))
        np.testing.assert_array_equal(out, 2.0 * x)

    @pytest.mark.parametrize("kind,stride,pad", [
        ("standard", (1, 1), (0, 0)),
        ("standard", (2, 2), (1, 1)),
        ("depthwise", (1, 1), (1, 1)),
        ("pointwise", (1, 1), (0, 0)),
    ])
    def test_matches_nested_loop_oracle(self, kind, stride, pad):
        rng = np.random.default_rng(7)
        cin = 4
        cout = cin if kind == "depthwise" else 6
        k = (1, 1) if kind == "pointwise" else (3, 3)
        spec = ConvSpec(kind, cin, cout, k, stride, pad)
        x = rng.normal(size=(2, cin, 8, 8))
        w = rng.normal(size=spec.weight_shape)
        b = rng.normal(size=cout)
        got = conv2d(x, spec, w, b)
        want = conv_oracle(x, w, b, stride, pad, spec.groups)
        np.testing.assert_allclose(got, want, atol=1e-9)

    def test_linearity(self):
        rng = np.random.default_rng(11)
        spec = ConvSpec.standard(3, 5, 3)
        w = rng.normal(size=spec.weight_shape)
        for _ in range(5):
            x = rng.normal(size=(1, 3, 6, 6))
            y = rng.normal(size=(1, 3, 6, 6))
            a, b = rng.normal(size=2)
            lhs = conv2d(a * x + b * y, spec, w)
            rhs = a * conv2d(x, spec, w) + b * conv2d(y, spec, w)
            np.testing.assert_allclose(lhs, rhs, atol=1e-8)

    def test_channel_mismatch_names_axis(self):
        spec = ConvSpec.pointwise(3, 4)
        with pytest.raises(DimensionError) as exc:
            conv2d(np.zeros((1, 2, 4, 4)), spec, np.zeros(spec.weight_shape))
        assert exc.value.axis == "input channels"

    def test_spec_invariants(self):
        with pytest.raises(ValueError):
            ConvSpec("pointwise", 3, 3, kernel=(3, 3))
        with pytest.raises(ValueError):
            ConvSpec("depthwise", 3, 6, kernel=(3, 3))


class TestBatchNorm:
    def test_identity_on_standardized_input(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(64, 3, 4, 4))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        p = BatchNormParams.identity(3, epsilon=1e-12)
        out = batchnorm(x, p, training=True)
        np.testing.assert_allclose(out, x, atol=1e-6)

    def test_zero_gamma_gives_beta(self):
        p = BatchNormParams(gamma=np.zeros(2), beta=np.array([1.5, -2.0]),
                            running_mean=np.zeros(2), running_var=np.ones(2))
        out = batchnorm(np.random.default_rng(1).normal(size=(4, 2, 3, 3)), p, training=True)
        np.testing.assert_allclose(out[:, 0], 1.5)
        np.testing.assert_allclose(out[:, 1], -2.0)

    def test_training_statistics_recomputed_independently(self):
        rng = np.random.default_rng(3)
        x = rng.normal(loc=2.0, scale=3.0, size=(32, 5, 6, 6))
        p = BatchNormParams.identity(5, epsilon=1e-12)
        out = batchnorm(x, p, training=True)
        # independent recompute of per-channel statistics on the output
        for c in range(5):
            vals = out[:, c].ravel()
            assert abs(vals.mean()) < 1e-6
            assert abs(vals.var() - 1.0) < 1e-4

    def test_inference_uses_running_stats(self):
        p = BatchNormParams(gamma=np.ones(1), beta=np.zeros(1),
                            running_mean=np.array([10.0]), running_var=np.array([4.0]),
                            epsilon=1e-12)
        out = batchnorm(np.full((1, 1, 1, 1), 12.0), p, training=False)
        np.testing.assert_allclose(out, 1.0, atol=1e-9)

    def test_zero_epsilon_rejected(self):
        with pytest.raises(ValueError):
            BatchNormParams(gamma=np.ones(1), beta=np.zeros(1),
                            running_mean=np.zeros(1), running_var=np.ones(1), epsilon=0.0)

    def test_running_stats_update(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(16, 2, 4, 4))
        p = BatchNormParams.identity(2, momentum=0.5)
        batchnorm(x, p, training=True)
        n = x[:, 0].size
        want_mean = 0.5 * x.mean(axis=(0, 2, 3))
        want_var = 0.5 * 1.0 + 0.5 * x.var(axis=(0, 2, 3)) * n / (n - 1)
        np.testing.assert_allclose(p.running_mean, want_mean, atol=1e-12)
        np.testing.assert_allclose(p.running_var, want_var, atol=1e-12)


class TestFoldBn:
    def test_identity_bn_keeps_weights(self):
        rng = np.random.default_rng(5)
        w = rng.normal(size=(4, 3, 3, 3))
        p = BatchNormParams.identity(4, epsilon=1e-12)
        w_f, b_f = fold_bn_into_conv(w, None, p)
        np.testing.assert_allclose(w_f, w, atol=1e-9)
        np.testing.assert_allclose(b_f, 0.0, atol=1e-9)

    def test_pure_scale(self):
        w = np.ones((2, 1, 1, 1))
        p = BatchNormParams(gamma=np.full(2, 2.0), beta=np.zeros(2),
                            running_mean=np.zeros(2), running_var=np.ones(2), epsilon=1e-12)
        w_f, _ = fold_bn_into_conv(w, None, p)
        np.testing.assert_allclose(w_f, 2.0 * w, atol=1e-9)

    def test_folded_equals_unfolded_pipeline(self):
        rng = np.random.default_rng(6)
        spec = ConvSpec.standard(3, 4, 3)
        w = rng.normal(size=spec.weight_shape)
        b = rng.normal(size=4)
        p = BatchNormParams(gamma=rng.normal(size=4), beta=rng.normal(size=4),
                            running_mean=rng.normal(size=4),
                            running_var=rng.uniform(0.5, 2.0, size=4))
        w_f, b_f = fold_bn_into_conv(w, b, p)
        worst = 0.0
        for _ in range(20):
            x = rng.normal(size=(2, 3, 6, 6))
            ref = batchnorm(conv2d(x, spec, w, b), p, training=False)
            got = conv2d(x, spec, w_f, b_f)
            worst = max(worst, float(np.abs(ref - got).max()))
        assert worst < 1e-6

    def test_randomized_property(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            cout = int(rng.integers(1, 5))
            cin = int(rng.integers(1, 4))
            spec = ConvSpec("standard", cin, cout, (3, 3), (1, 1), (1, 1))
            w = rng.normal(size=spec.weight_shape)
            b = rng.normal(size=cout) if rng.random() < 0.5 else None
            p = BatchNormParams(gamma=rng.normal(size=cout), beta=rng.normal(size=cout),
                                running_mean=rng.normal(size=cout),
                                running_var=rng.uniform(0.1, 3.0, size=cout))
            w_f, b_f = fold_bn_into_conv(w, b, p)
            x = rng.normal(size=(1, cin, 5, 5))
            ref = batchnorm(conv2d(x, spec, w, b), p, training=False)
            got = conv2d(x, spec, w_f, b_f)
            np.testing.assert_allclose(got, ref, atol=1e-6)


def bilinear_oracle(feature, points):
    """Direct four-neighbor weighted sum with the zero-padding convention."""
    c, h, w = feature.shape
    out = np.zeros((len(points), c))
    for pi, (y, x) in enumerate(points):
        y0, x0 = int(np.floor(y)), int(np.floor(x))
        ty, tx = y - y0, x - x0
        for dy, dx, wt in ((0, 0, (1 - ty) * (1 - tx)), (0, 1, (1 - ty) * tx),
                           (1, 0, ty * (1 - tx)), (1, 1, ty * tx)):
            yy, xx = y0 + dy, x0 + dx
            if 0 <= yy < h and 0 <= xx < w:
                out[pi] += wt * feature[:, yy, xx]
    return out


class TestBilinearSample:
    def test_integer_point_hits_grid_value(self):
        rng = np.random.default_rng(8)
        f = rng.normal(size=(3, 4, 5))
        pts = np.array([[2.0, 3.0], [0.0, 0.0], [3.0, 4.0]])
        got = bilinear_sample(f, pts)
        for i, (y, x) in enumerate(pts.astype(int)):
            np.testing.assert_allclose(got[i], f[:, y, x], atol=1e-12)

    def test_symmetric_midpoint_averages(self):
        f = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        got = bilinear_sample(f, np.array([[0.5, 0.5]]))
        np.testing.assert_allclose(got, [[2.5]], atol=1e-12)

    def test_random_points_match_oracle(self):
        rng = np.random.default_rng(9)
        f = rng.normal(size=(4, 6, 7))
        pts = rng.uniform(-2.0, 8.0, size=(100, 2))
        got = bilinear_sample(f, pts)
        want = bilinear_oracle(f, pts)
        np.testing.assert_allclose(got, want, atol=1e-9)

    def test_fully_outside_is_zero(self):
        f = np.ones((2, 3, 3))
        got = bilinear_sample(f, np.array([[-5.0, -5.0], [10.0, 10.0]]))
        np.testing.assert_array_equal(got, 0.0)

    def test_linearity_in_feature(self):
        rng = np.random.default_rng(10)
        f1 = rng.normal(size=(2, 5, 5))
        f2 = rng.normal(size=(2, 5, 5))
        pts = rng.uniform(0, 4, size=(20, 2))
        a, b = 1.7, -0.3
        lhs = bilinear_sample(a * f1 + b * f2, pts)
        rhs = a * bilinear_sample(f1, pts) + b * bilinear_sample(f2, pts)
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_lipschitz_in_points(self):
        rng = np.random.default_rng(11)
        f = rng.normal(size=(1, 6, 6))
        bound = 2.0 * np.abs(f).max()
        for _ in range(50):
            p = rng.uniform(0.5, 4.5, size=(1, 2))
            delta = rng.uniform(-1e-3, 1e-3, size=(1, 2))
            v0 = bilinear_sample(f, p)
            v1 = bilinear_sample(f, p + delta)
            assert np.abs(v1 - v0).max() <= np.abs(delta).sum() * bound + 1e-12


def test_round_half_away_convention():
    x = np.array([0.5, 1.5, 2.5, -0.5, -1.5, 2.49, -2.49])
    np.testing.assert_array_equal(round_half_away(x), [1.0, 2.0, 3.0, -1.0, -2.0, 2.0, -2.0])
