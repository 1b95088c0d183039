import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdcaseg import tensor as T
from hdcaseg.gradcheck import check
from hdcaseg.tensor import ComputationRecord, Tensor


def rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


# --- naive oracles -------------------------------------------------------


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def naive_conv(x, w, b, dilation, stride=1):
    ci, H, W = x.shape
    co, _, kh, kw = w.shape
    pad = dilation if kh == 3 else 0
    Ho = (H + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    Wo = (W + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((co, Ho, Wo))
    for o in range(co):
        for i in range(Ho):
            for j in range(Wo):
                acc = b[o] if b is not None else 0.0
                for c in range(ci):
                    for u in range(kh):
                        for v in range(kw):
                            r = i * stride - pad + u * dilation
                            s = j * stride - pad + v * dilation
                            if 0 <= r < H and 0 <= s < W:
                                acc += w[o, c, u, v] * x[c, r, s]
                out[o, i, j] = acc
    return out


def bilinear_value(img, y, x):
    """Scalar align-corners-false sample, written out from the definition."""
    H, W = img.shape
    sy, sx = max(y, 0.0), max(x, 0.0)
    y0, x0 = min(int(np.floor(sy)), H - 1), min(int(np.floor(sx)), W - 1)
    y1, x1 = min(y0 + 1, H - 1), min(x0 + 1, W - 1)
    ly, lx = sy - y0, sx - x0
    return ((1 - ly) * (1 - lx) * img[y0, x0] + (1 - ly) * lx * img[y0, x1]
            + ly * (1 - lx) * img[y1, x0] + ly * lx * img[y1, x1])


# --- matmul ------------------------------------------------------------


def test_matmul_identity():
    b = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(b)).data, b)
    out = T.matmul(Tensor([[1.0, 2], [3, 4]]), Tensor([[1.0, 0], [0, 1]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), atol=1e-6)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_matmul_rejects_mixed_dtype():
    with pytest.raises(TypeError):
        T.matmul(Tensor(np.ones((2, 2), np.float32)), Tensor(np.ones((2, 2))))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_matmul_random_shapes(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), atol=1e-6)


# --- conv2d ------------------------------------------------------------


def test_conv_1x1_identity_kernel():
    x = np.random.default_rng(1).standard_normal((1, 4, 5))
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv_zero_kernel_gives_bias():
    x = Tensor(np.random.default_rng(2).standard_normal((2, 5, 5)))
    out = T.conv2d(x, Tensor(np.zeros((3, 2, 3, 3))), Tensor(np.array([1.0, -2.0, 0.5])))
    for o, b in enumerate([1.0, -2.0, 0.5]):
        np.testing.assert_array_equal(out.data[o], np.full((5, 5), b))


def test_conv_dilated_matches_direct_loops():
    rng = np.random.default_rng(3)
    x, w, b = rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), dilation=2)
    np.testing.assert_allclose(out.data, naive_conv(x, w, b, 2), atol=1e-6)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 6), st.integers(3, 6),
       st.sampled_from([1, 3]), st.integers(1, 3), st.integers(1, 2), st.integers(0, 2**31 - 1))
def test_conv_random_configs(ci, co, H, W, k, dil, stride, seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.standard_normal((ci, H, W)), rng.standard_normal((co, ci, k, k)), rng.standard_normal(co)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), dilation=dil, stride=stride)
    np.testing.assert_allclose(out.data, naive_conv(x, w, b, dil, stride), atol=1e-6)


def test_conv_batched_equals_per_sample():
    rng = np.random.default_rng(4)
    x, w = rng.standard_normal((3, 2, 6, 6)), rng.standard_normal((4, 2, 3, 3))
    batched = T.conv2d(Tensor(x), Tensor(w), dilation=2).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], T.conv2d(Tensor(x[i]), Tensor(w), dilation=2).data, atol=1e-12)


def test_conv_errors():
    with pytest.raises(T.ShapeError, match="channels"):
        T.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ValueError, match="kernel size"):
        T.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 2, 5, 5))))


def test_stride_two_halves_size_rounding_up():
    out = T.conv2d(Tensor(np.ones((1, 9, 16))), Tensor(np.ones((1, 1, 3, 3))), stride=2)
    assert out.shape == (1, 5, 8)


# --- softmax -----------------------------------------------------------


def test_softmax_equal_logits_uniform():
    out = T.softmax_channels(Tensor(np.full((4, 3, 2), 7.0)))
    np.testing.assert_allclose(out.data, 0.25)


def test_softmax_limit():
    for M in (5.0, 20.0, 100.0, 1000.0):
        x = np.zeros((2, 1, 1))
        x[1] = M
        y = T.softmax_channels(Tensor(x)).data
        assert y[1, 0, 0] > 1 - 2 * np.exp(-M) - 1e-15
    assert np.isfinite(y).all()


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1),
       st.floats(0.1, 50))
def test_softmax_is_row_stochastic(K, H, W, seed, spread):
    x = np.random.default_rng(seed).standard_normal((K, H, W)) * spread
    y = T.softmax_channels(Tensor(x)).data
    assert (y > 0).all() and (y <= 1).all()
    np.testing.assert_allclose(y.sum(axis=0), 1.0, atol=1e-6)


# --- bilinear ----------------------------------------------------------


def test_bilinear_same_size_is_identity():
    x = np.random.default_rng(5).standard_normal((2, 5, 7))
    np.testing.assert_allclose(T.bilinear_resize(Tensor(x), 5, 7).data, x, atol=1e-6)


@pytest.mark.parametrize("size", [(1, 1), (3, 9), (16, 4)])
def test_bilinear_constant_preserved(size):
    out = T.bilinear_resize(Tensor(np.full((1, 4, 4), 3.25)), *size)
    np.testing.assert_allclose(out.data, 3.25, atol=1e-12)


def test_bilinear_2x2_to_4x4_matches_formula():
    img = np.array([[0.0, 1.0], [2.0, 3.0]])
    out = T.bilinear_resize(Tensor(img[None]), 4, 4).data[0]
    expected = np.array([[bilinear_value(img, (i + 0.5) * 0.5 - 0.5, (j + 0.5) * 0.5 - 0.5)
                          for j in range(4)] for i in range(4)])
    np.testing.assert_allclose(out, expected, atol=1e-12)
    # the frozen values of that formula, for the record
    np.testing.assert_allclose(out[0], [0.0, 0.25, 0.75, 1.0])
    np.testing.assert_allclose(out[1], [0.5, 0.75, 1.25, 1.5])


def test_bilinear_random_downsample_matches_formula():
    rng = np.random.default_rng(6)
    img = rng.standard_normal((7, 5))
    out = T.bilinear_resize(Tensor(img[None]), 3, 4).data[0]
    for i in range(3):
        for j in range(4):
            y, x = (i + 0.5) * 7 / 3 - 0.5, (j + 0.5) * 5 / 4 - 0.5
            assert out[i, j] == pytest.approx(bilinear_value(img, y, x), abs=1e-12)


# --- concat ------------------------------------------------------------


def test_concat_single_is_identity():
    x = np.random.default_rng(7).standard_normal((3, 2, 2))
    np.testing.assert_array_equal(T.concat_channels([Tensor(x)]).data, x)


def test_concat_order_and_round_trip():
    rng = np.random.default_rng(8)
    a, b = rng.standard_normal((2, 4, 4)), rng.standard_normal((3, 4, 4))
    c = T.concat_channels([Tensor(a), Tensor(b)])
    assert c.shape == (5, 4, 4)
    np.testing.assert_array_equal(c[:2].data, a)
    np.testing.assert_array_equal(c[2:].data, b)


def test_concat_spatial_mismatch():
    with pytest.raises(T.ShapeError, match="spatial"):
        T.concat_channels([Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 4, 5)))])


# --- batch norm --------------------------------------------------------


def test_batch_norm_training_standardises():
    x = np.random.default_rng(9).standard_normal((4, 3, 5, 5)) * 3 + 2
    rm, rv = np.zeros(3), np.ones(3)
    y = T.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, True).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-4)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-4)
    n = 4 * 25
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1))


def test_batch_norm_zero_gamma_gives_beta():
    x = np.random.default_rng(10).standard_normal((2, 3, 4, 4))
    beta = np.array([0.5, -1.0, 2.0])
    y = T.batch_norm(Tensor(x), Tensor(np.zeros(3)), Tensor(beta), np.zeros(3), np.ones(3), True).data
    np.testing.assert_allclose(y, np.broadcast_to(beta[None, :, None, None], y.shape))


def test_batch_norm_eval_closed_form():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((3, 4, 4))
    mu, var = rng.standard_normal(3), rng.uniform(0.5, 2, 3)
    g, b = rng.standard_normal(3), rng.standard_normal(3)
    y = T.batch_norm(Tensor(x), Tensor(g), Tensor(b), mu.copy(), var.copy(), False).data
    for c in range(3):
        expected = (x[c] - mu[c]) / np.sqrt(var[c] + 1e-5) * g[c] + b[c]
        np.testing.assert_allclose(y[c], expected, atol=1e-6)


# --- elementwise -------------------------------------------------------


def test_elementwise_suite():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    v = np.random.default_rng(12).standard_normal((3, 4))
    np.testing.assert_array_equal(T.divide_rows(Tensor(v), Tensor(np.ones(3))).data, v)
    assert T.reduce_sum(Tensor(np.ones((3, 4)))).item() == 12
    np.testing.assert_array_equal(T.scale(Tensor([1.0, -2.0]), 3).data, [3, -6])
    np.testing.assert_array_equal(T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4, 6])


def test_divide_rows_clamps_small_denominators():
    v = Tensor(np.array([[2.0, 4.0], [1.0, 1.0]]))
    out = T.divide_rows(v, Tensor(np.array([0.0, 2.0])), eps=1e-6).data
    np.testing.assert_allclose(out[0], [2e6, 4e6])
    np.testing.assert_allclose(out[1], [0.5, 0.5])


def test_divide_rows_needs_one_denominator_per_row():
    with pytest.raises(T.ShapeError):
        T.divide_rows(Tensor(np.ones((3, 2))), Tensor(np.ones(2)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_output_raises():
    with pytest.raises(T.NonFiniteError):
        T.scale(Tensor(np.array([1e308])), 10.0)


# --- backward ----------------------------------------------------------


def test_backward_of_sum_is_ones():
    x = Tensor(np.random.default_rng(13).standard_normal((2, 3)))
    with ComputationRecord({"x": x}) as rec:
        loss = T.reduce_sum(x)
    np.testing.assert_array_equal(T.backward(loss, rec)["x"], np.ones((2, 3)))


def test_backward_of_sum_of_squares():
    xv = np.random.default_rng(14).standard_normal((2, 3))
    x = Tensor(xv.copy())
    with ComputationRecord({"x": x}) as rec:
        loss = T.reduce_sum(T.mul(x, x))
    np.testing.assert_allclose(T.backward(loss, rec)["x"], 2 * xv)


def test_backward_unreached_leaf_gets_zeros():
    x, y = Tensor(np.ones(3)), Tensor(np.ones((2, 2)))
    with ComputationRecord({"x": x, "y": y}) as rec:
        loss = T.reduce_sum(x)
    g = T.backward(loss, rec)
    np.testing.assert_array_equal(g["y"], np.zeros((2, 2)))


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3))
    with ComputationRecord({"x": x}) as rec:
        out = T.scale(x, 2)
    with pytest.raises(T.ShapeError, match="scalar"):
        T.backward(out, rec)


def test_backward_is_repeatable_and_pure():
    rng = np.random.default_rng(15)
    x, w = Tensor(rng.standard_normal((2, 5, 5))), Tensor(rng.standard_normal((3, 2, 3, 3)))
    with ComputationRecord({"x": x, "w": w}) as rec:
        y = T.relu(T.conv2d(x, w, dilation=2))
        loss = T.reduce_sum(T.mul(y, y))
    before = [n.output.data.copy() for n in rec.nodes]
    g1 = {k: v.copy() for k, v in T.backward(loss, rec).items()}
    g2 = T.backward(loss, rec)
    for k in g1:
        np.testing.assert_array_equal(g1[k], g2[k])
    for n, b in zip(rec.nodes, before):
        np.testing.assert_array_equal(n.output.data, b)


def test_record_is_topologically_ordered():
    x = Tensor(np.ones((2, 2)))
    with ComputationRecord({"x": x}) as rec:
        T.reduce_sum(T.relu(T.scale(x, 2)))
    produced = {id(x)}
    for node in rec.nodes:
        assert all(id(t) in produced for t in node.inputs if t.requires_grad)
        produced.add(id(node.output))


def test_no_recording_outside_a_record():
    x = Tensor(np.ones(3), requires_grad=True)
    y = T.scale(x, 2)
    assert not y.requires_grad


def test_finite_difference_oracle_basics():
    rng = np.random.default_rng(16)
    x = Tensor(rng.standard_normal((3, 2)))
    np.testing.assert_allclose(T.finite_difference_grad(lambda t: T.reduce_sum(t), x), 1.0, atol=1e-8)
    fd = T.finite_difference_grad(lambda t: float((t.data ** 2).sum()), x)
    np.testing.assert_allclose(fd, 2 * x.data, atol=1e-8)


@pytest.mark.parametrize("seed", range(3))
def test_composite_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    # no conv bias: training-mode BN cancels it, so its true gradient is 0
    x, w = rand(rng, 2, 5, 5), rand(rng, 3, 2, 3, 3)
    gamma, beta = rand(rng, 3), rand(rng, 3)

    def fn(x, w, gamma, beta):
        h = T.conv2d(x, w, dilation=2)
        h = T.relu(T.batch_norm(h, gamma, beta, np.zeros(3), np.ones(3), True))
        p = T.softmax_channels(h)
        return T.bilinear_resize(T.concat_channels([p, h]), 7, 3)

    assert check(fn, [x, w, gamma, beta]) < 1e-4
