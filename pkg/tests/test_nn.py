import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sigzsl import nn
from sigzsl.errors import NonFiniteError, ShapeError


def naive_conv(x, kernel, bias, stride, padding):
    """Direct loop convolution over a (C, H, W) tensor."""
    o, c, kh, kw = kernel.shape
    (sh, sw), (ph, pw) = stride, padding
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    ho = (xp.shape[1] - kh) // sh + 1
    wo = (xp.shape[2] - kw) // sw + 1
    out = np.zeros((o, ho, wo))
    for k in range(o):
        for r in range(ho):
            for q in range(wo):
                out[k, r, q] = np.sum(xp[:, r * sh : r * sh + kh, q * sw : q * sw + kw] * kernel[k])
        if bias is not None:
            out[k] += bias[k]
    return out


@st.composite
def single_channel_case(draw):
    h = draw(st.integers(1, 6))
    w = draw(st.integers(1, 6))
    kh = draw(st.integers(1, min(3, h + 2)))
    kw = draw(st.integers(1, min(3, w + 2)))
    ph = draw(st.integers(0, (kh - 1)))
    pw = draw(st.integers(0, (kw - 1)))
    sh = draw(st.integers(1, 2))
    sw = draw(st.integers(1, 2))
    if h + 2 * ph < kh or w + 2 * pw < kw:
        ph, pw = kh - 1, kw - 1
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    spec = nn.ConvSpec(rng.standard_normal((1, 1, kh, kw)), None, (sh, sw), (ph, pw))
    return spec, rng.standard_normal((1, h, w)), rng


def test_conv_ones_sum_is_nine():
    out = nn.conv2d(np.ones((1, 4, 4)), nn.ConvSpec(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 2, 2)
    np.testing.assert_array_equal(out, 9.0)


def test_conv_matrix_shape_and_first_row():
    k = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
    m = nn.build_conv_matrix(nn.ConvSpec(k), (4, 4))
    assert m.shape == (4, 16)
    w = k[0, 0]
    np.testing.assert_array_equal(m[0], [w[0, 0], w[0, 1], w[0, 2], 0, w[1, 0], w[1, 1], w[1, 2], 0,
                                         w[2, 0], w[2, 1], w[2, 2], 0, 0, 0, 0, 0])


def test_conv_matrix_of_unit_kernel_is_scaled_identity():
    m = nn.build_conv_matrix(nn.ConvSpec(np.full((1, 1, 1, 1), 2.5)), (3, 3))
    np.testing.assert_array_equal(m, 2.5 * np.eye(9))


def test_conv_matrix_rejects_multichannel():
    with pytest.raises(ShapeError):
        nn.build_conv_matrix(nn.ConvSpec(np.ones((2, 1, 3, 3))), (4, 4))


def test_one_by_one_kernel_scales():
    x = np.random.default_rng(0).standard_normal((1, 5, 3))
    spec = nn.ConvSpec(np.full((1, 1, 1, 1), -1.5))
    np.testing.assert_allclose(nn.conv2d(x, spec), -1.5 * x, rtol=0, atol=1e-15)
    g = np.random.default_rng(1).standard_normal((1, 5, 3))
    gx, gk, gb = nn.conv2d_grad(g, x, spec)
    np.testing.assert_allclose(gx, -1.5 * g, atol=1e-15)
    assert gk[0, 0, 0, 0] == pytest.approx(np.sum(x * g))
    assert gb[0] == pytest.approx(g.sum())


def test_conv_grads_zero_for_zero_upstream():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 5, 5))
    spec = nn.ConvSpec(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3))
    for grad in nn.conv2d_grad(np.zeros((3, 3, 3)), x, spec):
        assert not grad.any()


@settings(max_examples=40, deadline=None)
@given(single_channel_case())
def test_conv_and_grad_match_matrix(case):
    spec, x, rng = case
    m = nn.build_conv_matrix(spec, x.shape[1:])
    out = nn.conv2d(x, spec)
    assert np.max(np.abs(out.ravel() - m @ x.ravel())) <= 1e-12
    g = rng.standard_normal(out.shape)
    gx, _, _ = nn.conv2d_grad(g, x, spec)
    assert np.max(np.abs(gx.ravel() - m.T @ g.ravel())) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(single_channel_case())
def test_deconv_and_grad_match_transposed_matrix(case):
    spec, big, rng = case
    m = nn.build_conv_matrix(spec, big.shape[1:])  # M~ = M.T
    small = rng.standard_normal((1,) + nn.conv_output_hw(big.shape[1:], spec.kernel_size, spec.stride, spec.padding))
    out = nn.deconv2d(small, spec, output_hw=big.shape[1:])
    assert out.shape == big.shape
    assert np.max(np.abs(out.ravel() - m.T @ small.ravel())) <= 1e-12
    g = rng.standard_normal(big.shape)
    gx, _, _ = nn.deconv2d_grad(g, small, spec)
    assert np.max(np.abs(gx.ravel() - m @ g.ravel())) <= 1e-12


def test_deconv_two_by_two_to_four_by_four():
    spec = nn.ConvSpec(np.random.default_rng(3).standard_normal((1, 1, 3, 3)))
    assert nn.deconv2d(np.ones((1, 2, 2)), spec).shape == (1, 4, 4)
    assert not nn.deconv2d(np.zeros((1, 2, 2)), spec).any()
    assert not any(g.any() for g in nn.deconv2d_grad(np.zeros((1, 4, 4)), np.ones((1, 2, 2)), spec))


@pytest.mark.parametrize("stride", [(1, 1), (2, 1), (2, 2)])
@pytest.mark.parametrize("padding", [(0, 0), (1, 0), (1, 1)])
@pytest.mark.parametrize("kernel", [(1, 3), (2, 3), (3, 3)])
def test_shape_inversion(stride, padding, kernel):
    x = np.zeros((3, 9, 11))
    spec = nn.ConvSpec(np.zeros((4, 3) + kernel), None, stride, padding)
    small = nn.conv2d(x, spec)
    hw = nn.deconv_output_hw(small.shape[1:], kernel, stride, padding)
    if nn.conv_output_hw(hw, kernel, stride, padding) == small.shape[1:] and hw == x.shape[1:]:
        assert nn.deconv2d(small, spec).shape == x.shape
    # the explicit target size always inverts
    assert nn.deconv2d(small, spec, output_hw=x.shape[1:]).shape == x.shape


def test_multichannel_conv_matches_loop_oracle():
    rng = np.random.default_rng(4)
    for stride, padding in [((1, 1), (0, 0)), ((2, 1), (1, 1)), ((1, 2), (0, 2))]:
        x = rng.standard_normal((3, 6, 7))
        spec = nn.ConvSpec(rng.standard_normal((4, 3, 2, 3)), rng.standard_normal(4), stride, padding)
        np.testing.assert_allclose(nn.conv2d(x, spec), naive_conv(x, spec.kernel, spec.bias, stride, padding),
                                   rtol=0, atol=1e-12)


def test_layouts_agree():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 4, 10))
    spec = nn.ConvSpec(rng.standard_normal((5, 3, 2, 3)), rng.standard_normal(5), (1, 1), (0, 1))
    nchw = nn.conv2d(x, spec)
    nhwc = nn.conv2d(x.transpose(0, 2, 3, 1), spec, layout="NHWC")
    np.testing.assert_allclose(nhwc.transpose(0, 3, 1, 2), nchw, atol=1e-12)
    pooled, rec = nn.pool2d(nchw, "max", (1, 2))
    pooled_h, rec_h = nn.pool2d(nhwc, "max", (1, 2), layout="NHWC")
    np.testing.assert_array_equal(pooled_h.transpose(0, 3, 1, 2), pooled)
    np.testing.assert_array_equal(nn.unpool2d(pooled_h, rec_h).transpose(0, 3, 1, 2), nn.unpool2d(pooled, rec))


def _fd(name, f, x, analytic, tol=1e-5):
    err = nn.grad_check(f, x, analytic, step=1e-4)
    assert err < tol, f"{name}: rel err {err:.2e}"


def test_conv_grads_finite_difference():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 2, 5, 6))
    k = rng.standard_normal((3, 2, 2, 3))
    b = rng.standard_normal(3)
    spec = nn.ConvSpec(k, b, (1, 2), (1, 1))
    g = rng.standard_normal(nn.conv2d(x, spec).shape)
    gx, gk, gb = nn.conv2d_grad(g, x, spec)
    _fd("input", nn.projected(lambda v: nn.conv2d(v, spec), g), x, gx)
    _fd("kernel", nn.projected(lambda v: nn.conv2d(x, nn.ConvSpec(v, b, (1, 2), (1, 1))), g), k, gk)
    _fd("bias", nn.projected(lambda v: nn.conv2d(x, nn.ConvSpec(k, v, (1, 2), (1, 1))), g), b, gb)


def test_deconv_grads_finite_difference():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 3, 2, 4))
    k = rng.standard_normal((3, 2, 2, 3))
    b = rng.standard_normal(2)
    spec = nn.ConvSpec(k, b, (1, 1), (0, 1))
    g = rng.standard_normal(nn.deconv2d(x, spec).shape)
    gx, gk, gb = nn.deconv2d_grad(g, x, spec)
    _fd("input", nn.projected(lambda v: nn.deconv2d(v, spec), g), x, gx)
    _fd("kernel", nn.projected(lambda v: nn.deconv2d(x, nn.ConvSpec(v, b, (1, 1), (0, 1))), g), k, gk)
    _fd("bias", nn.projected(lambda v: nn.deconv2d(x, nn.ConvSpec(k, v, (1, 1), (0, 1))), g), b, gb)


def test_pool_and_unpool_grads_finite_difference():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 3, 4, 6))
    for mode in ("max", "avg"):
        out, rec = nn.pool2d(x, mode, (2, 2))
        g = rng.standard_normal(out.shape)
        _fd(f"pool {mode}", nn.projected(lambda v: nn.pool2d(v, mode, (2, 2))[0], g), x, nn.pool2d_grad(g, rec))
        gu = rng.standard_normal(x.shape)
        _fd(f"unpool {mode}", nn.projected(lambda v: nn.unpool2d(v, rec), gu), out, nn.unpool2d_grad(gu, rec))


def test_dense_relu_softmax_finite_difference():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((4, 5))
    w = rng.standard_normal((3, 5))
    b = rng.standard_normal(3)
    g = rng.standard_normal((4, 3))
    gx, gw, gb = nn.dense_grad(g, x, w)
    _fd("dense x", nn.projected(lambda v: nn.dense(v, w, b), g), x, gx)
    _fd("dense w", nn.projected(lambda v: nn.dense(x, v, b), g), w, gw)
    _fd("dense b", nn.projected(lambda v: nn.dense(x, w, v), g), b, gb)
    # keep relu probes away from the kink
    xr = np.where(np.abs(x) < 0.1, 0.5, x)
    gr = rng.standard_normal(xr.shape)
    assert nn.grad_check(nn.projected(nn.relu, gr), xr, nn.relu_grad(gr, xr)) < 1e-6
    p = nn.softmax(x)
    gs = rng.standard_normal(x.shape)
    _fd("softmax", nn.projected(nn.softmax, gs), x, nn.softmax_grad(gs, p))


def test_grad_check_linear_is_exact():
    a = np.random.default_rng(10).standard_normal(7)
    assert nn.grad_check(lambda v: float(a @ v), np.zeros(7), a) < 1e-9


def test_dense_trivial_cases():
    x = np.random.default_rng(11).standard_normal((2, 4))
    np.testing.assert_array_equal(nn.dense(x, np.eye(4), np.zeros(4)), x)
    np.testing.assert_array_equal(nn.dense(x, np.zeros((3, 4)), np.full(3, 2.0)), np.full((2, 3), 2.0))
    with pytest.raises(ShapeError):
        nn.dense(x, np.zeros((3, 5)))


def test_relu_and_softmax_values():
    np.testing.assert_array_equal(nn.relu(np.array([-1.0, 2.0])), [0.0, 2.0])
    np.testing.assert_allclose(nn.softmax(np.zeros(4)), 0.25, atol=1e-15)
    with pytest.raises(NonFiniteError):
        nn.softmax(np.array([0.0, np.nan]))


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-100, 100))
def test_softmax_simplex_and_shift_invariance(v, c):
    v = np.array(v)
    p = nn.softmax(v)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-12
    np.testing.assert_allclose(nn.softmax(v + c), p, rtol=0, atol=1e-12)


def test_pool_trivial_windows():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    out, rec = nn.pool2d(x, "max", (2, 2))
    assert out[0, 0, 0] == 4.0
    assert np.unravel_index(rec.argmax_indices[0, 0, 0], x.shape) == (0, 1, 1)
    out, rec = nn.pool2d(x, "avg", (2, 2))
    assert out[0, 0, 0] == 2.5 and rec.argmax_indices is None
    c = np.full((2, 4, 6), 3.25)
    for mode in ("max", "avg"):
        np.testing.assert_array_equal(nn.pool2d(c, mode, (2, 2))[0], 3.25)


def test_pool_rejects_bad_geometry():
    x = np.zeros((1, 4, 5))
    with pytest.raises(ValueError):
        nn.pool2d(x, "max", (2, 2))
    with pytest.raises(ValueError):
        nn.pool2d(np.zeros((1, 4, 4)), "max", (2, 2), stride=(1, 1))
    with pytest.raises(ValueError):
        nn.pool2d(np.zeros((1, 4, 4)), "max", (2, 2), padding=1)


def test_unpool_places_value_at_recorded_offset():
    rec = nn.PoolRecord("max", (2, 2), (2, 2), (0, 0), (1, 2, 2), argmax_indices=np.array([[[3]]]))
    out = nn.unpool2d(np.array([[[5.0]]]), rec)
    np.testing.assert_array_equal(out.ravel(), [0, 0, 0, 5])
    rec = nn.PoolRecord("avg", (2, 2), (2, 2), (0, 0), (1, 2, 2))
    np.testing.assert_array_equal(nn.unpool2d(np.array([[[7.0]]]), rec), np.full((1, 2, 2), 7.0))


def test_unpool_rejects_stale_record():
    _, rec = nn.pool2d(np.zeros((1, 4, 4)), "max", (2, 2))
    with pytest.raises(ShapeError):
        nn.unpool2d(np.zeros((1, 3, 2)), rec)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.sampled_from([(1, 2), (2, 2), (2, 1)]),
       st.integers(0, 2**31))
def test_max_unpool_restores_argmax_positions(c, hb, wb, window, seed):
    kh, kw = window
    x = np.random.default_rng(seed).standard_normal((c, hb * kh, wb * kw))
    pooled, rec = nn.pool2d(x, "max", window)
    up = nn.unpool2d(pooled, rec)
    # positional oracle: argmax within each window by explicit loop
    expected = np.zeros_like(x)
    for ch in range(c):
        for i in range(hb):
            for j in range(wb):
                win = x[ch, i * kh : (i + 1) * kh, j * kw : (j + 1) * kw]
                r, q = np.unravel_index(np.argmax(win), win.shape)
                expected[ch, i * kh + r, j * kw + q] = win[r, q]
    np.testing.assert_array_equal(up, expected)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_avg_unpool_then_pool_is_identity(c, h, w, seed):
    y = np.random.default_rng(seed).standard_normal((c, h, w))
    rec = nn.PoolRecord("avg", (2, 2), (2, 2), (0, 0), (c, 2 * h, 2 * w))
    back, _ = nn.pool2d(nn.unpool2d(y, rec), "avg", (2, 2))
    np.testing.assert_allclose(back, y, rtol=0, atol=1e-12)


def test_conv_rejects_nonfinite_and_bad_channels():
    spec = nn.ConvSpec(np.ones((1, 2, 1, 1)))
    with pytest.raises(ShapeError):
        nn.conv2d(np.zeros((3, 2, 2)), spec)
    bad = np.zeros((2, 2, 2))
    bad[0, 0, 0] = np.inf
    with pytest.raises(NonFiniteError):
        nn.conv2d(bad, spec)
    with pytest.raises(ShapeError):
        nn.conv2d_grad(np.zeros((1, 3, 3)), np.zeros((2, 2, 2)), spec)


def test_convspec_validation():
    with pytest.raises(ValueError):
        nn.ConvSpec(np.ones((1, 1, 3, 3)), stride=0)
    with pytest.raises(ShapeError):
        nn.ConvSpec(np.ones((1, 3, 3)))


def test_adam_zero_gradient_is_noop():
    p = [np.array([1.0, -2.0])]
    state = nn.AdamState.zeros_like(p)
    nn.adam_step(p, [np.zeros(2)], state)
    np.testing.assert_array_equal(p[0], [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_scalar_oracle():
    # hand-computed: m_hat = g, v_hat = g^2, so delta = -eta * g / (|g| + eps)
    g, eta, eps = 0.3, 1e-3, 1e-8
    p = [np.array([0.0])]
    nn.adam_step(p, [np.array([g])], nn.AdamState.zeros_like(p), eta)
    assert p[0][0] == pytest.approx(-eta * g / (abs(g) + eps), rel=1e-12)


def test_adam_constant_gradient_approaches_sign_step():
    p = [np.array([0.0, 0.0])]
    state = nn.AdamState.zeros_like(p)
    for _ in range(2000):
        before = p[0].copy()
        nn.adam_step(p, [np.array([2.0, -0.01])], state, 1e-3)
    np.testing.assert_allclose(p[0] - before, [-1e-3, 1e-3], rtol=1e-5)


def test_adam_rejects_nonfinite_before_mutating():
    p = [np.array([1.0])]
    state = nn.AdamState.zeros_like(p)
    with pytest.raises(NonFiniteError):
        nn.adam_step(p, [np.array([np.nan])], state)
    assert p[0][0] == 1.0 and state.step == 0


def test_child_rng_streams_are_independent_and_reproducible():
    a = nn.child_rng(3, 0).standard_normal(4)
    assert np.array_equal(a, nn.child_rng(3, 0).standard_normal(4))
    assert not np.array_equal(a, nn.child_rng(3, 1).standard_normal(4))
