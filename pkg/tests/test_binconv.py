import numpy as np
import pytest

from binmoire.binconv import (
    ConvSpec,
    RpreluParams,
    conv2d,
    conv2d_backward,
    gated_binary_conv,
    naive_pm1_conv2d,
    rprelu,
    rprelu_backward,
    xnor_conv2d,
)
from binmoire.tensor_core import DimensionError, DomainError, compute_alpha, pack, sign_binarize
from oracles import gated_oracle, loop_conv, loop_rprelu, random_pm1_case


def _xnor(x, w, spec):
    return xnor_conv2d(pack(x), pack(w, inner_dims=3), spec)


def test_two_by_two_example():
    x = np.array([[1.0, -1.0], [1.0, 1.0]]).reshape(1, 1, 2, 2)
    w = np.ones((1, 1, 2, 2))
    out = _xnor(x, w, ConvSpec(1, 1, k=2))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 2.0


def test_self_correlation_is_maximal(rng):
    x = rng.choice([-1.0, 1.0], size=(1, 7, 3, 3))
    out = _xnor(x, x.copy(), ConvSpec(7, 1, k=3))
    assert out.item() == 9 * 7


def test_random_configs_bit_exact(rng):
    for _ in range(60):
        x, w, (ci, co, k, s, p) = random_pm1_case(rng, max_cin=140)
        spec = ConvSpec(ci, co, k, s, p)
        ref = loop_conv(x, w, s, p, -1.0)
        np.testing.assert_array_equal(_xnor(x, w, spec), ref)


def test_naive_path_matches_loop(rng):
    x, w, (ci, co, k, s, p) = random_pm1_case(rng)
    np.testing.assert_array_equal(
        naive_pm1_conv2d(x, w, ConvSpec(ci, co, k, s, p)), loop_conv(x, w, s, p, -1.0)
    )


def test_xnor_rejects_wrong_channels(rng):
    x = rng.choice([-1.0, 1.0], size=(1, 3, 5, 5))
    w = rng.choice([-1.0, 1.0], size=(2, 4, 3, 3))
    with pytest.raises(DimensionError):
        xnor_conv2d(pack(x), pack(w, inner_dims=3), ConvSpec(4, 2))


def test_empty_output_rejected():
    with pytest.raises(DimensionError):
        ConvSpec(1, 1, k=5).out_hw(3, 3)


def test_conv2d_float_matches_loop(rng):
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    np.testing.assert_allclose(conv2d(x, w, 2, 1, 0.0), loop_conv(x, w, 2, 1, 0.0), rtol=1e-10, atol=1e-12)


def test_conv2d_backward_matches_finite_differences(rng):
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    dout = rng.normal(size=(1, 3, 3, 3))
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    dxp, dw = conv2d_backward(dout, xp, w, 2, 1)
    h = 1e-6

    def f(xx, ww):
        return float(np.sum(conv2d(xx, ww, 2, 1) * dout))

    for idx in [(0, 1, 2, 1), (1, 0, 0, 2), (2, 1, 2, 2)]:
        wp, wm = w.copy(), w.copy()
        wp[idx] += h
        wm[idx] -= h
        assert abs((f(x, wp) - f(x, wm)) / (2 * h) - dw[idx]) < 1e-6
    for idx in [(0, 0, 0, 0), (0, 1, 3, 4)]:
        xp_, xm_ = x.copy(), x.copy()
        xp_[idx] += h
        xm_[idx] -= h
        fd = (f(xp_, w) - f(xm_, w)) / (2 * h)
        assert abs(fd - dxp[idx[0], idx[1], idx[2] + 1, idx[3] + 1]) < 1e-6


def _gated_case(rng, c_in=5, c_out=3, k=3, stride=1, padding=1):
    xf = rng.normal(size=(2, c_in, 6, 6)).astype(np.float32)
    wf = rng.normal(size=(c_out, c_in, k, k)).astype(np.float32)
    t = rng.normal(scale=0.3, size=c_in).astype(np.float32)
    return xf, wf, t, ConvSpec(c_in, c_out, k, stride, padding)


def test_gate_identity_equals_scaled_xnor(rng):
    xf, wf, t, spec = _gated_case(rng)
    beta = np.ones((2, 5), np.float32)
    out = gated_binary_conv(xf, wf, t, beta, spec)
    ref = compute_alpha(wf)[None, :, None, None].astype(np.float64) * xnor_conv2d(
        sign_binarize(xf, t), sign_binarize(wf, inner_dims=3), spec
    )
    np.testing.assert_array_equal(out, ref.astype(np.float32))


def test_halving_gate_halves_output(rng):
    xf, wf, t, spec = _gated_case(rng)
    beta = rng.uniform(0.1, 1.0, size=(2, 5)).astype(np.float32)
    full = gated_binary_conv(xf, wf, t, beta, spec)
    half = gated_binary_conv(xf, wf, t, beta / 2, spec)
    np.testing.assert_array_equal(half, full / 2)


def test_random_gate_matches_per_channel_oracle(rng):
    for stride, padding in [(1, 0), (1, 1), (2, 1)]:
        xf, wf, t, spec = _gated_case(rng, stride=stride, padding=padding)
        beta = rng.uniform(0.01, 1.0, size=(2, 5)).astype(np.float32)
        out = gated_binary_conv(xf, wf, t, beta, spec)
        ref = gated_oracle(xf, wf, t, beta, stride, padding)
        np.testing.assert_allclose(out, ref, rtol=1e-6, atol=1e-6 * np.abs(ref).max())


def test_packed_path_equals_literal_under_uniform_gate(rng):
    xf, wf, t, spec = _gated_case(rng, c_in=70)
    beta = np.repeat(np.array([[1.0], [0.375]], np.float32), 70, axis=1)
    a = gated_binary_conv(xf, wf, t, beta, spec, method="literal")
    b = gated_binary_conv(xf, wf, t, beta, spec, method="packed")
    np.testing.assert_array_equal(a, b)


def test_packed_path_rejects_channel_varying_gate(rng):
    xf, wf, t, spec = _gated_case(rng)
    beta = rng.uniform(0.1, 1.0, size=(2, 5)).astype(np.float32)
    with pytest.raises(DomainError):
        gated_binary_conv(xf, wf, t, beta, spec, method="packed")


@pytest.mark.parametrize("bad", [0.0, 1.5, -0.2])
def test_gate_domain(rng, bad):
    xf, wf, t, spec = _gated_case(rng)
    beta = np.full((2, 5), bad, np.float32)
    with pytest.raises(DomainError):
        gated_binary_conv(xf, wf, t, beta, spec)


def test_gate_shape_checked(rng):
    xf, wf, t, spec = _gated_case(rng)
    with pytest.raises(DimensionError):
        gated_binary_conv(xf, wf, t, np.ones((2, 4), np.float32), spec)


def test_rprelu_identity(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    np.testing.assert_array_equal(rprelu(x, RpreluParams.identity(3, np.float64)), x)


def test_rprelu_continuous_at_knee():
    gamma = np.array([0.3, -1.2])
    zeta = np.array([0.7, 0.1])
    x = np.broadcast_to(gamma[None, :, None, None], (1, 2, 1, 1)).copy()
    for slope in (np.array([0.25, 0.25]), np.array([1.0, 3.0])):
        y = rprelu(x, RpreluParams(gamma, zeta, slope))
        np.testing.assert_array_equal(y.reshape(-1), zeta)


def test_rprelu_matches_loop(rng):
    x = rng.normal(size=(2, 4, 5, 5))
    p = RpreluParams(rng.normal(size=4), rng.normal(size=4), rng.uniform(0, 1, size=4))
    np.testing.assert_allclose(rprelu(x, p), loop_rprelu(x, p.gamma, p.zeta, p.slope), rtol=1e-14)


def test_rprelu_length_checked(rng):
    with pytest.raises(DimensionError):
        rprelu(rng.normal(size=(1, 3, 2, 2)), RpreluParams.identity(2))


def test_rprelu_backward_finite_differences(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    p = RpreluParams(rng.normal(scale=0.1, size=3), rng.normal(size=3), rng.uniform(0.1, 0.9, size=3))
    dout = rng.normal(size=x.shape)
    dx, dg, dz, ds = rprelu_backward(dout, x, p)
    h = 1e-6

    def f(pp, xx=x):
        return float(np.sum(rprelu(xx, pp) * dout))

    for name, grad in (("gamma", dg), ("zeta", dz), ("slope", ds)):
        for c in range(3):
            up = RpreluParams(p.gamma.copy(), p.zeta.copy(), p.slope.copy())
            dn = RpreluParams(p.gamma.copy(), p.zeta.copy(), p.slope.copy())
            getattr(up, name)[c] += h
            getattr(dn, name)[c] -= h
            fd = (f(up) - f(dn)) / (2 * h)
            assert abs(fd - grad[c]) <= 1e-5 * max(1.0, abs(fd))
    xp_, xm_ = x.copy(), x.copy()
    xp_[0, 1, 2, 2] += h
    xm_[0, 1, 2, 2] -= h
    assert abs((f(p, xp_) - f(p, xm_)) / (2 * h) - dx[0, 1, 2, 2]) < 1e-6
