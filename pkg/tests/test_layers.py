import numpy as np
import pytest

from cvpatch import autograd as ag
from cvpatch import layers as L
from cvpatch.autograd import Tape
from cvpatch.checks import block_matrix_conv, naive_conv2d
from cvpatch.ctensor import ComplexTensor, ShapeError


def crand(rng, shape):
    return ComplexTensor(rng.normal(size=shape), rng.normal(size=shape))


def cconv(x, a, b, bias=None, padding=0, stride=1):
    t = Tape()
    bn = None if bias is None else t.constant(bias)
    return L.complex_conv2d(t.constant(x), t.constant(a), t.constant(b), bn, stride, padding).value


def run_bn(x, mode, training=True, **affine):
    c = x.shape[1]
    layer = L.ComplexBatchNorm("bn", c, mode)
    for key, v in affine.items():
        getattr(layer, key).value = np.full(c, v, float)
    t = Tape()
    return layer.forward(t, t.constant(x), training).value, layer


# -- complex convolution ---------------------------------------------------------


def test_conv_identity_kernel():
    x = crand(np.random.default_rng(0), (2, 1, 5, 5))
    out = cconv(x, np.ones((1, 1, 1, 1)), np.zeros((1, 1, 1, 1)))
    assert out == x


def test_conv_multiply_by_i():
    x = crand(np.random.default_rng(1), (2, 1, 4, 4))
    out = cconv(x, np.zeros((1, 1, 1, 1)), np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(out.real, -x.imag)
    np.testing.assert_array_equal(out.imag, x.real)


def test_conv_3x3_on_5x5_matches_naive_oracle():
    rng = np.random.default_rng(2)
    x = crand(rng, (2, 3, 5, 5))
    a, b = rng.normal(size=(4, 3, 3, 3)), rng.normal(size=(4, 3, 3, 3))
    bias = crand(rng, (4,))
    for pad in (0, 1):
        got = cconv(x, a, b, bias, padding=pad).numpy()
        want = naive_conv2d(x.numpy(), a + 1j * b, bias.numpy(), padding=pad)
        assert np.abs(got - want).max() <= 1e-10


def test_conv_matches_block_matrix_real_conv():
    rng = np.random.default_rng(3)
    x = crand(rng, (2, 2, 6, 6))
    a, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=(3, 2, 3, 3))
    got = cconv(x, a, b, padding=1)
    want = block_matrix_conv(x, a, b, padding=1)
    assert np.abs(got.real - want.real).max() <= 1e-12
    assert np.abs(got.imag - want.imag).max() <= 1e-12


def test_conv_is_complex_linear():
    rng = np.random.default_rng(4)
    h1, h2 = crand(rng, (2, 2, 5, 5)), crand(rng, (2, 2, 5, 5))
    a, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=(3, 2, 3, 3))
    alpha = 0.7 - 1.3j
    mixed = alpha * h1.numpy() + h2.numpy()
    lhs = cconv(ComplexTensor(mixed.real, mixed.imag), a, b, padding=1).numpy()
    rhs = alpha * cconv(h1, a, b, padding=1).numpy() + cconv(h2, a, b, padding=1).numpy()
    assert np.abs(lhs - rhs).max() <= 1e-10


def test_conv_channel_mismatch_is_shape_error():
    x = crand(np.random.default_rng(0), (1, 2, 4, 4))
    with pytest.raises(ShapeError):
        cconv(x, np.zeros((1, 3, 1, 1)), np.zeros((1, 3, 1, 1)))
    with pytest.raises(ShapeError):
        cconv(x, np.zeros((1, 2, 1, 1)), np.zeros((1, 2, 3, 3)))


def test_real_conv_matches_naive_oracle():
    rng = np.random.default_rng(5)
    x, w, b = rng.normal(size=(2, 3, 7, 7)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    t = Tape()
    got = L.conv2d(t.constant(x), t.constant(w), t.constant(b), padding=1).value
    assert np.abs(got - naive_conv2d(x, w, b, padding=1)).max() <= 1e-10


def test_sigmoid_and_relu_examples():
    t = Tape()
    assert float(ag.sigmoid(t.constant(np.array(0.0))).value) == 0.5
    assert ag.relu(t.constant(np.array([-2.0, -0.5]))).value.tolist() == [0.0, 0.0]


# -- batch normalization ---------------------------------------------------------


def test_bn_per_component_fixed_point():
    rng = np.random.default_rng(6)
    re = rng.normal(size=(64, 2, 4, 4))
    re = (re - re.mean(axis=(0, 2, 3), keepdims=True)) / re.std(axis=(0, 2, 3), keepdims=True)
    x = ComplexTensor(re, rng.normal(size=re.shape))
    out, _ = run_bn(x, "per_component")
    np.testing.assert_allclose(out.real, re * np.sqrt(1 / (1 + L.BN_EPS)), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("mode", ["per_component", "covariance"])
def test_bn_constant_batch_collapses_to_shift(mode):
    x = ComplexTensor(np.full((4, 2, 3, 3), 2.5), np.full((4, 2, 3, 3), -1.0))
    out, _ = run_bn(x, mode, beta_r=0.3, beta_i=-0.7)
    np.testing.assert_allclose(out.real, 0.3, atol=1e-12)
    np.testing.assert_allclose(out.imag, -0.7, atol=1e-12)


def test_bn_per_component_moments():
    x = crand(np.random.default_rng(7), (16, 3, 16, 16))
    out, _ = run_bn(x, "per_component")
    for part, src in ((out.real, x.real), (out.imag, x.imag)):
        assert np.abs(part.mean(axis=(0, 2, 3))).max() <= 1e-7
        v = src.var(axis=(0, 2, 3))
        np.testing.assert_allclose(part.var(axis=(0, 2, 3)), v / (v + L.BN_EPS), rtol=1e-12)
        assert np.abs(part.var(axis=(0, 2, 3)) - 1 / (1 + L.BN_EPS)).max() <= 1e-6


def _channel_cov(z):
    r = z.real.transpose(1, 0, 2, 3).reshape(z.shape[1], -1)
    i = z.imag.transpose(1, 0, 2, 3).reshape(z.shape[1], -1)
    r = r - r.mean(axis=1, keepdims=True)
    i = i - i.mean(axis=1, keepdims=True)
    return np.stack([np.stack([(r * r).mean(1), (r * i).mean(1)], -1),
                     np.stack([(r * i).mean(1), (i * i).mean(1)], -1)], -2)


def test_bn_covariance_whitens_to_identity():
    rng = np.random.default_rng(8)
    base = crand(rng, (16, 3, 8, 8))
    # correlated parts with large variance, so eps barely matters
    x = ComplexTensor(6 * base.real + 3 * base.imag + 1.0, 2 * base.real + 5 * base.imag - 2.0)
    out, _ = run_bn(x, "covariance")
    cov = _channel_cov(out)
    assert np.abs(cov - np.eye(2)).max() <= 1e-6
    assert np.abs(out.real.mean(axis=(0, 2, 3))).max() <= 1e-12


def test_bn_covariance_matches_eps_regularized_whitening():
    rng = np.random.default_rng(9)
    base = crand(rng, (8, 2, 6, 6))
    x = ComplexTensor(base.real + 0.5 * base.imag, base.imag)
    out, _ = run_bn(x, "covariance")
    v = _channel_cov(x)
    want = v @ np.linalg.inv(v + L.BN_EPS * np.eye(2))
    assert np.abs(_channel_cov(out) - want).max() <= 1e-9


@pytest.mark.parametrize("mode", ["per_component", "covariance"])
def test_bn_batch_of_one_rejected_in_training(mode):
    with pytest.raises(ValueError):
        run_bn(crand(np.random.default_rng(0), (1, 2, 3, 3)), mode)


@pytest.mark.parametrize("mode", ["per_component", "covariance"])
def test_bn_running_stats_and_inference(mode):
    x = crand(np.random.default_rng(10), (32, 2, 4, 4))
    layer = L.ComplexBatchNorm("bn", 2, mode, momentum=0.0)
    t = Tape()
    train_out = layer.forward(t, t.constant(x), True).value
    t = Tape()
    eval_out = layer.forward(t, t.constant(x), False).value
    np.testing.assert_allclose(eval_out.real, train_out.real, atol=1e-12)
    np.testing.assert_allclose(eval_out.imag, train_out.imag, atol=1e-12)


def test_bn_momentum_update():
    x = crand(np.random.default_rng(11), (8, 1, 2, 2))
    layer = L.ComplexBatchNorm("bn", 1)
    t = Tape()
    layer.forward(t, t.constant(x), True)
    assert layer.stats["mean_r"][0] == pytest.approx(0.1 * x.real.mean(), abs=1e-15)
    assert layer.stats["var_i"][0] == pytest.approx(0.9 + 0.1 * x.imag.var(), abs=1e-15)


# -- elementwise, pooling, FC, normalization ------------------------------------------


def crelu(z):
    return L.crelu(Tape().constant(z)).value


@pytest.mark.parametrize("re, im, want", [(-1, 2, (0, 2)), (3, -4, (3, 0)), (1.5, 2.5, (1.5, 2.5))])
def test_crelu_examples(re, im, want):
    out = crelu(ComplexTensor(np.array([re], float), np.array([im], float)))
    assert (out.real[0], out.imag[0]) == want


def test_crelu_idempotent():
    z = crand(np.random.default_rng(12), (3, 4, 5))
    assert crelu(crelu(z)) == crelu(z)


def pool(z, window=2, stride=None):
    return L.complex_max_pool(Tape().constant(z), window, stride).value


def test_pool_parts_pick_their_own_maximum():
    z = ComplexTensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), np.array([[[[4.0, 3.0], [2.0, 1.0]]]]))
    out = pool(z)
    assert (out.real.item(), out.imag.item()) == (4.0, 4.0)


def test_pool_constant_map_and_window_errors():
    z = ComplexTensor(np.full((1, 2, 4, 4), 1.5), np.full((1, 2, 4, 4), -2.0))
    out = pool(z)
    assert out.shape == (1, 2, 2, 2) and np.all(out.real == 1.5) and np.all(out.imag == -2.0)
    with pytest.raises(ShapeError):
        pool(z, window=5)
    with pytest.raises(ShapeError):
        pool(ComplexTensor(np.zeros((1, 1, 3, 3)), np.zeros((1, 1, 3, 3))))


def test_pool_gradient_routes_to_per_part_argmax():
    z = ComplexTensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), np.array([[[[4.0, 3.0], [2.0, 1.0]]]]))
    p = ag.Parameter("z", z)
    t = Tape()
    out = L.complex_max_pool(t.param(p))
    t.backward(ag.add(ag.sum(ag.real_part(out)), ag.scale(ag.sum(ag.imag_part(out)), 2.0)))
    assert p.grad.real.ravel().tolist() == [0, 0, 0, 1]
    assert p.grad.imag.ravel().tolist() == [2, 0, 0, 0]


def fc(x, a, b, bias=None):
    t = Tape()
    return L.complex_linear(t.constant(x), t.constant(a), t.constant(b),
                            None if bias is None else t.constant(bias)).value


def test_complex_fc_identity_and_rotation():
    x = crand(np.random.default_rng(13), (5, 4))
    eye, zero = np.eye(4), np.zeros((4, 4))
    assert fc(x, eye, zero) == x
    rot = fc(x, zero, eye)
    np.testing.assert_array_equal(rot.real, -x.imag)
    np.testing.assert_array_equal(rot.imag, x.real)


def test_complex_fc_matches_complex_matvec():
    rng = np.random.default_rng(14)
    x = crand(rng, (6, 4))
    a, b, bias = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), crand(rng, (3,))
    want = x.numpy() @ (a + 1j * b).T + bias.numpy()
    assert np.abs(fc(x, a, b, bias).numpy() - want).max() <= 1e-12
    with pytest.raises(ShapeError):
        fc(crand(rng, (2, 5)), a, b)


def cl2(z):
    return L.cl2_norm(Tape().constant(z)).value


def test_cl2_examples():
    out = cl2(ComplexTensor(np.array([[3.0, 4.0]]), np.zeros((1, 2))))
    np.testing.assert_allclose(out.real, [[0.6, 0.8]], rtol=1e-12)
    assert np.all(out.imag == 0)
    out = cl2(ComplexTensor(np.array([[3.0, 4.0]]), np.array([[5.0, 12.0]])))
    np.testing.assert_allclose(out.imag, [[5 / 13, 12 / 13]], rtol=1e-12)


def test_cl2_unit_norms_and_idempotence():
    z = crand(np.random.default_rng(15), (7, 16))
    once = cl2(z)
    np.testing.assert_allclose(np.linalg.norm(once.real, axis=1), 1.0, rtol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(once.imag, axis=1), 1.0, rtol=1e-12)
    twice = cl2(once)
    assert np.abs(twice.real - once.real).max() <= 1e-12
    assert np.abs(twice.imag - once.imag).max() <= 1e-12


# -- residual block and init ------------------------------------------------------


def test_residual_block_with_zero_convs_is_identity():
    block = L.ComplexResidualBlock("blk", 3, 3, np.random.default_rng(16))
    for conv in (block.conv1, block.conv2):
        conv.A.value = np.zeros_like(conv.A.value)
        conv.B.value = np.zeros_like(conv.B.value)
    x = crand(np.random.default_rng(17), (4, 3, 6, 6))
    t = Tape()
    assert block.forward(t, t.constant(x), True).value == x
    assert block.projection is None


def test_residual_block_projection_doubles_channels():
    block = L.ComplexResidualBlock("blk", 2, 4, np.random.default_rng(18))
    assert block.projection is not None
    t = Tape()
    out = block.forward(t, t.constant(crand(np.random.default_rng(19), (3, 2, 8, 8))), True)
    assert out.shape == (3, 4, 8, 8)


def test_rayleigh_init_mean_modulus():
    shape = (100, 10, 10, 10)
    a, b = L.init_complex_weights(shape, np.random.default_rng(20))
    sigma = 1 / np.sqrt(1000)
    assert np.hypot(a, b).mean() == pytest.approx(sigma * np.sqrt(np.pi / 2), rel=0.02)


def test_init_is_reproducible_and_scales_with_fan_in():
    a1, b1 = L.init_complex_weights((8, 4, 3, 3), np.random.default_rng(21))
    a2, b2 = L.init_complex_weights((8, 4, 3, 3), np.random.default_rng(21))
    assert np.array_equal(a1, a2) and np.array_equal(b1, b2)
    small = L.init_complex_weights((400, 500), np.random.default_rng(22))
    big = L.init_complex_weights((400, 1000), np.random.default_rng(22))
    ratio = np.hypot(*small).mean() / np.hypot(*big).mean()
    assert ratio == pytest.approx(np.sqrt(2), rel=0.02)


def test_glorot_scheme_and_unknown_scheme():
    a, b = L.init_complex_weights((30, 20), np.random.default_rng(23), "glorot")
    lim = np.sqrt(6 / 50)
    assert np.abs(a).max() <= lim and np.abs(b).max() <= lim
    with pytest.raises(ValueError):
        L.init_complex_weights((3, 3), np.random.default_rng(0), "xavier")


def test_parameter_names_follow_module_paths():
    block = L.ComplexResidualBlock("feature.block2", 2, 4, np.random.default_rng(0))
    names = [n for n, _ in block.named_parameters()]
    assert "feature.block2.conv1.A" in names and "feature.block2.proj.bias" in names
    assert "feature.block2.bn1.gamma_r" in names
