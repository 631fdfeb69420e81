import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cvpatch import ctensor as ct
from cvpatch.checks import naive_dft2d
from cvpatch.ctensor import ComplexTensor, FormatError, ShapeError


def c(re, im):
    return ComplexTensor(np.asarray(re, float), np.asarray(im, float))


def test_new_echoes_parts():
    z = ct.new([1, 2], [3, 4])
    assert z.real.tolist() == [1, 2] and z.imag.tolist() == [3, 4]
    assert z.shape == (2,)


def test_from_real_sets_zero_imag():
    z = ct.from_real([5])
    assert z.real.tolist() == [5] and z.imag.tolist() == [0]


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        ct.new(np.zeros((2, 3)), np.zeros((3, 2)))


def test_float32_optional_and_default_float64():
    assert ct.new([1.0], [2.0]).dtype == np.float64
    assert ComplexTensor([1.0], [2.0], dtype=np.float32).dtype == np.float32


@pytest.mark.parametrize("a, b, op, want", [
    ((0, 1), (0, 1), ct.cmul, (-1, 0)),
    ((1, 2), (3, -2), ct.cadd, (4, 0)),
    ((2, 3), (4, -1), ct.cmul, (11, 10)),
    ((2, 3), (4, -1), ct.csub, (-2, 4)),
])
def test_scalar_arithmetic(a, b, op, want):
    z = op(c([a[0]], [a[1]]), c([b[0]], [b[1]]))
    assert (z.real[0], z.imag[0]) == want


def test_cmul_matches_numpy_complex():
    rng = np.random.default_rng(1)
    a = ComplexTensor(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))
    b = ComplexTensor(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))
    np.testing.assert_allclose(ct.cmul(a, b).numpy(), a.numpy() * b.numpy(), rtol=1e-14)


def test_broadcast_leading_batch_and_scalar():
    a = ComplexTensor(np.ones((4, 3)), np.zeros((4, 3)))
    assert ct.cadd(a, ComplexTensor(np.ones((1, 3)), np.ones((1, 3)))).shape == (4, 3)
    assert ct.cmul(a, ct.new([2.0], [0.0])).shape == (4, 3)
    with pytest.raises(ShapeError):
        ct.cadd(a, ComplexTensor(np.ones((4, 1)), np.ones((4, 1))))
    with pytest.raises(ShapeError):
        ct.cadd(a, ComplexTensor(np.ones((2, 3)), np.ones((2, 3))))


@pytest.mark.parametrize("re, im, want", [(3, 4, 5.0), (0, 0, 0.0), (1, 1, np.sqrt(2))])
def test_modulus_examples(re, im, want):
    assert ct.modulus(c([re], [im]))[0] == pytest.approx(want, abs=1e-15)


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def ctensors(shape=(5,)):
    return st.builds(lambda r, i: ComplexTensor(r, i),
                     arrays(np.float64, shape, elements=finite),
                     arrays(np.float64, shape, elements=finite))


@settings(max_examples=200, deadline=None)
@given(ctensors(), ctensors(), ctensors())
def test_algebraic_properties(a, b, d):
    assert ct.cmul(a, b) == ct.cmul(b, a)
    left = ct.cadd(ct.cadd(a, b), d)
    right = ct.cadd(a, ct.cadd(b, d))
    scale = np.maximum(1.0, np.abs(a.real) + np.abs(b.real) + np.abs(d.real))
    assert np.all(np.abs(left.real - right.real) <= 1e-12 * scale)
    assert ct.cmul(a, ct.from_real([1.0])) == a
    lhs = ct.modulus(ct.cmul(a, b))
    rhs = ct.modulus(a) * ct.modulus(b)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-300)


def test_dft_constant_map_is_dc_only():
    x = np.full((1, 1, 2, 2), 3.0)
    z = ct.dft2d(x)
    assert z.real[0, 0, 0, 0] == 12.0 and z.imag[0, 0, 0, 0] == 0.0
    mask = np.ones((2, 2), bool)
    mask[0, 0] = False
    assert np.all(z.real[0, 0][mask] == 0) and np.all(z.imag == 0)


def test_dft_zero_map():
    z = ct.dft2d(np.zeros((2, 3, 4, 4)))
    assert np.all(z.real == 0) and np.all(z.imag == 0)


def test_dft_random_4x4_matches_naive_oracle():
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
    got = ct.dft2d(x).numpy()
    assert np.abs(got - naive_dft2d(x)).max() <= 1e-10


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_dft_oracle_and_parseval_property(h, w, seed):
    x = np.random.default_rng(seed).normal(size=(2, 2, h, w))
    z = ct.dft2d(x)
    assert np.abs(z.numpy() - naive_dft2d(x)).max() <= 1e-10
    energy = np.sum(z.real ** 2 + z.imag ** 2)
    assert abs(energy - h * w * np.sum(x ** 2)) <= 1e-8 * h * w * np.sum(x ** 2)


def test_dft_is_per_channel():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 5, 5))
    z = ct.dft2d(x)
    one = ct.dft2d(x[1:2, 2:3])
    np.testing.assert_array_equal(z.real[1:2, 2:3], one.real)


def test_reshape_preserves_row_major_order():
    z = ct.new(np.arange(6.0).reshape(2, 3), -np.arange(6.0).reshape(2, 3))
    r = ct.reshape(z, (6,))
    assert r.real.tolist() == list(range(6)) and r.imag.tolist() == [-v for v in range(6)]
    with pytest.raises(ShapeError):
        ct.reshape(z, (4,))


def test_concat_and_slice_round_trip():
    rng = np.random.default_rng(0)
    a = ComplexTensor(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))
    b = ComplexTensor(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))
    ab = ct.concat([a, b], axis=-1)
    assert ab.shape == (3, 8)
    back = ct.concat([ct.slice_(ab, 0, 4), ct.slice_(ab, 4, 8)], axis=-1)
    assert back == ab
    with pytest.raises(ShapeError):
        ct.concat([a, ComplexTensor(np.zeros((2, 5)), np.zeros((2, 5)))], axis=0)
    with pytest.raises(ShapeError):
        ct.slice_(ab, 5, 3)


def test_transpose_moves_both_parts():
    rng = np.random.default_rng(0)
    a = ComplexTensor(rng.normal(size=(2, 3)), rng.normal(size=(2, 3)))
    t = ct.transpose(a)
    np.testing.assert_array_equal(t.imag, a.imag.T)
    with pytest.raises(ShapeError):
        ct.transpose(a, (0, 0))


def test_validity_check_detects_nonfinite():
    assert ct.is_valid(ct.new([1.0], [2.0]))
    assert not ct.is_valid(ct.new([np.nan], [2.0]))
    assert not ct.is_valid(ct.new([1.0], [np.inf]))


def test_public_ops_do_not_mutate_inputs():
    a = ct.new([1.0, 2.0], [3.0, 4.0])
    before = (a.real.copy(), a.imag.copy())
    ct.cmul(a, a), ct.cadd(a, a), ct.reshape(a, (2, 1)), a.conj()
    assert np.array_equal(a.real, before[0]) and np.array_equal(a.imag, before[1])


@pytest.mark.parametrize("value", [
    ComplexTensor(np.arange(6.0).reshape(2, 3), np.ones((2, 3))),
    ComplexTensor(np.arange(4.0), np.zeros(4), dtype=np.float32),
    np.arange(5.0),
    np.arange(5.0, dtype=np.float32).reshape(5, 1),
    np.arange(7, dtype=np.int64),
])
def test_tensor_container_round_trip(value):
    buf = io.BytesIO()
    ct.write_tensor(buf, value)
    buf.seek(0)
    back = ct.read_tensor(buf)
    if isinstance(value, ComplexTensor):
        assert back == value and back.dtype == value.dtype
    else:
        assert back.dtype == value.dtype and np.array_equal(back, value)


def test_container_header_layout():
    buf = io.BytesIO()
    ct.write_tensor(buf, ct.new([[1.0, 2.0]], [[3.0, 4.0]]))
    raw = buf.getvalue()
    assert raw[:4] == b"CXT1"
    code, rank, d0, d1 = np.frombuffer(raw[4:36], dtype="<u8")
    assert (code, rank, d0, d1) == (1, 2, 1, 2)
    assert np.frombuffer(raw[36:], dtype="<f8").tolist() == [1.0, 2.0, 3.0, 4.0]


def test_container_rejects_garbage():
    with pytest.raises(FormatError):
        ct.read_tensor(io.BytesIO(b"NOPE" + bytes(20)))
    buf = io.BytesIO()
    ct.write_tensor(buf, np.arange(4.0))
    with pytest.raises(FormatError):
        ct.read_tensor(io.BytesIO(buf.getvalue()[:-3]))


def test_bundle_round_trip(tmp_path):
    tensors = {"a": np.arange(3.0), "b/c": ct.new([1.0], [2.0])}
    buf = io.BytesIO()
    ct.write_bundle(buf, tensors)
    buf.seek(0)
    back = ct.read_bundle(buf)
    assert list(back) == ["a", "b/c"]
    assert np.array_equal(back["a"], tensors["a"]) and back["b/c"] == tensors["b/c"]
    assert ct.bundle_bytes(tensors) == buf.getvalue()
