import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tfno import ndtensor as nd
from tfno.fourier import (irfftn, irfftn_array, rfftn, rfftn_array, use_fft_backend)
from tfno.ndtensor import ShapeError, Tensor

BACKENDS = ("radix2", "pocketfft")


def naive_dft_1d(x):
    """O(n^2) reference transform written directly from the definition."""
    n = len(x)
    out = np.zeros(n, dtype=np.complex128)
    for k in range(n):
        for j in range(n):
            out[k] += x[j] * np.exp(-2j * np.pi * k * j / n)
    return out


def naive_rfftn(x, axes):
    """Apply dense DFT matrices axis by axis, then keep the half spectrum."""
    y = x.astype(np.complex128)
    for ax in axes:
        n = y.shape[ax]
        f = np.exp(-2j * np.pi * np.outer(np.arange(n), np.arange(n)) / n)
        y = np.moveaxis(np.tensordot(f, np.moveaxis(y, ax, 0), axes=([1], [0])), 0, ax)
    sl = [slice(None)] * y.ndim
    sl[axes[-1]] = slice(0, x.shape[axes[-1]] // 2 + 1)
    return y[tuple(sl)]


@pytest.mark.parametrize("backend", BACKENDS)
def test_matches_naive_dft_1d(backend, rng):
    x = rng.standard_normal(16)
    with use_fft_backend(backend):
        got = rfftn_array(x, axes=(0,))
    expect = naive_dft_1d(x)[:9]
    np.testing.assert_allclose(got, expect, atol=1e-10)


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("shape", [(8,), (4, 8), (8, 4, 16), (2, 2, 2)])
def test_matches_naive_dft_nd(backend, shape, rng):
    x = rng.standard_normal(shape)
    axes = tuple(range(len(shape)))
    with use_fft_backend(backend):
        got = rfftn_array(x, axes)
    np.testing.assert_allclose(got, naive_rfftn(x, axes), atol=1e-10)


@pytest.mark.parametrize("backend", BACKENDS)
def test_constant_field_concentrates_in_mode_zero(backend):
    c = 2.5
    x = np.full((8, 8), c)
    with use_fft_backend(backend):
        v = rfftn_array(x, axes=(0, 1))
    assert abs(v[0, 0] - c * 64) < 1e-12
    v[0, 0] = 0.0
    assert np.abs(v).max() < 1e-12


@pytest.mark.parametrize("backend", BACKENDS)
def test_parseval(backend, rng):
    x = rng.standard_normal((8, 16))
    with use_fft_backend(backend):
        full = rfftn_array(x, axes=(0, 1))
    # rebuild full spectrum energy: interior half-spectrum columns count twice
    e = (np.sum(np.abs(full[:, 0]) ** 2) + np.sum(np.abs(full[:, -1]) ** 2)
         + 2 * np.sum(np.abs(full[:, 1:-1]) ** 2))
    assert abs(np.sum(x**2) - e / x.size) < 1e-10 * max(1.0, np.sum(x**2))


@pytest.mark.parametrize("backend", BACKENDS)
def test_linearity(backend, rng):
    a = rng.standard_normal((4, 8))
    b = rng.standard_normal((4, 8))
    with use_fft_backend(backend):
        lhs = rfftn_array(2.5 * a - 1.25 * b, axes=(0, 1))
        rhs = 2.5 * rfftn_array(a, axes=(0, 1)) - 1.25 * rfftn_array(b, axes=(0, 1))
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("shape", [(2,), (4,), (64,), (8, 8), (4, 16, 2),
                                   (32, 64), (64, 64), (16, 8, 4)])
def test_roundtrip_all_pow2_shapes_up_to_64(backend, shape, rng):
    x = rng.standard_normal(shape)
    axes = tuple(range(len(shape)))
    with use_fft_backend(backend):
        v = rfftn_array(x, axes)
        y = irfftn_array(v, axes, shape)
    np.testing.assert_allclose(y, x, atol=1e-12)


def test_backends_agree(rng):
    x = rng.standard_normal((4, 8, 16))
    with use_fft_backend("radix2"):
        a = rfftn_array(x, (0, 1, 2))
    with use_fft_backend("pocketfft"):
        b = rfftn_array(x, (0, 1, 2))
    np.testing.assert_allclose(a, b, atol=1e-11)


def test_non_power_of_two_suggests_padding():
    with pytest.raises(ShapeError, match="pad"):
        rfftn_array(np.zeros(12), axes=(0,))


def test_irfftn_layout_mismatch():
    v = np.zeros((4, 5), dtype=np.complex128)
    with pytest.raises(ShapeError):
        irfftn_array(v, (0, 1), (4, 16))
    with pytest.raises(ShapeError):
        irfftn_array(v, (0, 1), (8, 8))


def test_mode_zero_spectrum_gives_constant():
    v = np.zeros((4, 3), dtype=np.complex128)
    v[0, 0] = 2.0 * 4 * 4
    out = irfftn_array(v, (0, 1), (4, 4))
    np.testing.assert_allclose(out, 2.0, atol=1e-12)


def test_zero_spectrum_gives_zero_field():
    out = irfftn_array(np.zeros((4, 3), dtype=np.complex128), (0, 1), (4, 4))
    assert not out.any()


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=10)
def test_roundtrip_property(seed):
    x = np.random.default_rng(seed).standard_normal((4, 8))
    y = irfftn_array(rfftn_array(x, (0, 1)), (0, 1), (4, 8))
    assert np.abs(y - x).max() < 1e-12


@pytest.mark.parametrize("backend", BACKENDS)
def test_rfftn_adjoint_dot_product(backend, rng):
    with use_fft_backend(backend):
        x = Tensor(rng.standard_normal((3, 8, 16)))
        with nd.Tape() as tape:
            v = rfftn(x, axes=(1, 2))
        y = rng.standard_normal(v.shape) + 1j * rng.standard_normal(v.shape)
        lhs = np.sum(v.data.real * y.real + v.data.imag * y.imag)
        (xbar,) = tape.entries[-1].backward(y)
        rhs = np.sum(x.data * xbar)
    assert abs(lhs - rhs) < 1e-9 * abs(lhs)


@pytest.mark.parametrize("backend", BACKENDS)
def test_irfftn_adjoint_dot_product(backend, rng):
    from tfno.ndtensor import ComplexTensor

    with use_fft_backend(backend):
        spec = rng.standard_normal((3, 8, 9)) + 1j * rng.standard_normal((3, 8, 9))
        v = ComplexTensor(spec)
        with nd.Tape() as tape:
            y = irfftn(v, axes=(1, 2), out_extents=(8, 16))
        g = rng.standard_normal(y.shape)
        lhs = np.sum(y.data * g)
        (vbar,) = tape.entries[-1].backward(g)
        rhs = np.sum(v.data.real * vbar.real + v.data.imag * vbar.imag)
    assert abs(lhs - rhs) < 1e-9 * abs(lhs)
