import numpy as np
import pytest

from tfno import ndtensor as nd
from tfno.ndtensor import ComplexTensor, ShapeError, Tensor


def test_shape_data_invariant():
    t = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert t.shape == (2, 2)
    assert t.data.size == 4
    assert t.data.dtype == np.float64


def test_checked_mode_rejects_nonfinite():
    assert nd.checked_enabled()
    with pytest.raises(ValueError):
        Tensor([1.0, np.nan])
    with pytest.raises(ValueError):
        Tensor([np.inf])
    with pytest.raises(ValueError):
        ComplexTensor([1.0 + 1j * np.nan])


def test_checked_off_allows_nonfinite():
    with nd.checked_off():
        t = Tensor([np.nan])
    assert np.isnan(t.data[0])


def test_tensor_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 9.0
    with pytest.raises(AttributeError):
        t.data = np.zeros(2)


def test_complex_interleaved_pairs():
    c = ComplexTensor([1.0 + 2.0j, 3.0 - 4.0j])
    raw = c.data.view(np.float64)
    assert raw.tolist() == [1.0, 2.0, 3.0, -4.0]


def test_hermitian_flag_from_rfftn():
    from tfno.fourier import rfftn

    v = Tensor(np.arange(8.0))
    assert rfftn(v, axes=(0,)).hermitian
    assert not ComplexTensor([1.0 + 0j]).hermitian


def test_add_identity():
    x = Tensor(np.arange(4.0).reshape(2, 2))
    out = nd.add(nd.zeros(2, 2), x)
    np.testing.assert_array_equal(out.data, x.data)


def test_binary_shape_mismatch_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
        nd.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_gelu_zero_is_zero():
    out = nd.gelu(Tensor([0.0]))
    assert out.data[0] == 0.0


def test_gelu_matches_erf_formula(rng):
    from scipy.special import erf

    x = rng.standard_normal(100)
    out = nd.gelu(Tensor(x))
    expect = 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))
    np.testing.assert_allclose(out.data, expect, rtol=1e-14, atol=1e-16)


def test_mul_adjoint_product_rule():
    a, b = Tensor(np.asarray(2.0)), Tensor(np.asarray(3.0))
    with nd.Tape() as tape:
        loss = nd.mul(a, b)
    grads = tape.gradients(loss, [a, b])
    assert grads[a.node_id] == 3.0
    assert grads[b.node_id] == 2.0


def test_channel_matmul_identity_and_zero(rng):
    v = Tensor(rng.standard_normal((2, 3, 4)))
    out = nd.channel_matmul(v, Tensor(np.eye(3)))
    np.testing.assert_array_equal(out.data, v.data)
    out0 = nd.channel_matmul(v, nd.zeros(3, 3))
    assert not out0.data.any()


def test_channel_matmul_matches_loop_oracle(rng):
    v = rng.standard_normal((1, 3, 4))
    w = rng.standard_normal((2, 3))
    out = nd.channel_matmul(Tensor(v), Tensor(w))
    naive = np.zeros((1, 2, 4))
    for b in range(1):
        for o in range(2):
            for s in range(4):
                for i in range(3):
                    naive[b, o, s] += w[o, i] * v[b, i, s]
    np.testing.assert_allclose(out.data, naive, atol=1e-13)


def test_channel_matmul_extent_mismatch():
    with pytest.raises(ShapeError):
        nd.channel_matmul(Tensor(np.zeros((1, 3, 4))), Tensor(np.zeros((2, 5))))


def test_scalar_scale_allowed_without_matching_shape():
    t = Tensor([1.0, 2.0])
    np.testing.assert_array_equal(nd.scale(t, 2.0).data, [2.0, 4.0])
    np.testing.assert_array_equal((t * 3.0).data, [3.0, 6.0])


def test_fd_diff_linear_ramp_exact_interior():
    y = Tensor(np.arange(8.0)[None, None, :])
    d = nd.fd_diff(y, axis=2)
    np.testing.assert_allclose(d.data[0, 0], np.ones(8))


def test_fd_diff_constant_zero():
    d = nd.fd_diff(Tensor(np.full((1, 1, 6), 3.5)), axis=2)
    assert not d.data.any()


def test_fd_diff_needs_three_points():
    with pytest.raises(ShapeError):
        nd.fd_diff(Tensor(np.zeros((1, 1, 2))), axis=2)
