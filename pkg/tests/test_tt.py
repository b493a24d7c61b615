import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tfno import ndtensor as nd
from tfno.ndtensor import ShapeError, Tensor
from tfno.tt import (TTCores, TTSpec, matched_init_scale, tt_contract,
                     tt_contract_array, tt_param_count, tt_random_init, tt_svd)


def literal_reconstruction(cores):
    """Nested-loop sum over the internal rank indices, straight from the
    chain-product definition."""
    dims = [c.shape[1] for c in cores]
    ranks = [c.shape[2] for c in cores]
    out = np.zeros(dims)
    for idx in np.ndindex(*dims):
        total = 0.0
        for alphas in np.ndindex(*ranks[:-1]):
            a = (0,) + alphas + (0,)
            prod = 1.0
            for k in range(len(cores)):
                prod *= cores[k].data[a[k], idx[k], a[k + 1]]
            total += prod
        out[idx] = total
    return out


def test_contract_matches_nested_loop_oracle():
    spec = TTSpec(shape=(3, 4, 2, 3), ranks=(2, 3, 2), init_scale=0.7)
    cores = tt_random_init(spec, seed=42)
    dense = tt_contract(cores)
    np.testing.assert_allclose(dense.data, literal_reconstruction(cores.cores), atol=1e-12)


def test_all_ones_rank_one_chain():
    cores = TTCores([Tensor(np.ones((1, 3, 1))), Tensor(np.ones((1, 2, 1)))])
    np.testing.assert_array_equal(tt_contract(cores).data, np.ones((3, 2)))


def test_two_core_case_is_matrix_product(rng):
    g1 = rng.standard_normal((1, 4, 3))
    g2 = rng.standard_normal((3, 5, 1))
    dense = tt_contract(TTCores([Tensor(g1), Tensor(g2)]))
    expect = g1.reshape(4, 3) @ g2.reshape(3, 5)
    np.testing.assert_allclose(dense.data, expect, atol=1e-13)


def test_rank_chain_mismatch_rejected():
    with pytest.raises(ShapeError):
        TTCores([Tensor(np.zeros((1, 3, 2))), Tensor(np.zeros((3, 2, 1)))])


def test_boundary_ranks_must_be_one():
    with pytest.raises(ShapeError):
        TTCores([Tensor(np.zeros((2, 3, 1))), Tensor(np.zeros((1, 2, 1)))])


def test_same_seed_identical_cores():
    spec = TTSpec((4, 4, 4), (2, 2))
    a = tt_random_init(spec, seed=9)
    b = tt_random_init(spec, seed=9)
    for x, y in zip(a, b):
        assert x.data.tobytes() == y.data.tobytes()


def test_zero_scale_rank_one_gives_zero_tensor():
    spec = TTSpec((3, 3), (1,), init_scale=0.0)
    cores = tt_random_init(spec, seed=1)
    assert not tt_contract_array(cores).any()


def test_param_count_formula():
    spec = TTSpec((16, 16, 32, 32), (4, 4, 4))
    assert tt_param_count(spec) == 1 * 16 * 4 + 4 * 16 * 4 + 4 * 32 * 4 + 4 * 32 * 1
    assert tt_param_count(spec) == 960


def test_param_count_all_ranks_one():
    spec = TTSpec((5, 7, 3), (1, 1))
    assert tt_param_count(spec) == 5 + 7 + 3


def test_param_count_below_dense_for_modest_ranks():
    shape, ranks = (12, 12, 8, 24, 12), (8, 8, 8, 8)
    assert tt_param_count(TTSpec(shape, ranks)) < int(np.prod(shape))


def test_init_variance_matches_glorot_target():
    # spec'd calibration case: dense Glorot-style target on (16,16,32,32)
    shape, ranks = (16, 16, 32, 32), (2, 2, 2)
    target = 2.0 / (16 * 16 + 32 * 32)
    scale = matched_init_scale(shape, ranks, target)
    spec = TTSpec(shape, ranks, init_scale=scale)
    total = 0.0
    n_seeds = 100
    for seed in range(n_seeds):
        entries = tt_contract_array(tt_random_init(spec, seed=seed))
        total += float(np.mean(entries**2))
    measured = total / n_seeds
    assert target / 10 < measured < target * 10


def test_svd_roundtrip_full_rank(rng):
    x = Tensor(rng.standard_normal((4, 3, 5, 2)))
    rec = tt_contract_array(tt_svd(x, (4, 12, 2)))
    np.testing.assert_allclose(rec, x.data, atol=1e-10)


def test_svd_recovers_known_rank_two_chain(rng):
    spec = TTSpec((5, 4, 6), (2, 2), init_scale=1.0)
    dense = tt_contract_array(tt_random_init(spec, seed=3))
    rec = tt_svd(Tensor(dense), (5, 6))
    assert all(r <= 2 for r in rec.ranks)
    np.testing.assert_allclose(tt_contract_array(rec), dense, atol=1e-10)


def test_svd_rank_one_outer_product(rng):
    u, v = rng.standard_normal(6), rng.standard_normal(5)
    outer = np.outer(u, v)
    rec = tt_svd(Tensor(outer), (1,))
    assert rec.ranks == (1,)
    np.testing.assert_allclose(tt_contract_array(rec), outer, atol=1e-12)


def test_svd_truncation_error_monotone(rng):
    x = rng.standard_normal((6, 6, 6))
    errs = []
    for r in (1, 2, 4):
        rec = tt_contract_array(tt_svd(Tensor(x), (r, r)))
        errs.append(np.linalg.norm(rec - x))
    assert errs[0] >= errs[1] >= errs[2]


@given(st.floats(min_value=-2.0, max_value=2.0), st.integers(0, 3))
@settings(max_examples=15)
def test_contraction_multilinear_in_each_core(alpha, which):
    spec = TTSpec((3, 2, 4, 2), (2, 2, 2), init_scale=0.8)
    cores = tt_random_init(spec, seed=17)
    base = tt_contract_array(cores)
    scaled = [Tensor(c.data * alpha) if k == which else c for k, c in enumerate(cores)]
    got = tt_contract_array(TTCores(scaled))
    np.testing.assert_allclose(got, alpha * base, atol=1e-10)


def test_gradient_flows_through_contraction(rng):
    spec = TTSpec((3, 4, 2), (2, 2), init_scale=0.7)
    cores = tt_random_init(spec, seed=5)
    target = rng.standard_normal((3, 4, 2))

    def f(theta):
        replaced = TTCores([theta, cores.cores[1], cores.cores[2]])
        return nd.sum_abs_pow(nd.sub(tt_contract(replaced), Tensor(target)), 2.0)

    rep = nd.grad_check(f, cores.cores[0], 1e-5)
    assert rep.passed(1e-5)
