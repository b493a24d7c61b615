import numpy as np
import pytest

from tfno import ndtensor as nd
from tfno.fno import (NeuralOperator, OperatorConfig, expected_param_shapes,
                      mode_geometry, spectral_conv)
from tfno.losses import LossWeights, total_loss
from tfno.ndtensor import ShapeError, Tensor
from tfno.tt import TTSpec, tt_param_count

TINY = OperatorConfig(layers=2, modes=(5, 4, 3), d_v=3, d_a=2, d_u=1, power=2,
                      lift_width=4, proj_width=4)


def identity_weight(cfg):
    w = np.zeros(cfg.weight_shape())
    for i in range(cfg.d_v):
        w[:, :, :, i, i] = 1.0
    return Tensor(w)


@pytest.fixture
def model():
    return NeuralOperator.init(TINY, seed=7)


@pytest.fixture
def field(rng):
    return Tensor(rng.standard_normal((2, 3, 8, 8, 8)))


# ---- lifting ---------------------------------------------------------------


def test_lift_zero_weights_gives_zero_field(model, rng):
    zeroed = {k: (nd.zeros(*v.shape) if k.startswith("p.") else v)
              for k, v in model.params.items()}
    a = Tensor(rng.standard_normal((1, 2, 4, 4, 4)))
    out = model.with_params(zeroed).lift(a)
    assert not out.data.any()


def test_lift_pointwise_identical_inputs_identical_outputs(model):
    a = np.zeros((1, 2, 4, 4, 2))
    a[0, :, 1, 2, 0] = [0.3, -0.7]
    a[0, :, 3, 0, 1] = [0.3, -0.7]
    out = model.lift(Tensor(a)).data
    np.testing.assert_array_equal(out[0, :, 1, 2, 0], out[0, :, 3, 0, 1])


def test_lift_matches_per_point_loop(model, rng):
    a = rng.standard_normal((1, 2, 4, 4, 2))
    out = model.lift(Tensor(a)).data
    p = model.params
    for (x, y, t) in [(0, 0, 0), (3, 1, 1), (2, 3, 0)]:
        v = a[0, :, x, y, t]
        h = p["p.w1"].data @ v + p["p.b1"].data
        h = 0.5 * h * (1 + np.vectorize(np.math.erf if hasattr(np, "math") else __import__("math").erf)(h / np.sqrt(2)))
        expect = p["p.w2"].data @ h + p["p.b2"].data
        np.testing.assert_allclose(out[0, :, x, y, t], expect, atol=1e-13)


def test_lift_channel_mismatch(model, rng):
    with pytest.raises(ShapeError):
        model.lift(Tensor(rng.standard_normal((1, 5, 4, 4, 4))))


def test_pointwise_maps_commute_with_spatial_permutation(model, rng):
    a = rng.standard_normal((1, 2, 4, 4, 2))
    perm = rng.permutation(16)
    flat = a.reshape(1, 2, 16, 2)[:, :, perm]
    out_perm = model.lift(Tensor(flat.reshape(1, 2, 4, 4, 2))).data.reshape(1, 3, 16, 2)
    out = model.lift(Tensor(a)).data.reshape(1, 3, 16, 2)
    np.testing.assert_allclose(out_perm, out[:, :, perm], atol=0)


# ---- spectral convolution --------------------------------------------------


def test_identity_weights_all_modes_retained_is_identity(field):
    cfg = OperatorConfig(layers=1, modes=(8, 8, 5), d_v=3, d_a=2, d_u=1, power=1,
                         lift_width=4, proj_width=4)
    out = spectral_conv(field, identity_weight(cfg), cfg, power=1)
    np.testing.assert_allclose(out.data, field.data, atol=1e-12)


def test_power_one_equals_manual_fft_pipeline(model, field):
    """r=1 must reduce to the plain band-limited per-mode multiply."""
    from tfno.fourier import irfftn_array, rfftn_array
    from tfno.tt import tt_contract_array

    cfg = TINY
    w5 = model.params["layer0.r5"]
    got = spectral_conv(field, w5, cfg, power=1).data

    geom = mode_geometry(cfg, field.shape[2:])
    spec = rfftn_array(field.data, (2, 3, 4))
    ci = cfg.d_v
    re = w5.data[:, :, :, :ci, :]
    im = w5.data[:, :, :, ci:, :]
    r = (re + 1j * im).transpose(0, 1, 2, 4, 3)
    for p in geom.selfconj_planes:
        blk = r[:, :, p].copy()
        r[:, :, p] = 0.5 * (blk + np.conj(blk[geom.mirror_x][:, geom.mirror_y]))
    ix, iy, it = geom.index_grids
    z = np.zeros_like(spec)
    for a, fa in enumerate(ix):
        for b, fb in enumerate(iy):
            for c, fc in enumerate(it):
                z[:, :, fa, fb, fc] = spec[:, :, fa, fb, fc] @ r[a, b, c].T
    expect = irfftn_array(z, (2, 3, 4), field.shape[2:])
    np.testing.assert_allclose(got, expect, atol=1e-11)


@pytest.mark.parametrize("r", [1, 2, 3, 4])
def test_operator_power_composes(model, field, r):
    w5 = model.params["layer0.r5"]
    seq = field
    for _ in range(r):
        seq = spectral_conv(seq, w5, TINY, power=1)
    onego = spectral_conv(field, w5, TINY, power=r)
    denom = max(1.0, np.abs(onego.data).max())
    assert np.abs(seq.data - onego.data).max() / denom < 1e-10


def test_band_limit_projection_idempotent(field):
    cfg = OperatorConfig(layers=1, modes=(4, 3, 2), d_v=3, d_a=2, d_u=1, power=1,
                         lift_width=4, proj_width=4)
    wid = identity_weight(cfg)
    once = spectral_conv(field, wid, cfg, power=1)
    twice = spectral_conv(once, wid, cfg, power=1)
    np.testing.assert_allclose(twice.data, once.data, atol=1e-12)


def test_mode_bounds_checked(field):
    toomany = OperatorConfig(layers=1, modes=(5, 4, 6), d_v=3, d_a=2, d_u=1, power=1,
                             lift_width=4, proj_width=4)
    with pytest.raises(ShapeError):
        spectral_conv(field, identity_weight(toomany), toomany)


def test_nonconforming_weight_shape_rejected(model, field):
    bad = Tensor(np.zeros((5, 4, 3, 4, 3)))
    with pytest.raises(ShapeError):
        spectral_conv(field, bad, TINY)


def test_layer_gradient_check(model, rng):
    v = Tensor(rng.standard_normal((1, 3, 8, 8, 4)))
    name = "layer0.r5"

    def f(theta):
        m = model.with_params({**model.params, name: theta})
        return nd.sum_abs_pow(m.layer_forward(v, 0), 2.0)

    assert nd.grad_check(f, model.params[name], 1e-5).passed(1e-4)


def test_layer_zero_weights_give_zero_gelu_field(model, rng):
    v = Tensor(rng.standard_normal((1, 3, 8, 8, 4)))
    zeroed = dict(model.params)
    zeroed["layer0.w"] = nd.zeros(3, 3)
    zeroed["layer0.r5"] = nd.zeros(*TINY.weight_shape())
    out = model.with_params(zeroed).layer_forward(v, 0)
    assert not out.data.any()  # gelu(0) == 0


def test_layer_identity_activation_zero_spectral_is_bypass(model, rng):
    cfg = OperatorConfig(layers=1, modes=(3, 3, 2), d_v=3, d_a=2, d_u=1, power=1,
                         lift_width=4, proj_width=4, activation="identity")
    m = NeuralOperator.init(cfg, seed=1)
    params = dict(m.params)
    params["layer0.r5"] = nd.zeros(*cfg.weight_shape())
    m = m.with_params(params)
    v = Tensor(rng.standard_normal((1, 3, 4, 4, 4)))
    out = m.layer_forward(v, 0)
    expect = nd.channel_matmul(v, params["layer0.w"])
    np.testing.assert_allclose(out.data, expect.data, atol=1e-14)


# ---- whole model -----------------------------------------------------------


def test_forward_deterministic(model, rng):
    a = Tensor(rng.standard_normal((2, 2, 8, 8, 4)))
    u1 = model.forward(a)
    u2 = NeuralOperator.init(TINY, seed=7).forward(a)
    assert u1.data.tobytes() == u2.data.tobytes()


def test_batch_permutation_equivariance(model, rng):
    a = rng.standard_normal((3, 2, 8, 8, 4))
    out = model.forward(Tensor(a)).data
    perm = [2, 0, 1]
    out_p = model.forward(Tensor(a[perm])).data
    np.testing.assert_allclose(out_p, out[perm], atol=0)


def test_resolution_transfer(rng):
    """A model built at 32^2 and evaluated on a 64^2 resampling of the same
    smooth input must predict (nearly) the same function: comparing the two
    predictions where the grids coincide removes any interpolation error
    from the check itself."""
    cfg = OperatorConfig(layers=2, modes=(5, 5, 3), d_v=4, d_a=2, d_u=1, power=2,
                         lift_width=6, proj_width=6)
    m = NeuralOperator.init(cfg, seed=3)

    def smooth_input(n):
        x = np.linspace(0, 1, n, endpoint=False)
        t = np.linspace(0, 1, 4, endpoint=False)
        xx, yy, tt = np.meshgrid(x, x, t, indexing="ij")
        c0 = np.sin(2 * np.pi * xx) * np.cos(2 * np.pi * yy) + tt
        c1 = np.cos(2 * np.pi * (xx + yy)) * (1 + 0.2 * tt)
        return np.stack([c0, c1])[None]

    u32 = m.forward(Tensor(smooth_input(32))).data
    u64 = m.forward(Tensor(smooth_input(64))).data
    rel = np.linalg.norm(u64[:, :, ::2, ::2] - u32) / np.linalg.norm(u32)
    assert rel <= 0.10  # in practice ~1e-14: the operator transfers exactly


def test_reconstruct_shares_parameters_with_forward(model):
    # same parameter objects, by construction
    assert model.params["p.w1"] is model.params["p.w1"]
    a = Tensor(np.random.default_rng(0).standard_normal((1, 2, 4, 4, 4)))
    recon = model.reconstruct_initial(a)
    direct = model.project(model.lift(a))
    assert recon.data.tobytes() == direct.data.tobytes()


def test_reconstruct_zero_projection_gives_zero(model, rng):
    zeroed = {k: (nd.zeros(*v.shape) if k.startswith("q.") else v)
              for k, v in model.params.items()}
    a = Tensor(rng.standard_normal((1, 2, 4, 4, 4)))
    out = model.with_params(zeroed).reconstruct_initial(a)
    assert not out.data.any()


def test_all_parameters_receive_gradient(rng):
    for fact in ("dense", "tt"):
        cfg = OperatorConfig(layers=2, modes=(3, 3, 2), d_v=3, d_a=2, d_u=1, power=2,
                             lift_width=4, proj_width=4, factorization=fact,
                             tt_ranks=(2, 2, 2, 2))
        m = NeuralOperator.init(cfg, seed=11)
        a = Tensor(rng.standard_normal((2, 2, 4, 4, 4)))
        u = Tensor(rng.standard_normal((2, 1, 4, 4, 4)))
        u0 = Tensor(rng.standard_normal((2, 1, 4, 4)))
        with nd.Tape() as tape:
            loss, _, _ = total_loss(m, a, u, u0, LossWeights(1.0, 0.5))
        grads = tape.gradients(loss, m.params.values())
        for name, t in m.params.items():
            g = grads[t.node_id]
            assert np.abs(g).max() > 0, "%s got a dead gradient under %s" % (name, fact)


# ---- parameter accounting --------------------------------------------------


def test_dense_spectral_count_is_shape_product():
    cfg = OperatorConfig(layers=3, modes=(5, 4, 3), d_v=6, d_a=2, d_u=1,
                         factorization="dense", lift_width=4, proj_width=4)
    counts = NeuralOperator.init(cfg, 0).param_count()
    assert counts["spectral"] == 3 * 5 * 4 * 3 * (2 * 6) * 6
    assert counts["dense_equivalent"] == counts["spectral"]


def test_tt_count_sums_core_sizes():
    cfg = OperatorConfig(layers=2, modes=(5, 4, 3), d_v=6, d_a=2, d_u=1,
                         factorization="tt", tt_ranks=(3, 3, 3, 3),
                         lift_width=4, proj_width=4)
    m = NeuralOperator.init(cfg, 0)
    counts = m.param_count()
    per_layer = tt_param_count(TTSpec(cfg.weight_shape(), cfg.tt_ranks))
    assert counts["spectral"] == 2 * per_layer
    assert counts["spectral"] < counts["dense_equivalent"]
    total_direct = sum(v.size for v in m.params.values())
    assert counts["total"] == total_direct


def test_shipped_config_compression_bound():
    from tfno.config import default_dict, from_dict

    cfg = from_dict(default_dict()).operator
    assert cfg.factorization == "tt"
    counts = NeuralOperator.init(cfg, 0).param_count()
    assert counts["spectral"] <= 0.05 * counts["dense_equivalent"]


def test_expected_param_shapes_cover_init():
    for fact in ("dense", "tt"):
        cfg = OperatorConfig(layers=1, modes=(3, 3, 2), d_v=3, d_a=2, d_u=1,
                             factorization=fact, tt_ranks=(2, 2, 2, 2),
                             lift_width=4, proj_width=4)
        m = NeuralOperator.init(cfg, 0)
        assert set(m.params) == set(expected_param_shapes(cfg))
