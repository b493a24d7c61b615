"""Fourier neural operator with operator power and factorized spectral weights.

The model is Q . L_L . ... . L_1 . P with pointwise two-layer MLPs P and Q
and layers L(v) = act(W v + K^r v).  K applies a per-retained-mode complex
channel matrix in the spectrum of a 3-axis FFT over (x, y, t); the power r
applies that matrix r times, refining the layer's internal time step.
Spectral weights live in a real 5-mode tensor (modes_x, modes_y, modes_t,
2*ch_in, ch_out) and are either a dense parameter or the contraction of a
tensor train, so the two factorizations share one code path.

Retained frequency sets on the full axes are mirror-symmetric, and weights
on the self-conjugate time planes are conjugate-tied, which makes the
spectral kernel a real convolution kernel: operator powers then compose
exactly and the operator transfers across grid resolutions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndtensor as nd
from .fourier import irfftn, rfftn
from .ndtensor import ShapeError, Tensor
from .tt import TTCores, TTSpec, matched_init_scale, tt_contract, tt_param_count

ACTIVATIONS = {
    "gelu": nd.gelu,
    "relu": nd.relu,
    "identity": lambda t: t,
}


@dataclass(frozen=True)
class OperatorConfig:
    """Architecture of the operator; grid extents stay out of the config."""

    layers: int = 4
    modes: tuple = (16, 16, 8)
    d_v: int = 24
    d_a: int = 8
    d_u: int = 1
    power: int = 4
    factorization: str = "dense"
    tt_ranks: tuple = (8, 8, 8, 8)
    activation: str = "gelu"
    lift_width: int = 24
    proj_width: int = 24
    spectral_gain: float = 0.8

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("need at least one spectral layer")
        if self.power < 1:
            raise ValueError("operator power must be >= 1")
        if len(self.modes) != 3:
            raise ValueError("modes must list (x, y, t) retained counts")
        if any(m < 1 for m in self.modes):
            raise ValueError("retained mode counts must be >= 1")
        if self.factorization not in ("dense", "tt"):
            raise ValueError("factorization must be 'dense' or 'tt'")
        if self.factorization == "tt" and len(self.tt_ranks) != 4:
            raise ValueError("tt factorization of the 5-mode weight needs 4 ranks")
        if self.activation not in ACTIVATIONS:
            raise ValueError("unknown activation %r" % (self.activation,))

    def weight_shape(self) -> tuple:
        m1, m2, m3 = self.modes
        return (m1, m2, m3, 2 * self.d_v, self.d_v)


@dataclass(frozen=True)
class ModeGeometry:
    index_grids: tuple
    mirror_x: np.ndarray
    mirror_y: np.ndarray
    selfconj_planes: tuple
    spectral_shape: tuple


def _full_axis_frequencies(n: int, count: int) -> np.ndarray:
    """Mirror-symmetric retained frequency set of the requested size.

    Odd counts keep {0, +-1, .., +-h}; even counts additionally keep the
    axis Nyquist frequency n/2 (itself its own mirror), so the set stays
    closed under negation in every case.
    """
    if count > n:
        raise ShapeError("retained modes %d exceed axis extent %d" % (count, n))
    if count == n:
        return np.arange(n)
    if count % 2 == 0:
        h = count // 2 - 1
        low = np.arange(h + 1)
        high = np.arange(n - h, n) if h > 0 else np.array([], dtype=np.int64)
        return np.r_[low, [n // 2], high]
    h = (count - 1) // 2
    return np.r_[0 : h + 1, n - h : n] if h > 0 else np.array([0])


def _mirror_perm(freqs: np.ndarray, n: int) -> np.ndarray:
    pos = {int(f): i for i, f in enumerate(freqs)}
    return np.array([pos[int((n - f) % n)] for f in freqs], dtype=np.int64)


def mode_geometry(cfg: OperatorConfig, grid: tuple) -> ModeGeometry:
    """Resolve retained mode indices for a concrete (x, y, t) grid."""
    nx, ny, nt = grid
    e1, e2, e3 = cfg.modes
    if e3 > nt // 2 + 1:
        raise ShapeError(
            "retained time modes %d exceed half-spectrum bound %d" % (e3, nt // 2 + 1)
        )
    fx = _full_axis_frequencies(nx, e1)
    fy = _full_axis_frequencies(ny, e2)
    ft = np.arange(e3)
    planes = [0]
    if e3 == nt // 2 + 1 and nt >= 2:
        planes.append(e3 - 1)
    return ModeGeometry(
        index_grids=(fx, fy, ft),
        mirror_x=_mirror_perm(fx, nx),
        mirror_y=_mirror_perm(fy, ny),
        selfconj_planes=tuple(planes),
        spectral_shape=(nx, ny, nt // 2 + 1),
    )


def spectral_conv(v: Tensor, weight, cfg: OperatorConfig, power: int | None = None) -> Tensor:
    """K^r v: FFT, per-mode matrix applied ``power`` times, inverse FFT.

    ``weight`` is the real 5-mode tensor (dense parameter) or a TTCores
    chain contracted to it once per call.  Unretained modes are zeroed.
    """
    if v.data.ndim != 5:
        raise ShapeError("expected field [batch, channels, x, y, t], got %s" % (v.shape,))
    geom = mode_geometry(cfg, v.shape[2:])
    r5 = tt_contract(weight) if isinstance(weight, TTCores) else weight
    if r5.shape != cfg.weight_shape():
        raise ShapeError(
            "spectral weight shape %s does not match config %s" % (r5.shape, cfg.weight_shape())
        )
    rc = nd.spectral_weight(r5, cfg.d_v)
    rc = nd.hermitianize_planes(rc, geom.mirror_x, geom.mirror_y, geom.selfconj_planes)
    k = rc.shape[0] * rc.shape[1] * rc.shape[2]
    rk = nd.creshape(rc, (k, cfg.d_v, cfg.d_v))

    spec = rfftn(v, axes=(2, 3, 4))
    vk = nd.gather_modes(spec, geom.index_grids)
    for _ in range(cfg.power if power is None else power):
        vk = nd.mode_matmul(rk, vk)
    z = nd.scatter_modes(vk, geom.index_grids, geom.spectral_shape)
    return irfftn(z, axes=(2, 3, 4), out_extents=v.shape[2:])


def _pointwise_mlp(a: Tensor, params: dict, prefix: str, act) -> Tensor:
    h = nd.add_channel_bias(nd.channel_matmul(a, params[prefix + ".w1"]), params[prefix + ".b1"])
    h = act(h)
    return nd.add_channel_bias(nd.channel_matmul(h, params[prefix + ".w2"]), params[prefix + ".b2"])


class NeuralOperator:
    """Parameter container plus the forward maps; parameters are immutable
    Tensors and the container itself may be shared for concurrent inference."""

    def __init__(self, config: OperatorConfig, params: dict):
        self.config = config
        self.params = params
        self._check_shapes()

    def _check_shapes(self):
        cfg = self.config
        expect = expected_param_shapes(cfg)
        for name, shape in expect.items():
            if name not in self.params:
                raise ShapeError("missing parameter %r" % (name,))
            if self.params[name].shape != shape:
                raise ShapeError(
                    "parameter %r has shape %s, expected %s"
                    % (name, self.params[name].shape, shape)
                )
        extra = set(self.params) - set(expect)
        if extra:
            raise ShapeError("unexpected parameters %s" % (sorted(extra),))

    @classmethod
    def init(cls, config: OperatorConfig, seed) -> "NeuralOperator":
        rng = np.random.default_rng(seed)
        params: dict[str, Tensor] = {}

        def glorot(fan_out, fan_in):
            s = np.sqrt(2.0 / (fan_in + fan_out))
            return Tensor.wrap(s * rng.standard_normal((fan_out, fan_in)))

        cfg = config
        params["p.w1"] = glorot(cfg.lift_width, cfg.d_a)
        params["p.b1"] = nd.zeros(cfg.lift_width)
        params["p.w2"] = glorot(cfg.d_v, cfg.lift_width)
        params["p.b2"] = nd.zeros(cfg.d_v)
        sigma_r = cfg.spectral_gain / (2.0 * np.sqrt(cfg.d_v))
        wshape = cfg.weight_shape()
        for l in range(cfg.layers):
            params["layer%d.w" % l] = glorot(cfg.d_v, cfg.d_v)
            if cfg.factorization == "dense":
                params["layer%d.r5" % l] = Tensor.wrap(
                    sigma_r * rng.standard_normal(wshape)
                )
            else:
                spec = TTSpec(wshape, tuple(cfg.tt_ranks),
                              matched_init_scale(wshape, cfg.tt_ranks, sigma_r**2))
                ranks = spec.full_ranks
                for k, n in enumerate(wshape):
                    s = spec.init_scale / np.sqrt(ranks[k] * ranks[k + 1])
                    params["layer%d.core%d" % (l, k)] = Tensor.wrap(
                        s * rng.standard_normal((ranks[k], n, ranks[k + 1]))
                    )
        params["q.w1"] = glorot(cfg.proj_width, cfg.d_v)
        params["q.b1"] = nd.zeros(cfg.proj_width)
        params["q.w2"] = glorot(cfg.d_u, cfg.proj_width)
        params["q.b2"] = nd.zeros(cfg.d_u)
        return cls(config, params)

    def with_params(self, params: dict) -> "NeuralOperator":
        return NeuralOperator(self.config, params)

    # ---- forward maps -----------------------------------------------------

    def _layer_weight(self, l: int):
        if self.config.factorization == "dense":
            return self.params["layer%d.r5" % l]
        return TTCores([self.params["layer%d.core%d" % (l, k)] for k in range(5)])

    def lift(self, a: Tensor) -> Tensor:
        if a.data.ndim != 5 or a.shape[1] != self.config.d_a:
            raise ShapeError(
                "input must be [batch, %d, x, y, t], got %s" % (self.config.d_a, a.shape)
            )
        act = ACTIVATIONS[self.config.activation]
        return _pointwise_mlp(a, self.params, "p", act)

    def project(self, v: Tensor) -> Tensor:
        act = ACTIVATIONS[self.config.activation]
        return _pointwise_mlp(v, self.params, "q", act)

    def layer_forward(self, v: Tensor, l: int) -> Tensor:
        act = ACTIVATIONS[self.config.activation]
        bypass = nd.channel_matmul(v, self.params["layer%d.w" % l])
        conv = spectral_conv(v, self._layer_weight(l), self.config)
        return act(nd.add(bypass, conv))

    def forward(self, a: Tensor) -> Tensor:
        v = self.lift(a)
        for l in range(self.config.layers):
            v = self.layer_forward(v, l)
        return self.project(v)

    def reconstruct_initial(self, a: Tensor) -> Tensor:
        """Q applied directly to P(a), bypassing every spectral layer."""
        return self.project(self.lift(a))

    # ---- accounting --------------------------------------------------------

    def param_count(self) -> dict:
        cfg = self.config
        wshape = cfg.weight_shape()
        dense_layer = int(np.prod(wshape))
        if cfg.factorization == "dense":
            spectral = cfg.layers * dense_layer
        else:
            spectral = cfg.layers * tt_param_count(TTSpec(wshape, tuple(cfg.tt_ranks)))
        total = sum(p.size for p in self.params.values())
        return {
            "total": int(total),
            "spectral": int(spectral),
            "dense_equivalent": int(cfg.layers * dense_layer),
        }


def expected_param_shapes(cfg: OperatorConfig) -> dict:
    shapes = {
        "p.w1": (cfg.lift_width, cfg.d_a),
        "p.b1": (cfg.lift_width,),
        "p.w2": (cfg.d_v, cfg.lift_width),
        "p.b2": (cfg.d_v,),
        "q.w1": (cfg.proj_width, cfg.d_v),
        "q.b1": (cfg.proj_width,),
        "q.w2": (cfg.d_u, cfg.proj_width),
        "q.b2": (cfg.d_u,),
    }
    wshape = cfg.weight_shape()
    ranks = (1,) + tuple(cfg.tt_ranks) + (1,)
    for l in range(cfg.layers):
        shapes["layer%d.w" % l] = (cfg.d_v, cfg.d_v)
        if cfg.factorization == "dense":
            shapes["layer%d.r5" % l] = wshape
        else:
            for k, n in enumerate(wshape):
                shapes["layer%d.core%d" % (l, k)] = (ranks[k], n, ranks[k + 1])
    return shapes
