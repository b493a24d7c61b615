"""Sobolev-H1 relative loss, composite objective, metrics, landscape probe.

The training loss on a prediction/target pair is a relative Sobolev norm:
value and first-derivative mismatch, each normalized by the target's own
norm of the same order, summed and taken to the 1/p power.  Derivatives
are finite differences on the normalized unit-spaced grid, over every
spatial and time axis.  The full objective weights this approximation
term with lambda and adds gamma times the same norm between the
reconstruction head's output and the initial condition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .ndtensor import ShapeError, Tensor


@dataclass(frozen=True)
class SobolevConfig:
    k: int = 1
    p: float = 2.0
    eps_den: float = 1e-12

    def __post_init__(self):
        if self.k not in (0, 1):
            raise ValueError("derivative order k must be 0 or 1")
        if self.p < 1:
            raise ValueError("norm order p must be >= 1")
        if self.eps_den <= 0:
            raise ValueError("denominator floor must be positive")


@dataclass(frozen=True)
class LossWeights:
    approximation: float = 1.0
    reconstruction: float = 0.5

    def __post_init__(self):
        if self.approximation <= 0:
            raise ValueError("approximation weight must be positive")
        if self.reconstruction < 0:
            raise ValueError("reconstruction weight must be nonnegative")


def fd_derivatives(y: Tensor, axis: int) -> Tensor:
    """First derivative along one axis: central interior, one-sided edges."""
    return nd.fd_diff(y, axis)


def fd_derivatives_array(y: np.ndarray, axis: int) -> np.ndarray:
    """Tape-free twin of :func:`fd_derivatives` for constant targets."""
    n = y.shape[axis]
    if n < 3:
        raise ShapeError("fd derivative needs extent >= 3 along axis %d" % axis)
    ym = np.moveaxis(y, axis, -1)
    out = np.empty_like(ym)
    out[..., 1:-1] = 0.5 * (ym[..., 2:] - ym[..., :-2])
    out[..., 0] = ym[..., 1] - ym[..., 0]
    out[..., -1] = ym[..., -1] - ym[..., -2]
    return np.moveaxis(out, -1, axis)


def _derivative_axes(ndim: int):
    # fields are [batch, channel, space..., time]; derivatives skip the
    # first two axes
    return range(2, ndim)


def sobolev_h1_relative(y_hat: Tensor, y: Tensor, cfg: SobolevConfig = SobolevConfig()) -> Tensor:
    """Relative Sobolev norm of the mismatch, differentiable in y_hat.

    ( sum_{i=0..k} ||D^i y_hat - D^i y||_p^p / (||D^i y||_p^p + eps) )^(1/p)
    with the order-1 term pooling derivatives over all spatial+time axes.
    """
    if y_hat.shape != y.shape:
        raise ShapeError("prediction %s and target %s differ" % (y_hat.shape, y.shape))
    p = cfg.p
    den0 = float(np.sum(np.abs(y.data) ** p)) + cfg.eps_den
    total = nd.scale(nd.sum_abs_pow(nd.sub(y_hat, y), p), 1.0 / den0)
    if cfg.k >= 1:
        num1 = None
        den1 = cfg.eps_den
        for ax in _derivative_axes(y.data.ndim):
            dy = fd_derivatives_array(y.data, ax)
            dh = nd.fd_diff(y_hat, ax)
            term = nd.sum_abs_pow(nd.sub(dh, Tensor.wrap(dy)), p)
            num1 = term if num1 is None else nd.add(num1, term)
            den1 += float(np.sum(np.abs(dy) ** p))
        if num1 is None:
            raise ShapeError("order-1 Sobolev term needs field axes beyond [batch, channel]")
        total = nd.add(total, nd.scale(num1, 1.0 / den1))
    return nd.powi(total, 1.0 / p)


def tile_initial(u0: np.ndarray, nt: int) -> np.ndarray:
    """Broadcast an initial field [b, c, x, y] along a trailing time axis."""
    return np.repeat(u0[..., None], nt, axis=-1)


def total_loss(model, a: Tensor, u: Tensor, u0: Tensor, weights: LossWeights,
               cfg: SobolevConfig = SobolevConfig()):
    """lambda * L(model(a), u) + gamma * L(Q(P(a)), u0 tiled over time).

    Returns (loss, approximation_term, reconstruction_term); the extra
    terms are detached floats for logging.
    """
    u_hat = model.forward(a)
    approx = sobolev_h1_relative(u_hat, u, cfg)
    loss = nd.scale(approx, weights.approximation)
    recon_val = 0.0
    if weights.reconstruction > 0.0:
        u0_arr = u0.data
        if u0_arr.ndim == u.data.ndim - 1:
            u0_arr = tile_initial(u0_arr, u.shape[-1])
        recon = sobolev_h1_relative(model.reconstruct_initial(a), Tensor.wrap(u0_arr), cfg)
        loss = nd.add(loss, nd.scale(recon, weights.reconstruction))
        recon_val = recon.item()
    return loss, approx.item(), recon_val


def r_squared(y_hat, y) -> float:
    """Coefficient of determination, pooled over all entries."""
    yh = y_hat.data if isinstance(y_hat, Tensor) else np.asarray(y_hat, dtype=np.float64)
    yt = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    if yh.shape != yt.shape:
        raise ShapeError("shapes %s and %s differ" % (yh.shape, yt.shape))
    if yt.size < 2:
        raise ValueError("r_squared needs at least 2 samples")
    ss_tot = float(np.sum((yt - yt.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("r_squared undefined for zero-variance targets")
    ss_res = float(np.sum((yh - yt) ** 2))
    return 1.0 - ss_res / ss_tot


def relative_l2(y_hat, y) -> float:
    yh = y_hat.data if isinstance(y_hat, Tensor) else np.asarray(y_hat, dtype=np.float64)
    yt = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    return float(np.linalg.norm(yh - yt) / np.linalg.norm(yt))


# --------------------------------------------------------------------------
# loss landscape
# --------------------------------------------------------------------------


@dataclass
class LandscapeGrid:
    alphas: np.ndarray
    betas: np.ndarray
    values: np.ndarray
    seed: int

    def center_value(self) -> float:
        i = int(np.argmin(np.abs(self.alphas)))
        j = int(np.argmin(np.abs(self.betas)))
        return float(self.values[i, j])


def filter_normalized_directions(params: dict, seed) -> tuple:
    """Two random directions, each block scaled to the matching block of
    the trained parameters (zero-norm blocks get zero perturbation)."""
    rng = np.random.default_rng(seed)
    d1, d2 = {}, {}
    for name in sorted(params):
        theta = params[name].data
        tnorm = float(np.linalg.norm(theta))
        for d in (d1, d2):
            v = rng.standard_normal(theta.shape)
            vnorm = float(np.linalg.norm(v))
            d[name] = v * (tnorm / vnorm) if tnorm > 0.0 and vnorm > 0.0 else np.zeros_like(v)
    return d1, d2


_POOL_STATE: dict = {}


def _landscape_cell(args):
    i, j, a, b = args
    model = _POOL_STATE["model"]
    if a == 0.0 and b == 0.0:
        probe = model
    else:
        base = model.params
        d1, d2 = _POOL_STATE["d1"], _POOL_STATE["d2"]
        shifted = {
            name: Tensor.wrap(base[name].data + a * d1[name] + b * d2[name])
            for name in base
        }
        probe = model.with_params(shifted)
    return i, j, _POOL_STATE["eval_loss"](probe)


def loss_landscape(model, eval_loss, resolution: int = 21, span: float = 1.0,
                   seed: int = 0, workers: int = 1) -> LandscapeGrid:
    """Evaluate the loss on the plane theta* + alpha d1 + beta d2.

    ``eval_loss`` maps a model to its test loss.  The probe never mutates
    the input model: each grid point evaluates a fresh parameter dict, and
    the exact center reuses the original tensors so f(0, 0) reproduces the
    unperturbed loss bit for bit.  Cells are independent, so they may be
    fanned out over forked workers; every cell computes the same floats
    regardless of scheduling.
    """
    d1, d2 = filter_normalized_directions(model.params, seed)
    alphas = np.linspace(-span, span, resolution)
    betas = np.linspace(-span, span, resolution)
    values = np.empty((resolution, resolution), dtype=np.float64)
    cells = [(i, j, float(a), float(b))
             for i, a in enumerate(alphas) for j, b in enumerate(betas)]
    _POOL_STATE.update(model=model, d1=d1, d2=d2, eval_loss=eval_loss)
    try:
        if workers > 1:
            import multiprocessing as mp

            with mp.get_context("fork").Pool(workers) as pool:
                for i, j, v in pool.imap_unordered(_landscape_cell, cells, chunksize=8):
                    values[i, j] = v
        else:
            for cell in cells:
                i, j, v = _landscape_cell(cell)
                values[i, j] = v
    finally:
        _POOL_STATE.clear()
    return LandscapeGrid(alphas=alphas, betas=betas, values=values, seed=int(seed))
