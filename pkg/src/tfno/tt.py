"""Tensor-train representation of dense weight tensors.

A d-mode tensor A(i_1..i_d) is held as a chain of order-3 cores
G_k of shape (r_{k-1}, n_k, r_k) with boundary ranks r_0 = r_d = 1 and
reconstructed by summing the chain matrix products over the internal rank
indices.  Cores are trained directly; the TT-SVD here exists as a testing
oracle for round-trip checks, not as part of the training path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ndtensor import ShapeError, Tensor, matmul2d, reshape


@dataclass(frozen=True)
class TTSpec:
    """Target dense shape, internal ranks, and initialization scale."""

    shape: tuple
    ranks: tuple
    init_scale: float = 1.0

    def __post_init__(self):
        if len(self.shape) < 2:
            raise ValueError("tensor-train needs at least 2 modes")
        if len(self.ranks) != len(self.shape) - 1:
            raise ValueError(
                "expected %d ranks for %d modes, got %d"
                % (len(self.shape) - 1, len(self.shape), len(self.ranks))
            )
        if any(n < 1 for n in self.shape) or any(r < 1 for r in self.ranks):
            raise ValueError("extents and ranks must be >= 1")

    @property
    def full_ranks(self) -> tuple:
        return (1,) + tuple(self.ranks) + (1,)


class TTCores:
    """Validated chain of order-3 cores (each a Tensor)."""

    def __init__(self, cores):
        cores = list(cores)
        if len(cores) < 2:
            raise ShapeError("tensor-train needs at least 2 cores")
        for k, c in enumerate(cores):
            if len(c.shape) != 3:
                raise ShapeError("core %d has shape %s, expected order 3" % (k, c.shape))
        if cores[0].shape[0] != 1 or cores[-1].shape[2] != 1:
            raise ShapeError("boundary ranks must be 1")
        for k in range(len(cores) - 1):
            if cores[k].shape[2] != cores[k + 1].shape[0]:
                raise ShapeError(
                    "rank chain breaks between core %d (%s) and core %d (%s)"
                    % (k, cores[k].shape, k + 1, cores[k + 1].shape)
                )
        self.cores = cores

    @property
    def shape(self) -> tuple:
        return tuple(c.shape[1] for c in self.cores)

    @property
    def ranks(self) -> tuple:
        return tuple(c.shape[2] for c in self.cores[:-1])

    def __iter__(self):
        return iter(self.cores)

    def __len__(self):
        return len(self.cores)


def tt_param_count(spec: TTSpec) -> int:
    """Total core entries: sum over k of r_{k-1} * n_k * r_k."""
    r = spec.full_ranks
    return int(sum(r[k] * n * r[k + 1] for k, n in enumerate(spec.shape)))


def tt_random_init(spec: TTSpec, seed) -> TTCores:
    """I.i.d. normal cores, core k scaled by init_scale / sqrt(r_{k-1} r_k)."""
    rng = np.random.default_rng(seed)
    r = spec.full_ranks
    cores = []
    for k, n in enumerate(spec.shape):
        s = spec.init_scale / np.sqrt(r[k] * r[k + 1])
        cores.append(Tensor.wrap(s * rng.standard_normal((r[k], n, r[k + 1]))))
    return TTCores(cores)


def matched_init_scale(shape, ranks, target_var: float) -> float:
    """init_scale making the contracted tensor's entry variance ~= target_var.

    With core entries of variance s_k^2 = (c / sqrt(r_{k-1} r_k))^2 the
    contraction variance is c^(2d) / prod(ranks); invert for c.
    """
    d = len(shape)
    prod_r = float(np.prod(ranks)) if len(ranks) else 1.0
    return float((target_var * prod_r) ** (1.0 / (2 * d)))


def tt_contract(cores: TTCores) -> Tensor:
    """Reconstruct the dense tensor by sequential mode-unfolding products.

    Tape-aware: built from matmul/reshape primitives so gradients flow to
    every core.
    """
    if not isinstance(cores, TTCores):
        cores = TTCores(cores)
    dims = cores.shape
    first = cores.cores[0]
    acc = reshape(first, (dims[0], first.shape[2]))
    rows = dims[0]
    for k in range(1, len(cores)):
        core = cores.cores[k]
        r_in, n, r_out = core.shape
        acc = matmul2d(acc, reshape(core, (r_in, n * r_out)))
        rows *= n
        acc = reshape(acc, (rows, r_out))
    return reshape(acc, dims)


def tt_contract_array(cores: TTCores) -> np.ndarray:
    """Tape-free contraction for oracles and inference."""
    dims = cores.shape
    acc = cores.cores[0].data.reshape(dims[0], -1)
    for k in range(1, len(cores)):
        core = cores.cores[k].data
        r_in, n, r_out = core.shape
        acc = (acc @ core.reshape(r_in, n * r_out)).reshape(-1, r_out)
    return acc.reshape(dims)


def tt_svd(dense: Tensor, max_ranks) -> TTCores:
    """TT-SVD via sequential unfolding and truncated SVD.

    With max_ranks at or above the full multilinear ranks the round trip
    tt_contract(tt_svd(X)) reproduces X to working precision.  Used as a
    testing oracle.
    """
    arr = dense.data if isinstance(dense, Tensor) else np.asarray(dense, dtype=np.float64)
    dims = arr.shape
    d = len(dims)
    if d < 2:
        raise ShapeError("tt_svd needs at least 2 modes")
    max_ranks = tuple(int(r) for r in max_ranks)
    if len(max_ranks) != d - 1:
        raise ShapeError("expected %d max ranks, got %d" % (d - 1, len(max_ranks)))
    cores = []
    c = arr.reshape(dims[0], -1)
    r_prev = 1
    for k in range(d - 1):
        u, s, vt = np.linalg.svd(c, full_matrices=False)
        keep = min(max_ranks[k], int(np.sum(s > s[0] * 1e-14)) if s.size else 1)
        keep = max(keep, 1)
        cores.append(Tensor.wrap(u[:, :keep].reshape(r_prev, dims[k], keep)))
        c = (s[:keep, None] * vt[:keep]).reshape(keep * dims[k + 1], -1) if k < d - 2 else (
            s[:keep, None] * vt[:keep]
        )
        r_prev = keep
    cores.append(Tensor.wrap(c.reshape(r_prev, dims[-1], 1)))
    return TTCores(cores)
