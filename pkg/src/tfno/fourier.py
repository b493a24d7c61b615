"""Real-to-complex FFT over power-of-two grids, differentiable on the tape.

Convention (pinned once, tested): the forward transform is unnormalized,
the inverse applies 1/N with N the product of transformed extents.  The
last transformed axis of a real-input transform stores the half spectrum
(n//2 + 1 coefficients).

Two interchangeable backends compute the same values:

* ``radix2`` -- the self-contained iterative Cooley-Tukey kernel below,
  kept small enough to audit end to end;
* ``pocketfft`` -- scipy's FFT, used by default because training-sized
  batches are several times faster there.

Tests drive both backends through the same contract and cross-check them
against each other and against a naive DFT.
"""

from __future__ import annotations

import threading

import numpy as np
import scipy.fft as _sfft

from .ndtensor import ComplexTensor, ShapeError, Tensor, _record

_cfg = threading.local()

_WORKERS = 2


def set_fft_backend(name: str) -> None:
    if name not in ("radix2", "pocketfft"):
        raise ValueError("unknown fft backend %r" % (name,))
    _cfg.backend = name


def fft_backend() -> str:
    return getattr(_cfg, "backend", "pocketfft")


class use_fft_backend:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        self.prev = fft_backend()
        set_fft_backend(self.name)
        return self

    def __exit__(self, *exc):
        set_fft_backend(self.prev)
        return False


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _require_pow2(extents) -> None:
    for n in extents:
        if not _is_pow2(n):
            raise ShapeError(
                "transform extent %d is not a power of two; pad the axis to %d"
                % (n, 1 << max(n - 1, 1).bit_length())
            )


# --------------------------------------------------------------------------
# radix-2 kernel
# --------------------------------------------------------------------------

_bitrev_cache: dict[int, np.ndarray] = {}
_twiddle_cache: dict[tuple, list] = {}


def _bitrev(n: int) -> np.ndarray:
    perm = _bitrev_cache.get(n)
    if perm is None:
        bits = n.bit_length() - 1
        idx = np.arange(n, dtype=np.int64)
        rev = np.zeros_like(idx)
        for _ in range(bits):
            rev = (rev << 1) | (idx & 1)
            idx >>= 1
        perm = _bitrev_cache[n] = rev
    return perm


def _twiddles(n: int, inverse: bool) -> list:
    key = (n, inverse)
    tw = _twiddle_cache.get(key)
    if tw is None:
        sign = 2j if inverse else -2j
        tw = []
        m = 2
        while m <= n:
            tw.append(np.exp(sign * np.pi * np.arange(m // 2) / m))
            m *= 2
        _twiddle_cache[key] = tw
    return tw


def _fft_last_axis_radix2(x: np.ndarray, inverse: bool) -> np.ndarray:
    """Unnormalized complex FFT along the last axis (power-of-two length)."""
    n = x.shape[-1]
    if n == 1:
        return x.copy()
    y = np.ascontiguousarray(x[..., _bitrev(n)], dtype=np.complex128)
    lead = y.shape[:-1]
    for stage, w in enumerate(_twiddles(n, inverse)):
        m = 2 << stage
        half = m >> 1
        yb = y.reshape(lead + (n // m, m))
        t = yb[..., half:] * w
        u = yb[..., :half].copy()
        yb[..., :half] = u + t
        yb[..., half:] = u - t
    return y


def _fft_axes(x: np.ndarray, axes, inverse: bool) -> np.ndarray:
    """Unnormalized multi-axis complex FFT with the active backend."""
    if fft_backend() == "pocketfft":
        if inverse:
            n = 1
            for a in axes:
                n *= x.shape[a]
            return _sfft.ifftn(x, axes=axes, workers=_WORKERS) * n
        return _sfft.fftn(x, axes=axes, workers=_WORKERS)
    y = np.asarray(x, dtype=np.complex128)
    for a in axes:
        y = np.moveaxis(y, a, -1)
        y = _fft_last_axis_radix2(y, inverse)
        y = np.moveaxis(y, -1, a)
    return np.ascontiguousarray(y)


def _normalize_axes(ndim: int, axes) -> tuple:
    out = tuple(a % ndim for a in axes)
    if len(set(out)) != len(out):
        raise ShapeError("repeated transform axes %s" % (axes,))
    return out


def _mirror_index(n: int) -> np.ndarray:
    # maps k -> (-k) mod n
    return (n - np.arange(n)) % n


def _hermitian_expand(v: np.ndarray, axes, out_last: int) -> np.ndarray:
    """Rebuild the full spectrum from a half-spectrum on the last axis."""
    last = axes[-1]
    m = v.shape[last]
    shape = list(v.shape)
    shape[last] = out_last
    full = np.zeros(shape, dtype=np.complex128)
    sl = [slice(None)] * v.ndim
    sl[last] = slice(0, m)
    full[tuple(sl)] = v
    if out_last > m:
        take = [slice(None)] * v.ndim
        take[last] = slice(1, out_last - m + 1)
        block = np.conj(v[tuple(take)])
        for a in axes[:-1]:
            block = np.take(block, _mirror_index(block.shape[a]), axis=a)
        block = np.flip(block, axis=last)
        put = [slice(None)] * v.ndim
        put[last] = slice(m, out_last)
        full[tuple(put)] = block
    return full


def rfftn_array(x: np.ndarray, axes) -> np.ndarray:
    """Array-level forward transform (no tape)."""
    axes = _normalize_axes(x.ndim, axes)
    _require_pow2([x.shape[a] for a in axes])
    if fft_backend() == "pocketfft":
        return _sfft.rfftn(np.asarray(x, dtype=np.float64), axes=axes, workers=_WORKERS)
    full = _fft_axes(x.astype(np.complex128, copy=False), axes, inverse=False)
    last = axes[-1]
    n = x.shape[last]
    sl = [slice(None)] * x.ndim
    sl[last] = slice(0, n // 2 + 1)
    return np.ascontiguousarray(full[tuple(sl)])


def irfftn_array(v: np.ndarray, axes, out_extents) -> np.ndarray:
    """Array-level inverse transform (no tape); applies the 1/N factor."""
    axes = _normalize_axes(v.ndim, axes)
    out_extents = tuple(int(n) for n in out_extents)
    if len(out_extents) != len(axes):
        raise ShapeError("out_extents %s do not match axes %s" % (out_extents, axes))
    _require_pow2(out_extents)
    for a, n in zip(axes[:-1], out_extents[:-1]):
        if v.shape[a] != n:
            raise ShapeError(
                "spectrum extent %d on axis %d inconsistent with output extent %d"
                % (v.shape[a], a, n)
            )
    n_last = out_extents[-1]
    if v.shape[axes[-1]] != n_last // 2 + 1:
        raise ShapeError(
            "half-spectrum extent %d inconsistent with output extent %d"
            % (v.shape[axes[-1]], n_last)
        )
    if fft_backend() == "pocketfft":
        # c2r drops the residual imaginary part after the leading inverse
        # transforms, which equals symmetrizing the self-conjugate planes:
        # identical to the expand-then-Re reference path for any input
        return _sfft.irfftn(np.asarray(v, dtype=np.complex128), s=out_extents,
                            axes=axes, workers=_WORKERS)
    full = _hermitian_expand(np.asarray(v, dtype=np.complex128), axes, n_last)
    y = _fft_axes(full, axes, inverse=True)
    n_total = 1
    for n in out_extents:
        n_total *= n
    return np.ascontiguousarray(y.real) / n_total


def rfftn(t: Tensor, axes) -> ComplexTensor:
    """Forward real-to-complex DFT over the given axes, recorded on the tape.

    Unnormalized; output carries the half spectrum on the last listed axis
    and is flagged hermitian.
    """
    axes_n = _normalize_axes(t.data.ndim, axes)
    out = ComplexTensor.wrap(rfftn_array(t.data, axes_n), hermitian=True)
    in_shape = t.shape
    last = axes_n[-1]

    def backward(g):
        # adjoint: zero-pad the discarded mirror modes, then unnormalized
        # inverse-sign transform, then take the real part
        n_last = in_shape[last]
        m = g.shape[last]
        if fft_backend() == "pocketfft":
            # equivalent c2r form: halve the mirrored interior coefficients
            h = np.array(g)
            sl = [slice(None)] * g.ndim
            sl[last] = slice(1, m - 1) if n_last % 2 == 0 else slice(1, m)
            h[tuple(sl)] *= 0.5
            n_total = 1
            for a in axes_n:
                n_total *= in_shape[a]
            extents = tuple(in_shape[a] for a in axes_n)
            return (n_total * _sfft.irfftn(h, s=extents, axes=axes_n, workers=_WORKERS),)
        shape = list(g.shape)
        shape[last] = n_last
        buf = np.zeros(shape, dtype=np.complex128)
        sl = [slice(None)] * g.ndim
        sl[last] = slice(0, m)
        buf[tuple(sl)] = g
        return (_fft_axes(buf, axes_n, inverse=True).real.copy(),)

    _record(out, (t,), backward)
    return out


def irfftn(v: ComplexTensor, axes, out_extents) -> Tensor:
    """Inverse transform matching :func:`rfftn`; applies the 1/N factor."""
    axes_n = _normalize_axes(v.data.ndim, axes)
    out_extents = tuple(int(n) for n in out_extents)
    arr = irfftn_array(v.data, axes_n, out_extents)
    out = Tensor.wrap(arr)
    last = axes_n[-1]
    n_last = out_extents[-1]
    m = n_last // 2 + 1
    n_total = 1
    for n in out_extents:
        n_total *= n

    def backward(g):
        if fft_backend() == "pocketfft":
            half = _sfft.rfftn(np.asarray(g, dtype=np.float64), axes=axes_n,
                               workers=_WORKERS)
        else:
            spec = _fft_axes(g.astype(np.complex128), axes_n, inverse=False)
            sl = [slice(None)] * g.ndim
            sl[last] = slice(0, m)
            half = spec[tuple(sl)].copy()
        dbl = [slice(None)] * g.ndim
        dbl[last] = slice(1, m - 1) if n_last % 2 == 0 else slice(1, m)
        half[tuple(dbl)] *= 2.0
        return (half / n_total,)

    _record(out, (v,), backward)
    return out
