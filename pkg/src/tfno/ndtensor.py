"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything downstream (the neural operator, the losses, training) is built
from the small primitive set defined here.  Values are immutable once
constructed; differentiation is tape-based: primitives executed while a
Tape is active append one entry each, and ``backprop`` replays the entries
in reverse with a fixed reduction order, so gradients are bit-reproducible
for a fixed graph.

Complex values (FFT outputs, spectral weights) use the convention that the
cotangent stored for a complex node z = x + iy is dL/dx + i*dL/dy for the
real scalar loss L.  Under this packing the adjoint of a complex product
u*v is u_bar += w_bar * conj(v).
"""

from __future__ import annotations

import itertools
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf as _erf_ufunc

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327

_UFUNC_POOL = ThreadPoolExecutor(max_workers=2)
_PARALLEL_MIN = 1 << 19


def _parallel_ufunc(fn, x: np.ndarray) -> np.ndarray:
    """Split a large elementwise call over two threads (scipy/numpy ufuncs
    release the GIL); results are identical to the single-threaded call."""
    if x.size < _PARALLEL_MIN:
        return fn(x)
    out = np.empty_like(x)
    flat_in = x.reshape(-1)
    flat_out = out.reshape(-1)
    mid = x.size // 2

    def run(sl):
        fn(flat_in[sl], out=flat_out[sl])

    futs = [_UFUNC_POOL.submit(run, slice(0, mid)),
            _UFUNC_POOL.submit(run, slice(mid, None))]
    for f in futs:
        f.result()
    return out


def erf(x):
    return _parallel_ufunc(_erf_ufunc, np.asarray(x))


def _exp(x):
    return _parallel_ufunc(np.exp, x)

_checked = True

_ids = itertools.count(1)


def set_checked(flag: bool) -> None:
    """Toggle NaN/Inf guards at tensor construction (on by default)."""
    global _checked
    _checked = bool(flag)


def checked_enabled() -> bool:
    return _checked


class checked_off:
    """Context manager that disables finiteness guards, e.g. in benchmarks."""

    def __enter__(self):
        self._prev = _checked
        set_checked(False)
        return self

    def __exit__(self, *exc):
        set_checked(self._prev)
        return False


class ShapeError(ValueError):
    pass


class Tensor:
    """Immutable dense array of float64 in row-major order.

    ``Tensor(obj)`` copies; ``Tensor.wrap(arr)`` takes ownership of a
    freshly computed array without copying.  Both freeze the buffer.
    """

    __slots__ = ("data", "node_id")

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64, order="C")
        self._init(arr)

    @classmethod
    def wrap(cls, arr: np.ndarray) -> "Tensor":
        arr = np.asarray(arr, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        t = cls.__new__(cls)
        t._init(arr)
        return t

    def _init(self, arr: np.ndarray) -> None:
        if _checked and not np.isfinite(arr).all():
            raise ValueError("non-finite entries in tensor of shape %s" % (arr.shape,))
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "node_id", next(_ids))

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return "Tensor(shape=%s, id=%d)" % (self.shape, self.node_id)

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class ComplexTensor:
    """Immutable dense array of complex128 (interleaved re/im float64 pairs).

    ``hermitian`` marks values produced by a real-input transform whose
    missing half-spectrum is implied by conjugate symmetry.
    """

    __slots__ = ("data", "node_id", "hermitian")

    def __init__(self, data, hermitian: bool = False):
        arr = np.array(data, dtype=np.complex128, order="C")
        self._init(arr, hermitian)

    @classmethod
    def wrap(cls, arr: np.ndarray, hermitian: bool = False) -> "ComplexTensor":
        arr = np.asarray(arr, dtype=np.complex128)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        t = cls.__new__(cls)
        t._init(arr, hermitian)
        return t

    def _init(self, arr, hermitian):
        if _checked and not np.isfinite(arr).all():
            raise ValueError("non-finite entries in complex tensor of shape %s" % (arr.shape,))
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "node_id", next(_ids))
        object.__setattr__(self, "hermitian", bool(hermitian))

    def __setattr__(self, name, value):
        raise AttributeError("ComplexTensor is immutable")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self):
        return "ComplexTensor(shape=%s, id=%d)" % (self.shape, self.node_id)


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------

_tls = threading.local()


class TapeEntry:
    __slots__ = ("out_id", "in_ids", "backward")

    def __init__(self, out_id, in_ids, backward):
        self.out_id = out_id
        self.in_ids = in_ids
        self.backward = backward


class Tape:
    """Recorder for primitive operations; single-threaded by design.

    Use as a context manager.  Entries form a DAG by construction (every
    consumed node id was produced earlier or is a leaf).
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._shapes: dict[int, tuple] = {}

    def __enter__(self):
        stack = getattr(_tls, "tapes", None)
        if stack is None:
            stack = _tls.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tls.tapes.pop()
        return False

    def record(self, out, inputs, backward):
        self.entries.append(TapeEntry(out.node_id, tuple(t.node_id for t in inputs), backward))
        self._shapes[out.node_id] = out.shape
        for t in inputs:
            self._shapes.setdefault(t.node_id, t.shape)

    def gradients(self, loss: Tensor, params=None) -> dict:
        return backprop(self, loss, params)


def active_tape() -> Tape | None:
    stack = getattr(_tls, "tapes", None)
    return stack[-1] if stack else None


def _record(out, inputs, backward) -> None:
    tape = active_tape()
    if tape is not None:
        tape.record(out, inputs, backward)


def backprop(tape: Tape, loss: Tensor, params=None) -> dict:
    """Reverse sweep from a scalar loss node.

    Returns a map node_id -> gradient array for every node that received a
    cotangent.  When ``params`` (an iterable of leaf Tensors) is given, the
    result instead maps each parameter's node id to its gradient, with
    exact zeros for parameters disconnected from the loss.
    """
    if loss.shape != ():
        raise ShapeError("backprop seed must be scalar, got shape %s" % (loss.shape,))
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones((), dtype=np.float64)}
    for entry in reversed(tape.entries):
        g = grads.get(entry.out_id)
        if g is None:
            continue
        contribs = entry.backward(g)
        for nid, contrib in zip(entry.in_ids, contribs):
            if contrib is None:
                continue
            acc = grads.get(nid)
            if acc is None:
                grads[nid] = contrib
            else:
                if acc.shape != contrib.shape:
                    raise ShapeError(
                        "gradient shape %s does not match buffer %s" % (contrib.shape, acc.shape)
                    )
                grads[nid] = acc + contrib
    if params is None:
        return grads
    out = {}
    for p in params:
        g = grads.get(p.node_id)
        if g is None:
            # disconnected parameter: zero gradient by contract, not an error
            g = np.zeros(p.shape, dtype=np.float64)
        out[p.node_id] = g
    return out


# --------------------------------------------------------------------------
# elementwise primitives
# --------------------------------------------------------------------------


def _binary_check(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError("%s: shapes %s and %s differ" % (op, a.shape, b.shape))


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "add")
    out = Tensor.wrap(a.data + b.data)
    _record(out, (a, b), lambda g: (g, g))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "sub")
    out = Tensor.wrap(a.data - b.data)
    _record(out, (a, b), lambda g: (g, -g))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "mul")
    out = Tensor.wrap(a.data * b.data)
    ad, bd = a.data, b.data
    _record(out, (a, b), lambda g: (g * bd, g * ad))
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "div")
    out = Tensor.wrap(a.data / b.data)
    ad, bd = a.data, b.data
    _record(out, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))
    return out


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor.wrap(a.data * c)
    _record(out, (a,), lambda g: (g * c,))
    return out


def shift(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor.wrap(a.data + c)
    _record(out, (a,), lambda g: (g,))
    return out


def gelu(a: Tensor) -> Tensor:
    """Exact-erf GELU: x * Phi(x) with Phi the standard normal CDF."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor.wrap(x * phi)

    def backward(g):
        return (g * (phi + x * _INV_SQRT2PI * _exp(-0.5 * x * x)),)

    _record(out, (a,), backward)
    return out


def relu(a: Tensor) -> Tensor:
    x = a.data
    out = Tensor.wrap(np.maximum(x, 0.0))
    _record(out, (a,), lambda g: (g * (x > 0.0),))
    return out


def powi(a: Tensor, p: float) -> Tensor:
    """Elementwise power for positive bases (used on scalar loss terms)."""
    p = float(p)
    x = a.data
    out = Tensor.wrap(x**p)
    _record(out, (a,), lambda g: (g * p * x ** (p - 1.0),))
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor.wrap(np.asarray(a.data.sum()))
    shape = a.shape
    _record(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    return out


def sum_abs_pow(a: Tensor, p: float) -> Tensor:
    """sum(|a|**p) as one reduction; adjoint is p*sign(a)*|a|**(p-1)."""
    p = float(p)
    x = a.data
    if p == 2.0:
        out = Tensor.wrap(np.asarray(np.sum(x * x)))
        _record(out, (a,), lambda g: (g * 2.0 * x,))
        return out
    ax = np.abs(x)
    out = Tensor.wrap(np.asarray(np.sum(ax**p)))
    _record(out, (a,), lambda g: (g * p * np.sign(x) * ax ** (p - 1.0),))
    return out


def add_channel_bias(v: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias b[C] to a field v[B, C, ...]."""
    if v.data.ndim < 2 or b.data.ndim != 1 or v.shape[1] != b.shape[0]:
        raise ShapeError("bias %s does not broadcast over %s" % (b.shape, v.shape))
    bshape = (1, b.shape[0]) + (1,) * (v.data.ndim - 2)
    out = Tensor.wrap(v.data + b.data.reshape(bshape))
    axes = (0,) + tuple(range(2, v.data.ndim))
    _record(out, (v, b), lambda g: (g, g.sum(axis=axes)))
    return out


def channel_matmul(v: Tensor, w: Tensor) -> Tensor:
    """Pointwise linear channel map: v[B, Ci, ...] x w[Co, Ci] -> [B, Co, ...]."""
    if v.data.ndim < 2 or w.data.ndim != 2:
        raise ShapeError("channel_matmul expects field [B,C,...] and matrix [Co,Ci]")
    if v.shape[1] != w.shape[1]:
        raise ShapeError(
            "channel extent %d does not match matrix %s" % (v.shape[1], w.shape)
        )
    b, ci = v.shape[0], v.shape[1]
    spatial = v.shape[2:]
    vf = v.data.reshape(b, ci, -1)
    out_arr = np.matmul(w.data, vf)
    out = Tensor.wrap(out_arr.reshape(b, w.shape[0], *spatial))
    wd = w.data

    def backward(g):
        gf = g.reshape(b, w.shape[0], -1)
        gv = np.matmul(wd.T, gf).reshape(v.shape)
        gw = np.matmul(gf, vf.transpose(0, 2, 1)).sum(axis=0)
        return (gv, gw)

    _record(out, (v, w), backward)
    return out


def matmul2d(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul2d: incompatible shapes %s, %s" % (a.shape, b.shape))
    out = Tensor.wrap(a.data @ b.data)
    ad, bd = a.data, b.data
    _record(out, (a, b), lambda g: (g @ bd.T, ad.T @ g))
    return out


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = Tensor.wrap(a.data.reshape(shape))
    old = a.shape
    _record(out, (a,), lambda g: (g.reshape(old),))
    return out


def fd_diff(y: Tensor, axis: int) -> Tensor:
    """First derivative along one axis on a unit-spaced grid.

    Central differences in the interior, first-order one-sided at the two
    boundary points.  Requires axis extent >= 3.
    """
    x = y.data
    n = x.shape[axis]
    if n < 3:
        raise ShapeError("fd_diff needs extent >= 3 along axis %d, got %d" % (axis, n))
    xm = np.moveaxis(x, axis, -1)
    out = np.empty_like(xm)
    out[..., 1:-1] = 0.5 * (xm[..., 2:] - xm[..., :-2])
    out[..., 0] = xm[..., 1] - xm[..., 0]
    out[..., -1] = xm[..., -1] - xm[..., -2]
    res = Tensor.wrap(np.moveaxis(out, -1, axis))

    def backward(g):
        gm = np.moveaxis(g, axis, -1)
        acc = np.zeros_like(gm)
        acc[..., 2:] += 0.5 * gm[..., 1:-1]
        acc[..., :-2] -= 0.5 * gm[..., 1:-1]
        acc[..., 1] += gm[..., 0]
        acc[..., 0] -= gm[..., 0]
        acc[..., -1] += gm[..., -1]
        acc[..., -2] -= gm[..., -1]
        return (np.moveaxis(acc, -1, axis).copy(),)

    _record(res, (y,), backward)
    return res


# --------------------------------------------------------------------------
# complex primitives (spectral path)
# --------------------------------------------------------------------------


def spectral_weight(t: Tensor, ch_in: int) -> ComplexTensor:
    """Turn a real 5-mode weight tensor into per-mode complex matrices.

    Input layout (m1, m2, m3, 2*ch_in, ch_out): the first ch_in slices of
    axis 3 are real parts, the rest imaginary.  Output is
    [m1, m2, m3, ch_out, ch_in], one complex matrix per retained mode.
    """
    if t.data.ndim != 5 or t.shape[3] != 2 * ch_in:
        raise ShapeError("spectral weight tensor %s does not carry 2*%d input slices" % (t.shape, ch_in))
    m1, m2, m3, _, co = t.shape
    re = t.data[:, :, :, :ch_in, :]
    im = t.data[:, :, :, ch_in:, :]
    cz = (re + 1j * im).transpose(0, 1, 2, 4, 3)
    out = ComplexTensor.wrap(cz)

    def backward(g):
        gc = g.transpose(0, 1, 2, 4, 3)
        gt = np.concatenate([gc.real, gc.imag], axis=3)
        return (gt,)

    _record(out, (t,), backward)
    return out


def hermitianize_planes(c: ComplexTensor, perm1, perm2, planes) -> ComplexTensor:
    """Conjugate-symmetrize per-mode matrices on self-conjugate time planes.

    ``c`` is [m1, m2, m3, ...]; ``perm1``/``perm2`` map each retained
    frequency on the two full axes to the position of its negative.  For
    every plane p, entries become (c[i,j,p] + conj(c[perm1[i],perm2[j],p]))/2,
    which ties the spectral kernel to a real spatial kernel there.  The map
    is linear and self-adjoint, so the backward rule reapplies it.
    """
    perm1 = np.asarray(perm1, dtype=np.int64)
    perm2 = np.asarray(perm2, dtype=np.int64)
    planes = tuple(int(p) for p in planes)

    def apply(arr):
        out_arr = arr.copy()
        for p in planes:
            blk = arr[:, :, p]
            out_arr[:, :, p] = 0.5 * (blk + np.conj(blk[perm1][:, perm2]))
        return out_arr

    out = ComplexTensor.wrap(apply(c.data))
    _record(out, (c,), lambda g: (apply(g),))
    return out


def creshape(c: ComplexTensor, shape) -> ComplexTensor:
    shape = tuple(int(s) for s in shape)
    out = ComplexTensor.wrap(c.data.reshape(shape), hermitian=c.hermitian)
    old = c.shape
    _record(out, (c,), lambda g: (g.reshape(old),))
    return out


def mode_matmul(r: ComplexTensor, v: ComplexTensor) -> ComplexTensor:
    """Apply a per-mode channel matrix: r[K,Co,Ci] x v[B,Ci,K] -> [B,Co,K]."""
    if r.data.ndim != 3 or v.data.ndim != 3:
        raise ShapeError("mode_matmul expects [K,Co,Ci] and [B,Ci,K]")
    K, co, ci = r.shape
    if v.shape[1] != ci or v.shape[2] != K:
        raise ShapeError("mode_matmul: weights %s do not conform to field %s" % (r.shape, v.shape))
    b = v.shape[0]
    vk = np.ascontiguousarray(v.data.transpose(2, 1, 0))  # [K, Ci, B]
    ok = np.matmul(r.data, vk)  # [K, Co, B]
    out = ComplexTensor.wrap(ok.transpose(2, 1, 0))
    rd = r.data

    def backward(g):
        gk = np.ascontiguousarray(g.transpose(2, 1, 0))  # [K, Co, B]
        gv = np.matmul(np.conj(rd).transpose(0, 2, 1), gk)  # [K, Ci, B]
        gr = np.matmul(gk, np.conj(vk).transpose(0, 2, 1))  # [K, Co, Ci]
        return (gr, gv.transpose(2, 1, 0).copy())

    _record(out, (r, v), backward)
    return out


def gather_modes(v: ComplexTensor, index_grids) -> ComplexTensor:
    """Collect retained spectral modes into [B, C, K] (flattened mode axis)."""
    idx = np.ix_(*index_grids)
    b, c = v.shape[0], v.shape[1]
    sub = v.data[(slice(None), slice(None)) + idx]
    out = ComplexTensor.wrap(sub.reshape(b, c, -1))
    full_shape = v.shape
    kept_shape = sub.shape

    def backward(g):
        buf = np.zeros(full_shape, dtype=np.complex128)
        buf[(slice(None), slice(None)) + idx] = g.reshape(kept_shape)
        return (buf,)

    _record(out, (v,), backward)
    return out


def scatter_modes(v: ComplexTensor, index_grids, full_spatial) -> ComplexTensor:
    """Inverse of gather_modes: place [B, C, K] values into a zero spectrum."""
    idx = np.ix_(*index_grids)
    b, c = v.shape[0], v.shape[1]
    kept = tuple(len(g) for g in index_grids)
    buf = np.zeros((b, c) + tuple(full_spatial), dtype=np.complex128)
    buf[(slice(None), slice(None)) + idx] = v.data.reshape((b, c) + kept)
    out = ComplexTensor.wrap(buf)

    def backward(g):
        sub = g[(slice(None), slice(None)) + idx]
        return (sub.reshape(b, c, -1).copy(),)

    _record(out, (v,), backward)
    return out


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Max relative error between reverse-mode and central finite differences.

    Relative error per coordinate is |g_ad - g_fd| / max(|g_ad|, |g_fd|, eps)
    with eps = 1e-12, so two exactly-zero gradients compare as 0.
    """

    max_rel_error: float
    step: float
    eps: float = 1e-12
    n_coordinates: int = 0
    worst_index: tuple = field(default_factory=tuple)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(f, theta: Tensor, h: float = 1e-5) -> GradCheckReport:
    """Check d f / d theta for a scalar-valued differentiable function.

    ``f`` is called with a single Tensor argument.  The reverse-mode
    gradient is taken under a fresh tape; finite differences re-evaluate
    ``f`` tape-free at theta +/- h per coordinate.
    """
    with Tape() as tape:
        loss = f(theta)
    if loss.shape != ():
        raise ShapeError("grad_check target must be scalar")
    if not np.isfinite(loss.data):
        raise ValueError("non-finite function value at theta")
    g_ad = tape.gradients(loss, [theta])[theta.node_id]

    base = theta.data
    g_fd = np.zeros_like(base)
    flat = base.ravel()
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = h
        tp = Tensor.wrap((flat + bump).reshape(base.shape))
        tm = Tensor.wrap((flat - bump).reshape(base.shape))
        fp = f(tp).item()
        fm = f(tm).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError("non-finite function value during finite differencing")
        g_fd.ravel()[i] = (fp - fm) / (2.0 * h)

    eps = 1e-12
    denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), eps)
    rel = np.abs(g_ad - g_fd) / denom
    worst = int(np.argmax(rel))
    return GradCheckReport(
        max_rel_error=float(rel.ravel()[worst]),
        step=h,
        eps=eps,
        n_coordinates=flat.size,
        worst_index=np.unravel_index(worst, base.shape),
    )


def zeros(*shape) -> Tensor:
    return Tensor.wrap(np.zeros(shape, dtype=np.float64))


def ones(*shape) -> Tensor:
    return Tensor.wrap(np.ones(shape, dtype=np.float64))
