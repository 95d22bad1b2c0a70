"""3x3x3 convolution kernels, padding 1, stride 1 or 2.

Two routes compute the same maps:

* ``*_reference`` functions are plain numpy over sliding windows; slow but
  easy to read and the yardstick for tests.
* the default functions dispatch to numba loops. Stride 1 works on the
  flattened padded grid, so every kernel tap is one long contiguous AXPY over
  a cache-sized tile; stride 2 loops directly.

Weights are ``(c_out, c_in, 3, 3, 3)``; activations ``(n, c, d, h, w)``.
"""
from __future__ import annotations

import numpy as np
from numba import njit
from numpy.lib.stride_tricks import sliding_window_view

TILE = 512
_FM = {"contract"}


def pad1(x: np.ndarray) -> np.ndarray:
    n, c, d, h, w = x.shape
    xp = np.zeros((n, c, d + 2, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1, 1:-1] = x
    return xp


def out_size(n: int, stride: int) -> int:
    return (n - 1) // stride + 1


def _tap_offsets(hp: int, wp: int) -> np.ndarray:
    return np.array([a * hp * wp + b * wp + c for a in range(3) for b in range(3) for c in range(3)], dtype=np.int64)


# -- numba loops ----------------------------------------------------------------

@njit(cache=True, fastmath=_FM)
def _conv_s1_flat(xpf, w, offs, d, h, w_, hp, wp, out):
    n_, co_ = out.shape[0], out.shape[1]
    ci_ = xpf.shape[1]
    plane = hp * wp
    last = (d - 1) * plane + (h - 1) * wp + w_
    acc = np.empty((co_, TILE), dtype=out.dtype)
    for n in range(n_):
        for t0 in range(0, last, TILE):
            t1 = min(last, t0 + TILE)
            ln = t1 - t0
            acc[:, :ln] = 0.0
            for ci in range(ci_):
                for k in range(27):
                    src = xpf[n, ci, t0 + offs[k]: t1 + offs[k]]
                    for co in range(co_):
                        wv = w[co, ci, k]
                        row = acc[co]
                        for i in range(ln):
                            row[i] += wv * src[i]
            for i in range(ln):
                p = t0 + i
                dd = p // plane
                r = p - dd * plane
                hh = r // wp
                ww = r - hh * wp
                if hh < h and ww < w_:
                    for co in range(co_):
                        out[n, co, dd, hh, ww] = acc[co, i]
    return out


@njit(cache=True, fastmath={"contract", "reassoc"})
def _conv_s1_flat_dw(xpf, gpf, offs, last, dw):
    # gpf: output gradient laid out on the padded grid (zeros off the valid region)
    n_, co_ = gpf.shape[0], gpf.shape[1]
    ci_ = xpf.shape[1]
    for n in range(n_):
        for t0 in range(0, last, TILE):
            t1 = min(last, t0 + TILE)
            for co in range(co_):
                g = gpf[n, co, t0:t1]
                for ci in range(ci_):
                    for k in range(27):
                        src = xpf[n, ci, t0 + offs[k]: t1 + offs[k]]
                        s = 0.0
                        for i in range(t1 - t0):
                            s += g[i] * src[i]
                        dw[co, ci, k] += s
    return dw


@njit(cache=True, fastmath=_FM)
def _conv_s2(xp, w, out):
    n_, co_, do, ho, wo = out.shape
    ci_ = xp.shape[1]
    for n in range(n_):
        for co in range(co_):
            for d in range(do):
                for h in range(ho):
                    for x in range(wo):
                        s = 0.0
                        for ci in range(ci_):
                            for a in range(3):
                                for b in range(3):
                                    for c in range(3):
                                        s += w[co, ci, a, b, c] * xp[n, ci, 2 * d + a, 2 * h + b, 2 * x + c]
                        out[n, co, d, h, x] = s
    return out


@njit(cache=True, fastmath=_FM)
def _conv_s2_dx(g, w, dxp):
    n_, co_, do, ho, wo = g.shape
    ci_ = dxp.shape[1]
    for n in range(n_):
        for co in range(co_):
            for d in range(do):
                for h in range(ho):
                    for x in range(wo):
                        gv = g[n, co, d, h, x]
                        for ci in range(ci_):
                            for a in range(3):
                                for b in range(3):
                                    for c in range(3):
                                        dxp[n, ci, 2 * d + a, 2 * h + b, 2 * x + c] += gv * w[co, ci, a, b, c]
    return dxp


@njit(cache=True, fastmath=_FM)
def _conv_s2_dw(xp, g, dw):
    n_, co_, do, ho, wo = g.shape
    ci_ = xp.shape[1]
    for n in range(n_):
        for co in range(co_):
            for d in range(do):
                for h in range(ho):
                    for x in range(wo):
                        gv = g[n, co, d, h, x]
                        for ci in range(ci_):
                            for a in range(3):
                                for b in range(3):
                                    for c in range(3):
                                        dw[co, ci, a, b, c] += gv * xp[n, ci, 2 * d + a, 2 * h + b, 2 * x + c]
    return dw


@njit(cache=True)
def _csum(row, shift):
    # Neumaier-compensated sum of (row - shift), returned unevaluated as (hi, lo)
    s = 0.0
    comp = 0.0
    for v in row:
        d = v - shift
        t = s + d
        if abs(s) >= abs(d):
            comp += (s - t) + d
        else:
            comp += (d - t) + s
        s = t
    hi = s + comp
    return hi, comp - (hi - s)


@njit(cache=True)
def _two_prod(a, b):
    # Dekker's error-free product: a * b == p + e exactly
    p = a * b
    c = 134217729.0 * a
    a_hi = c - (c - a)
    a_lo = a - a_hi
    c = 134217729.0 * b
    b_hi = c - (c - b)
    b_lo = b - b_hi
    e = ((a_hi * b_hi - p) + a_hi * b_lo + a_lo * b_hi) + a_lo * b_lo
    return p, e


@njit(cache=True)
def _instance_norm_rows(x, eps, xhat, inv):
    """Rows of ``x`` standardised with statistics free of per-row rounding bias.

    A rounding error in the mean or in 1/std shifts or scales a whole row at
    once, and such coherent errors do not average out downstream. The mean is
    found in two stages (naive, then the compensated mean of the residuals);
    the variance sum is compensated and 1/sqrt(var + eps) is carried as an
    unevaluated pair refined by one Newton step.
    """
    rows, m = x.shape
    for r in range(rows):
        row = x[r]
        mu0 = _csum(row, 0.0)[0] / m
        mu1 = _csum(row, mu0)[0] / m
        s = 0.0
        comp = 0.0
        for v in row:
            d = (v - mu0) - mu1
            q = d * d
            t = s + q
            if s >= q:
                comp += (s - t) + q
            else:
                comp += (q - t) + s
            s = t
        s_hi = s + comp
        s_lo = comp - (s_hi - s)
        # var = s / m + eps as (v_hi, v_lo)
        v_hi = s_hi / m
        t_hi, t_lo = _two_prod(v_hi, float(m))
        v_lo = (((s_hi - t_hi) - t_lo) + s_lo) / m
        w_hi = v_hi + eps
        w_lo = (eps - (w_hi - v_hi)) + v_lo if v_hi >= eps else (v_hi - (w_hi - eps)) + v_lo
        # y = 1/sqrt(w): y0 + y0 * (1 - w y0^2) / 2
        y0 = 1.0 / np.sqrt(w_hi)
        p_hi, p_lo = _two_prod(y0, y0)
        q_hi, q_lo = _two_prod(w_hi, p_hi)
        e = ((1.0 - q_hi) - q_lo) - w_hi * p_lo - w_lo * p_hi
        y_lo = 0.5 * y0 * e
        inv[r] = y0 + y_lo
        for i in range(m):
            d = (row[i] - mu0) - mu1
            xhat[r, i] = d * y0 + d * y_lo


def instance_norm(x: np.ndarray, eps: float):
    """``(xhat, inv)`` for per-(sample, channel) standardisation of ``(n, c, ...)``."""
    n, c = x.shape[:2]
    flat = np.ascontiguousarray(x).reshape(n * c, -1)
    xhat = np.empty_like(flat)
    inv = np.empty(n * c, dtype=np.float64)
    _instance_norm_rows(flat, eps, xhat, inv)
    return xhat.reshape(x.shape), inv.astype(x.dtype).reshape((n, c) + (1,) * (x.ndim - 2))


# -- public entry points ---------------------------------------------------------

def conv3d(x: np.ndarray, w: np.ndarray, stride: int = 1) -> np.ndarray:
    n, ci, d, h, wd = x.shape
    co = w.shape[0]
    xp = pad1(x)
    if stride == 1:
        hp, wp = h + 2, wd + 2
        out = np.empty((n, co, d, h, wd), dtype=x.dtype)
        wk = np.ascontiguousarray(w.reshape(co, ci, 27), dtype=x.dtype)
        return _conv_s1_flat(xp.reshape(n, ci, -1), wk, _tap_offsets(hp, wp), d, h, wd, hp, wp, out)
    if stride == 2:
        out = np.empty((n, co, out_size(d, 2), out_size(h, 2), out_size(wd, 2)), dtype=x.dtype)
        return _conv_s2(xp, np.ascontiguousarray(w, dtype=x.dtype), out)
    raise ValueError(f"unsupported stride {stride}")


def conv3d_backward(x: np.ndarray, w: np.ndarray, g: np.ndarray, stride: int = 1):
    """Gradients ``(dx, dw)`` of ``sum(g * conv3d(x, w, stride))``."""
    n, ci, d, h, wd = x.shape
    co = w.shape[0]
    xp = pad1(x)
    g = np.ascontiguousarray(g, dtype=x.dtype)
    if stride == 1:
        # input gradient is a stride-1 convolution with the flipped, transposed kernel
        wt = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        dx = conv3d(g, wt, 1)
        hp, wp = h + 2, wd + 2
        gp = np.zeros((n, co, d, hp, wp), dtype=x.dtype)
        gp[:, :, :, :h, :wd] = g
        last = (d - 1) * hp * wp + (h - 1) * wp + wd
        dw = np.zeros((co, ci, 27), dtype=np.float64)
        _conv_s1_flat_dw(xp.reshape(n, ci, -1), gp.reshape(n, co, -1), _tap_offsets(hp, wp), last, dw)
        return dx, dw.reshape(w.shape).astype(x.dtype)
    if stride == 2:
        dxp = np.zeros_like(xp)
        _conv_s2_dx(g, np.ascontiguousarray(w, dtype=x.dtype), dxp)
        dw = np.zeros(w.shape, dtype=np.float64)
        _conv_s2_dw(xp, g, dw)
        return np.ascontiguousarray(dxp[:, :, 1:-1, 1:-1, 1:-1]), dw.astype(x.dtype)
    raise ValueError(f"unsupported stride {stride}")


def _windows(x: np.ndarray, stride: int) -> np.ndarray:
    win = sliding_window_view(pad1(x), (3, 3, 3), axis=(2, 3, 4))
    return win[:, :, ::stride, ::stride, ::stride]


def conv3d_reference(x: np.ndarray, w: np.ndarray, stride: int = 1) -> np.ndarray:
    return np.einsum("ncdhwabe,ocabe->nodhw", _windows(x, stride), w)


def conv3d_backward_reference(x: np.ndarray, w: np.ndarray, g: np.ndarray, stride: int = 1):
    win = _windows(x, stride)
    dw = np.einsum("ncdhwabe,nodhw->ocabe", win, g)
    n, ci, d, h, wd = x.shape
    dxp = np.zeros((n, ci, d + 2, h + 2, wd + 2), dtype=np.result_type(x, w))
    do, ho, wo = g.shape[2:]
    for a in range(3):
        for b in range(3):
            for c in range(3):
                contrib = np.einsum("nodhw,oc->ncdhw", g, w[:, :, a, b, c])
                dxp[:, :, a : a + stride * do : stride, b : b + stride * ho : stride, c : c + stride * wo : stride] += contrib
    return dxp[:, :, 1:-1, 1:-1, 1:-1], dw
