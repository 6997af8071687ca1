"""Direct 3D convolution kernels, numba and numpy flavours.

All kernels work on already padded inputs laid out ``(N, C, X, Y, Z)`` with
weights ``(O, C, KX, KY, KZ)``:

    out[n, o, x, y, z] = b[o] + sum_{c,i,j,k} w[o, c, i, j, k] * xp[n, c, s*x+i, s*y+j, s*z+k]

``conv_backward_input`` is the adjoint of that map with respect to ``xp`` and
doubles as the transpose convolution.  Each output element is produced by a
fixed summation order, so results are reproducible run to run.
"""
from __future__ import annotations

import numpy as np

from .._accel import njit, use_numba


def out_size(n: int, k: int, stride: int) -> int:
    return (n - k) // stride + 1


# ----------------------------------------------------------------------- numba

@njit
def _fwd_nb(xp, w, b, stride, out):
    N, C = xp.shape[0], xp.shape[1]
    O, KX, KY, KZ = w.shape[0], w.shape[2], w.shape[3], w.shape[4]
    OX, OY, OZ = out.shape[2], out.shape[3], out.shape[4]
    for n in range(N):
        for o in range(O):
            bo = b[o]
            for x in range(OX):
                for y in range(OY):
                    for z in range(OZ):
                        out[n, o, x, y, z] = bo
        for x in range(OX):
            for c in range(C):
                for i in range(KX):
                    xi = x * stride + i
                    for j in range(KY):
                        for k in range(KZ):
                            for o in range(O):
                                wv = w[o, c, i, j, k]
                                for y in range(OY):
                                    yi = y * stride + j
                                    if stride == 1:
                                        # contiguous inner loop so it vectorises
                                        for z in range(OZ):
                                            out[n, o, x, y, z] += wv * xp[n, c, xi, yi, z + k]
                                    else:
                                        for z in range(OZ):
                                            out[n, o, x, y, z] += wv * xp[n, c, xi, yi, z * stride + k]
    return out


@njit
def _bwd_input_nb(g, w, stride, gxp):
    N, O = g.shape[0], g.shape[1]
    C, KX, KY, KZ = w.shape[1], w.shape[2], w.shape[3], w.shape[4]
    OX, OY, OZ = g.shape[2], g.shape[3], g.shape[4]
    gxp[...] = 0
    for n in range(N):
        for x in range(OX):
            for c in range(C):
                for i in range(KX):
                    xi = x * stride + i
                    for j in range(KY):
                        for k in range(KZ):
                            for o in range(O):
                                wv = w[o, c, i, j, k]
                                for y in range(OY):
                                    yi = y * stride + j
                                    if stride == 1:
                                        for z in range(OZ):
                                            gxp[n, c, xi, yi, z + k] += wv * g[n, o, x, y, z]
                                    else:
                                        for z in range(OZ):
                                            gxp[n, c, xi, yi, z * stride + k] += wv * g[n, o, x, y, z]
    return gxp


@njit
def _bwd_weight_nb(g, xp, stride, gw):
    N, O = g.shape[0], g.shape[1]
    C, KX, KY, KZ = gw.shape[1], gw.shape[2], gw.shape[3], gw.shape[4]
    OX, OY, OZ = g.shape[2], g.shape[3], g.shape[4]
    for o in range(O):
        for c in range(C):
            for i in range(KX):
                for j in range(KY):
                    for k in range(KZ):
                        acc = 0.0
                        for n in range(N):
                            for x in range(OX):
                                xi = x * stride + i
                                for y in range(OY):
                                    yi = y * stride + j
                                    if stride == 1:
                                        for z in range(OZ):
                                            acc += g[n, o, x, y, z] * xp[n, c, xi, yi, z + k]
                                    else:
                                        for z in range(OZ):
                                            acc += g[n, o, x, y, z] * xp[n, c, xi, yi, z * stride + k]
                        gw[o, c, i, j, k] = acc
    return gw


# Stride-1 variants work on (y, z) planes flattened with the padded row
# width, so the innermost loop runs over one long contiguous span.  Output
# columns z >= OZ are scratch and dropped by the caller; gradient inputs carry
# zeros there so they contribute nothing.

@njit
def _fwd_flat_nb(xf, w, b, zp, span, outf):
    N, C = xf.shape[0], xf.shape[1]
    O, KX, KY, KZ = w.shape[0], w.shape[2], w.shape[3], w.shape[4]
    OX = outf.shape[2]
    for n in range(N):
        for x in range(OX):
            for o in range(O):
                bo = b[o]
                for q in range(span):
                    outf[n, o, x, q] = bo
            for c in range(C):
                for i in range(KX):
                    for j in range(KY):
                        for k in range(KZ):
                            off = j * zp + k
                            # slice views keep indices provably non-negative, which numba needs to vectorise
                            src = xf[n, c, x + i, off:off + span]
                            for o in range(O):
                                wv = w[o, c, i, j, k]
                                dst = outf[n, o, x]
                                for q in range(span):
                                    dst[q] += wv * src[q]
    return outf


@njit
def _bwd_input_flat_nb(gf, w, zp, span, gxf):
    N, O, OX = gf.shape[0], gf.shape[1], gf.shape[2]
    C, KX, KY, KZ = w.shape[1], w.shape[2], w.shape[3], w.shape[4]
    gxf[...] = 0
    for n in range(N):
        for x in range(OX):
            for c in range(C):
                for i in range(KX):
                    for j in range(KY):
                        for k in range(KZ):
                            off = j * zp + k
                            dst = gxf[n, c, x + i, off:off + span]
                            for o in range(O):
                                wv = w[o, c, i, j, k]
                                src = gf[n, o, x]
                                for q in range(span):
                                    dst[q] += wv * src[q]
    return gxf


@njit
def _bwd_weight_flat_nb(gf, xf, zp, span, zero, gw):
    N, O, OX = gf.shape[0], gf.shape[1], gf.shape[2]
    C, KX, KY, KZ = gw.shape[1], gw.shape[2], gw.shape[3], gw.shape[4]
    gw[...] = 0
    for n in range(N):
        for x in range(OX):
            for c in range(C):
                for i in range(KX):
                    for j in range(KY):
                        for k in range(KZ):
                            off = j * zp + k
                            src = xf[n, c, x + i, off:off + span]
                            for o in range(O):
                                acc = zero[0]
                                gr = gf[n, o, x]
                                for q in range(span):
                                    acc += gr[q] * src[q]
                                gw[o, c, i, j, k] += acc
    return gw


def _flat_geometry(xp_shape, osz):
    _, _, _, yp, zp = xp_shape
    return zp, (osz[1] - 1) * zp + osz[2]


def _pad_rows(g, zp):
    """(N, O, X, Y, Z) -> (N, O, X, Y*zp) with zero scratch columns."""
    n, o, x, y, z = g.shape
    gf = np.zeros((n, o, x, y, zp), dtype=g.dtype)
    gf[..., :z] = g
    return gf.reshape(n, o, x, y * zp)


# ----------------------------------------------------------------------- numpy

def _window(xp, i, j, k, stride, osz):
    ox, oy, oz = osz
    s = stride
    return xp[:, :, i:i + s * (ox - 1) + 1:s, j:j + s * (oy - 1) + 1:s, k:k + s * (oz - 1) + 1:s]


def _fwd_np(xp, w, b, stride, out):
    osz = out.shape[2:]
    out[...] = b[None, :, None, None, None]
    for i in range(w.shape[2]):
        for j in range(w.shape[3]):
            for k in range(w.shape[4]):
                win = _window(xp, i, j, k, stride, osz)
                out += np.einsum("oc,ncxyz->noxyz", w[:, :, i, j, k], win, optimize=True)
    return out


def _bwd_input_np(g, w, stride, gxp):
    osz = g.shape[2:]
    gxp[...] = 0
    for i in range(w.shape[2]):
        for j in range(w.shape[3]):
            for k in range(w.shape[4]):
                win = _window(gxp, i, j, k, stride, osz)
                win += np.einsum("oc,noxyz->ncxyz", w[:, :, i, j, k], g, optimize=True)
    return gxp


def _bwd_weight_np(g, xp, stride, gw):
    osz = g.shape[2:]
    g64 = g.astype(np.float64, copy=False)
    for i in range(gw.shape[2]):
        for j in range(gw.shape[3]):
            for k in range(gw.shape[4]):
                win = _window(xp, i, j, k, stride, osz).astype(np.float64, copy=False)
                gw[:, :, i, j, k] = np.einsum("noxyz,ncxyz->oc", g64, win, optimize=True)
    return gw


# --------------------------------------------------------------------- dispatch

def conv_forward(xp: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int) -> np.ndarray:
    N, C, X, Y, Z = xp.shape
    O, Cw, KX, KY, KZ = w.shape
    if C != Cw:
        raise ValueError(f"input has {C} channels, kernel expects {Cw}")
    osz = (out_size(X, KX, stride), out_size(Y, KY, stride), out_size(Z, KZ, stride))
    if min(osz) < 1:
        raise ValueError(f"kernel {w.shape[2:]} larger than padded input {xp.shape[2:]}")
    dtype = np.result_type(xp, w)
    out = np.empty((N, O) + osz, dtype=dtype)
    xp, w, b = (np.ascontiguousarray(a, dtype=dtype) for a in (xp, w, b))
    if use_numba():
        if stride == 1:
            zp, span = _flat_geometry(xp.shape, osz)
            outf = np.zeros((N, O, osz[0], osz[1] * zp), dtype=dtype)
            _fwd_flat_nb(xp.reshape(N, C, X, Y * Z), w, b, zp, span, outf)
            out[...] = outf.reshape(N, O, osz[0], osz[1], zp)[..., :osz[2]]
            return out
        return _fwd_nb(xp, w, b, int(stride), out)
    return _fwd_np(xp, w, b, stride, out)


def conv_backward_input(g: np.ndarray, w: np.ndarray, stride: int, in_shape) -> np.ndarray:
    """Gradient w.r.t. the padded input, shape ``in_shape``."""
    dtype = np.result_type(g, w)
    gxp = np.empty(tuple(in_shape), dtype=dtype)
    g, w = (np.ascontiguousarray(a, dtype=dtype) for a in (g, w))
    if use_numba():
        if stride == 1:
            n, c, xp_, yp, zp = gxp.shape
            _, span = _flat_geometry(gxp.shape, g.shape[2:])
            _bwd_input_flat_nb(_pad_rows(g, zp), w, zp, span, gxp.reshape(n, c, xp_, yp * zp))
            return gxp
        return _bwd_input_nb(g, w, int(stride), gxp)
    return _bwd_input_np(g, w, stride, gxp)


def conv_backward_weight(g: np.ndarray, xp: np.ndarray, stride: int, w_shape) -> np.ndarray:
    """Gradient w.r.t. the weights; accumulated in float64."""
    gw = np.empty(tuple(w_shape), dtype=np.float64)
    dtype = np.result_type(g, xp)
    g, xp = (np.ascontiguousarray(a, dtype=dtype) for a in (g, xp))
    if use_numba():
        if stride == 1:
            n, c, xp_, yp, zp = xp.shape
            _, span = _flat_geometry(xp.shape, g.shape[2:])
            _bwd_weight_flat_nb(_pad_rows(g, zp), xp.reshape(n, c, xp_, yp * zp), zp, span,
                                np.zeros(1, dtype=dtype), gw)
        else:
            _bwd_weight_nb(g, xp, int(stride), gw)
    else:
        _bwd_weight_np(g, xp, stride, gw)
    return gw.astype(dtype, copy=False)

