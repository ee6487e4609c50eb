"""Hot 3D kernels: 3x3x3 convolution, 4x4x4 stride-2 deconvolution, 2x2x2 max pooling.

Tensors are ``(N, C, D, H, W)`` with ``W`` (x) fastest.  Each public function
dispatches to a numba kernel or to a pure-numpy path, chosen once at import
by :mod:`s4c._accel`.  Both paths compute the same maps; they are not
guaranteed to agree bit for bit.
"""

import numpy as np

from .._accel import USE_NUMBA, njit

_CHUNK = 2048


def _pad1(x):
    return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@njit(cache=True, fastmath=True, nogil=True)
def _conv_fwd_nb(xf, w, out, offs, length):
    # xf: (N, Ci, P) padded volume flattened per channel, so a 3x3x3 tap is a
    # constant offset; out: (N, Co, P) on the padded grid, valid where the
    # padded-grid index is inside [0, D) x [0, H) x [0, W).
    N, Ci, _ = xf.shape
    Co = w.shape[0]
    acc = np.empty(_CHUNK, out.dtype)
    for n in range(N):
        for s in range(0, length, _CHUNK):
            m = min(_CHUNK, length - s)
            a = acc[:m]
            for o in range(Co):
                a[:] = 0.0
                for i in range(Ci):
                    for k in range(9):
                        src = xf[n, i, s + offs[k]:s + offs[k] + m + 2]
                        w0 = w[o, i, k, 0]
                        w1 = w[o, i, k, 1]
                        w2 = w[o, i, k, 2]
                        for p in range(m):
                            a[p] += w0 * src[p] + w1 * src[p + 1] + w2 * src[p + 2]
                out[n, o, s:s + m] = a


@njit(cache=True, fastmath=True, nogil=True)
def _conv_gw_nb(xf, gf, gw, offs, length):
    # gf: grad_out scattered onto the padded grid (zeros at invalid positions)
    N, Ci, _ = xf.shape
    Co = gf.shape[1]
    for n in range(N):
        for s in range(0, length, _CHUNK):
            m = min(_CHUNK, length - s)
            for o in range(Co):
                gs = gf[n, o, s:s + m]
                for i in range(Ci):
                    for k in range(9):
                        src = xf[n, i, s + offs[k]:s + offs[k] + m + 2]
                        s0 = 0.0
                        s1 = 0.0
                        s2 = 0.0
                        for p in range(m):
                            gv = gs[p]
                            s0 += gv * src[p]
                            s1 += gv * src[p + 1]
                            s2 += gv * src[p + 2]
                        gw[o, i, k, 0] += s0
                        gw[o, i, k, 1] += s1
                        gw[o, i, k, 2] += s2


@njit(cache=True, fastmath=True, nogil=True)
def _deconv_fwd_nb(xp, w, out):
    # xp: input padded by 1, out: (N, Co, 2D, 2H, 2W)
    N, Ci = xp.shape[0], xp.shape[1]
    D, H, W = xp.shape[2] - 2, xp.shape[3] - 2, xp.shape[4] - 2
    Co = out.shape[1]
    ev = np.empty(W, out.dtype)
    od = np.empty(W, out.dtype)
    for n in range(N):
        for o in range(Co):
            for z in range(2 * D):
                a0 = (z + 1) % 2
                for y in range(2 * H):
                    b0 = (y + 1) % 2
                    ev[:] = 0.0
                    od[:] = 0.0
                    for i in range(Ci):
                        for a in (a0, a0 + 2):
                            d = (z + 1 - a) // 2 + 1
                            for b in (b0, b0 + 2):
                                hh = (y + 1 - b) // 2 + 1
                                src = xp[n, i, d, hh]
                                k0 = w[i, o, a, b, 0]
                                k1 = w[i, o, a, b, 1]
                                k2 = w[i, o, a, b, 2]
                                k3 = w[i, o, a, b, 3]
                                for m in range(W):
                                    ev[m] += k1 * src[m + 1] + k3 * src[m]
                                    od[m] += k0 * src[m + 2] + k2 * src[m + 1]
                    for m in range(W):
                        out[n, o, z, y, 2 * m] = ev[m]
                        out[n, o, z, y, 2 * m + 1] = od[m]


@njit(cache=True, fastmath=True, nogil=True)
def _deconv_bwd_nb(x, w, gp, gx, gw):
    # gp: grad_out padded by 1; gx like x; gw like w (float64 accumulator)
    N, Ci, D, H, W = x.shape
    Co = gp.shape[1]
    row = np.empty(W, gx.dtype)
    for n in range(N):
        for d in range(D):
            for h in range(H):
                for i in range(Ci):
                    row[:] = 0.0
                    xrow = x[n, i, d, h]
                    for o in range(Co):
                        for a in range(4):
                            for b in range(4):
                                src = gp[n, o, 2 * d + a, 2 * h + b]
                                k0 = w[i, o, a, b, 0]
                                k1 = w[i, o, a, b, 1]
                                k2 = w[i, o, a, b, 2]
                                k3 = w[i, o, a, b, 3]
                                s0 = 0.0
                                s1 = 0.0
                                s2 = 0.0
                                s3 = 0.0
                                for m in range(W):
                                    g0 = src[2 * m]
                                    g1 = src[2 * m + 1]
                                    g2 = src[2 * m + 2]
                                    g3 = src[2 * m + 3]
                                    row[m] += k0 * g0 + k1 * g1 + k2 * g2 + k3 * g3
                                    xv = xrow[m]
                                    s0 += xv * g0
                                    s1 += xv * g1
                                    s2 += xv * g2
                                    s3 += xv * g3
                                gw[i, o, a, b, 0] += s0
                                gw[i, o, a, b, 1] += s1
                                gw[i, o, a, b, 2] += s2
                                gw[i, o, a, b, 3] += s3
                    gx[n, i, d, h, :] = row


@njit(cache=True, nogil=True)
def _pool_fwd_nb(x, out, idx):
    N, C, D, H, W = out.shape
    for n in range(N):
        for c in range(C):
            for d in range(D):
                for h in range(H):
                    for w in range(W):
                        best = x[n, c, 2 * d, 2 * h, 2 * w]
                        bi = 0
                        for k in range(1, 8):
                            dz = k >> 2
                            dy = (k >> 1) & 1
                            dx = k & 1
                            v = x[n, c, 2 * d + dz, 2 * h + dy, 2 * w + dx]
                            if v > best:
                                best = v
                                bi = k
                        out[n, c, d, h, w] = best
                        idx[n, c, d, h, w] = bi


@njit(cache=True, nogil=True)
def _pool_bwd_nb(g, idx, gx):
    N, C, D, H, W = g.shape
    for n in range(N):
        for c in range(C):
            for d in range(D):
                for h in range(H):
                    for w in range(W):
                        k = idx[n, c, d, h, w]
                        gx[n, c, 2 * d + (k >> 2), 2 * h + ((k >> 1) & 1), 2 * w + (k & 1)] = g[n, c, d, h, w]


def _flat_layout(x):
    N, C, D, H, W = x.shape
    Hp, Wp = H + 2, W + 2
    xf = _pad1(x).reshape(N, C, -1)
    offs = np.array([a * Hp * Wp + b * Wp for a in range(3) for b in range(3)], np.int64)
    # one past the last valid output position; keeps every tap slice in bounds
    return xf, offs, (D - 1) * Hp * Wp + (H - 1) * Wp + W


# ---------------------------------------------------------------------------
# numpy kernels
# ---------------------------------------------------------------------------


def _offset_layout(x):
    """Padded input flattened per channel so every 3x3x3 shift is a contiguous slice."""
    N, C, D, H, W = x.shape
    Dp, Hp, Wp = D + 2, H + 2, W + 2
    flat = np.ascontiguousarray(_pad1(x).transpose(1, 0, 2, 3, 4)).reshape(C, -1)
    offs = [a * Hp * Wp + b * Wp + c for a in range(3) for b in range(3) for c in range(3)]
    return flat, offs, (Dp, Hp, Wp)


def _conv_fwd_np(x, w):
    N, Ci, D, H, W = x.shape
    Co = w.shape[0]
    flat, offs, (Dp, Hp, Wp) = _offset_layout(x)
    total = flat.shape[1]
    length = total - offs[-1]
    wm = w.reshape(Co, Ci, 27).transpose(0, 2, 1).reshape(Co, 27 * Ci)
    out = np.zeros((Co, total), x.dtype)
    col = np.empty((27, Ci, _CHUNK), x.dtype)
    for s in range(0, length, _CHUNK):
        e = min(length, s + _CHUNK)
        m = e - s
        for k, off in enumerate(offs):
            col[k, :, :m] = flat[:, s + off:e + off]
        out[:, s:e] = wm @ col[:, :, :m].reshape(27 * Ci, m)
    out = out.reshape(Co, N, Dp, Hp, Wp)[:, :, :D, :H, :W]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4))


def _conv_gw_np(x, g):
    N, Ci, D, H, W = x.shape
    Co = g.shape[1]
    flat, offs, (Dp, Hp, Wp) = _offset_layout(x)
    total = flat.shape[1]
    length = total - offs[-1]
    gfull = np.zeros((Co, N, Dp, Hp, Wp), x.dtype)
    gfull[:, :, :D, :H, :W] = g.transpose(1, 0, 2, 3, 4)
    gfull = gfull.reshape(Co, -1)
    acc = np.zeros((Co, 27 * Ci), np.float64)
    col = np.empty((27, Ci, _CHUNK), x.dtype)
    for s in range(0, length, _CHUNK):
        e = min(length, s + _CHUNK)
        m = e - s
        for k, off in enumerate(offs):
            col[k, :, :m] = flat[:, s + off:e + off]
        acc += gfull[:, s:e] @ col[:, :, :m].reshape(27 * Ci, m).T
    return acc.reshape(Co, 27, Ci).transpose(0, 2, 1).reshape(Co, Ci, 3, 3, 3)


def _deconv_fwd_np(x, w):
    N, Ci, D, H, W = x.shape
    Co = w.shape[1]
    wm = w.transpose(1, 2, 3, 4, 0).reshape(Co * 64, Ci)
    xm = x.transpose(1, 0, 2, 3, 4).reshape(Ci, -1)
    y = (wm @ xm).reshape(Co, 4, 4, 4, N, D, H, W)
    out = np.zeros((N, Co, 2 * D + 2, 2 * H + 2, 2 * W + 2), x.dtype)
    for a in range(4):
        for b in range(4):
            for c in range(4):
                out[:, :, a:a + 2 * D:2, b:b + 2 * H:2, c:c + 2 * W:2] += y[:, a, b, c].transpose(1, 0, 2, 3, 4)
    return np.ascontiguousarray(out[:, :, 1:-1, 1:-1, 1:-1])


def _deconv_bwd_np(x, w, g):
    N, Ci, D, H, W = x.shape
    Co = w.shape[1]
    gp = _pad1(g)
    col = np.empty((Co, 4, 4, 4, N, D, H, W), x.dtype)
    for a in range(4):
        for b in range(4):
            for c in range(4):
                col[:, a, b, c] = gp[:, :, a:a + 2 * D:2, b:b + 2 * H:2, c:c + 2 * W:2].transpose(1, 0, 2, 3, 4)
    col = col.reshape(Co * 64, -1)
    wm = w.transpose(0, 1, 2, 3, 4).reshape(Ci, Co * 64)
    gx = (wm @ col).reshape(Ci, N, D, H, W).transpose(1, 0, 2, 3, 4)
    xm = x.transpose(1, 0, 2, 3, 4).reshape(Ci, -1)
    gw = (xm.astype(np.float64) @ col.T.astype(np.float64)).reshape(Ci, Co, 4, 4, 4)
    return np.ascontiguousarray(gx), gw


def _pool_blocks(x):
    N, C, D, H, W = x.shape
    b = x.reshape(N, C, D // 2, 2, H // 2, 2, W // 2, 2)
    return b.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(N, C, D // 2, H // 2, W // 2, 8)


def _pool_fwd_np(x):
    blocks = _pool_blocks(x)
    idx = blocks.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(blocks, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def _pool_bwd_np(g, idx):
    N, C, D, H, W = g.shape
    blocks = np.zeros((N, C, D, H, W, 8), g.dtype)
    np.put_along_axis(blocks, idx[..., None].astype(np.intp), g[..., None], axis=-1)
    gx = blocks.reshape(N, C, D, H, W, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    return np.ascontiguousarray(gx.reshape(N, C, 2 * D, 2 * H, 2 * W))


# ---------------------------------------------------------------------------
# public dispatch
# ---------------------------------------------------------------------------


def conv3x3(x, w):
    """Same-size 3x3x3 convolution (stride 1, zero padding 1).

    ``x`` is ``(N, Ci, D, H, W)`` and ``w`` is ``(Co, Ci, 3, 3, 3)``.
    """
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, kernel expects {w.shape[1]}")
    w = np.ascontiguousarray(w, dtype=x.dtype)
    if USE_NUMBA:
        N, Ci, D, H, W = x.shape
        Co = w.shape[0]
        xf, offs, length = _flat_layout(x)
        out = np.empty((N, Co, xf.shape[2]), x.dtype)
        _conv_fwd_nb(xf, np.ascontiguousarray(w.reshape(Co, Ci, 9, 3)), out, offs, length)
        return np.ascontiguousarray(out.reshape(N, Co, D + 2, H + 2, W + 2)[:, :, :D, :H, :W])
    return _conv_fwd_np(x, w)


def conv3x3_backward(x, w, g):
    """Gradients ``(grad_input, grad_kernel)`` of :func:`conv3x3`."""
    w = np.ascontiguousarray(w, dtype=x.dtype)
    # grad wrt input is a same-size convolution with the flipped, transposed kernel
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    gx = conv3x3(g, wt)
    if USE_NUMBA:
        N, Ci, D, H, W = x.shape
        Co = w.shape[0]
        xf, offs, length = _flat_layout(x)
        gf = np.zeros((N, Co, D + 2, H + 2, W + 2), x.dtype)
        gf[:, :, :D, :H, :W] = g
        gw = np.zeros((Co, Ci, 9, 3), np.float64)
        _conv_gw_nb(xf, gf.reshape(N, Co, -1), gw, offs, length)
        gw = gw.reshape(w.shape)
    else:
        gw = _conv_gw_np(x, g)
    return gx, gw.astype(x.dtype)


def deconv4x4(x, w):
    """Transposed convolution, kernel 4x4x4, stride 2, padding 1: doubles each spatial dim.

    ``w`` is ``(Ci, Co, 4, 4, 4)``.
    """
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, kernel expects {w.shape[0]}")
    w = np.ascontiguousarray(w, dtype=x.dtype)
    if USE_NUMBA:
        N, _, D, H, W = x.shape
        out = np.empty((N, w.shape[1], 2 * D, 2 * H, 2 * W), x.dtype)
        _deconv_fwd_nb(_pad1(x), w, out)
        return out
    return _deconv_fwd_np(x, w)


def deconv4x4_backward(x, w, g):
    """Gradients ``(grad_input, grad_kernel)`` of :func:`deconv4x4`."""
    w = np.ascontiguousarray(w, dtype=x.dtype)
    if USE_NUMBA:
        gx = np.empty_like(x)
        gw = np.zeros(w.shape, np.float64)
        _deconv_bwd_nb(np.ascontiguousarray(x), w, _pad1(g), gx, gw)
    else:
        gx, gw = _deconv_bwd_np(x, w, g)
    return gx, gw.astype(x.dtype)


def maxpool2(x):
    """2x2x2 max pooling with stride 2.

    Returns the pooled tensor and, per output, the block offset of the
    maximum (``dz*4 + dy*2 + dx``).  Ties go to the lowest offset.
    """
    if any(s % 2 for s in x.shape[2:]):
        raise ValueError(f"max pooling needs even spatial dims, got {x.shape[2:]}")
    if USE_NUMBA:
        N, C, D, H, W = x.shape
        out = np.empty((N, C, D // 2, H // 2, W // 2), x.dtype)
        idx = np.empty(out.shape, np.int8)
        _pool_fwd_nb(x, out, idx)
        return out, idx
    return _pool_fwd_np(x)


def maxpool2_backward(g, idx):
    if USE_NUMBA:
        N, C, D, H, W = g.shape
        gx = np.zeros((N, C, 2 * D, 2 * H, 2 * W), g.dtype)
        _pool_bwd_nb(np.ascontiguousarray(g), idx, gx)
        return gx
    return _pool_bwd_np(g, idx)
