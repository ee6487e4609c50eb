"""Slow, obviously-correct reference implementations used only by the tests."""

from collections import deque

import numpy as np


def naive_conv3x3(x, w):
    """Same-size 3x3x3 correlation with zero padding, by explicit loops over taps."""
    N, Ci, D, H, W = x.shape
    Co = w.shape[0]
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    out = np.zeros((N, Co, D, H, W))
    for o in range(Co):
        for i in range(Ci):
            for a in range(3):
                for b in range(3):
                    for c in range(3):
                        out[:, o] += w[o, i, a, b, c] * xp[:, i, a:a + D, b:b + H, c:c + W]
    return out


def naive_conv3x3_loops(x, w):
    """Six nested loops per output voxel; only for tiny inputs."""
    N, Ci, D, H, W = x.shape
    Co = w.shape[0]
    out = np.zeros((N, Co, D, H, W))
    for n in range(N):
        for o in range(Co):
            for z in range(D):
                for y in range(H):
                    for xx in range(W):
                        s = 0.0
                        for i in range(Ci):
                            for a in range(3):
                                for b in range(3):
                                    for c in range(3):
                                        zz, yy, xi = z + a - 1, y + b - 1, xx + c - 1
                                        if 0 <= zz < D and 0 <= yy < H and 0 <= xi < W:
                                            s += w[o, i, a, b, c] * x[n, i, zz, yy, xi]
                        out[n, o, z, y, xx] = s
    return out


def naive_deconv4x4(x, w):
    """Scatter form of the stride-2, pad-1 transposed convolution."""
    N, Ci, D, H, W = x.shape
    Co = w.shape[1]
    full = np.zeros((N, Co, 2 * D + 2, 2 * H + 2, 2 * W + 2))
    for z in range(D):
        for y in range(H):
            for xx in range(W):
                v = x[:, :, z, y, xx].astype(np.float64)  # (N, Ci)
                contrib = np.einsum("ni,ioabc->noabc", v, w.astype(np.float64))
                full[:, :, 2 * z:2 * z + 4, 2 * y:2 * y + 4, 2 * xx:2 * xx + 4] += contrib
    return full[:, :, 1:-1, 1:-1, 1:-1]


def naive_strided_conv4x4(y, w):
    """Stride-2, pad-1, 4x4x4 convolution mapping Co channels back to Ci."""
    N, Co, D2, H2, W2 = y.shape
    Ci = w.shape[0]
    D, H, W = D2 // 2, H2 // 2, W2 // 2
    yp = np.pad(y.astype(np.float64), ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    out = np.zeros((N, Ci, D, H, W))
    for z in range(D):
        for yy in range(H):
            for xx in range(W):
                patch = yp[:, :, 2 * z:2 * z + 4, 2 * yy:2 * yy + 4, 2 * xx:2 * xx + 4]
                out[:, :, z, yy, xx] = np.einsum("noabc,ioabc->ni", patch, w.astype(np.float64))
    return out


def naive_maxpool(x):
    N, C, D, H, W = x.shape
    out = np.empty((N, C, D // 2, H // 2, W // 2), x.dtype)
    for z in range(D // 2):
        for y in range(H // 2):
            for xx in range(W // 2):
                out[:, :, z, y, xx] = x[:, :, 2 * z:2 * z + 2, 2 * y:2 * y + 2, 2 * xx:2 * xx + 2].max(axis=(2, 3, 4))
    return out


def flood_fill_partition(mask):
    """Set of frozensets of linear indices, one per 6-connected component (BFS)."""
    mask = np.asarray(mask, bool)
    L, H, W = mask.shape
    seen = np.zeros_like(mask)
    parts = set()
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        comp = []
        q = deque([start])
        seen[start] = True
        while q:
            z, y, x = q.popleft()
            comp.append((z * H + y) * W + x)
            for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                n = (z + dz, y + dy, x + dx)
                if 0 <= n[0] < L and 0 <= n[1] < H and 0 <= n[2] < W and mask[n] and not seen[n]:
                    seen[n] = True
                    q.append(n)
        parts.add(frozenset(comp))
    return parts


def partition_from_ids(ids):
    flat = ids.ravel()
    groups = {}
    for i, c in enumerate(flat):
        if c >= 0:
            groups.setdefault(int(c), []).append(i)
    return {frozenset(v) for v in groups.values()}


def dsc_by_sets(a, b, cls):
    sa = {i for i, v in enumerate(np.ravel(a)) if v == cls}
    sb = {i for i, v in enumerate(np.ravel(b)) if v == cls}
    if not sa and not sb:
        return 1.0
    if not sa or not sb:
        return 0.0
    return 2 * len(sa & sb) / (len(sa) + len(sb))


def brute_roc(scores, truth):
    """(threshold, sens, spec) at +inf and every distinct score, by counting each case."""
    pts = []
    for t in [float("inf")] + sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, truth) if y == 1 and s >= t)
        tn = sum(1 for s, y in zip(scores, truth) if y == 0 and s < t)
        pos = sum(truth)
        neg = len(truth) - pos
        pts.append((t, tp / pos, tn / neg))
    return pts


def window_origins_oracle(dim, size, stride):
    out = []
    o = 0
    while o + size <= dim:
        out.append(o)
        o += stride
    if out[-1] + size != dim:
        out.append(dim - size)
    return out


def finite_difference(f, x, idx, h=1e-6):
    old = x[idx]
    x[idx] = old + h
    fp = f()
    x[idx] = old - h
    fm = f()
    x[idx] = old
    return (fp - fm) / (2 * h)


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)
