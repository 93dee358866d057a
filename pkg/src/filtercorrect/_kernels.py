"""Hot loops: im2col/col2im, max pooling and replicate-padded 2-D correlation.

Each kernel exists twice: a numba ``@njit`` version and a pure-numpy version.
The module-level names (``col2im``, ``maxpool_forward``, ...) point at the numba
versions unless ``FILTERCORRECT_PURE_NUMPY=1`` is set in the environment or numba fails
to import. Both variants are always importable so they can be benchmarked and
cross-checked against each other.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import as_strided

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

PURE_NUMPY = os.environ.get("FILTERCORRECT_PURE_NUMPY", "0").lower() in ("1", "true", "yes")
USE_NUMBA = HAVE_NUMBA and not PURE_NUMPY


def out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def im2col_numpy(x, kh, kw, sh, sw, ph, pw):
    """Unfold ``x`` (B, C, H, W) into columns of shape (C*kh*kw, B*Ho*Wo)."""
    B, C, H, W = x.shape
    Ho, Wo = out_size(H, kh, sh, ph), out_size(W, kw, sw, pw)
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    x = np.ascontiguousarray(x)
    sb, sc, shh, sww = x.strides
    win = as_strided(
        x,
        shape=(C, kh, kw, B, Ho, Wo),
        strides=(sc, shh, sww, sb, shh * sh, sww * sw),
        writeable=False,
    )
    return win.reshape(C * kh * kw, B * Ho * Wo)


def col2im_numpy(cols, x_shape, kh, kw, sh, sw, ph, pw):
    """Adjoint of :func:`im2col_numpy`: scatter-add columns back to (B, C, H, W)."""
    B, C, H, W = x_shape
    Ho, Wo = out_size(H, kh, sh, ph), out_size(W, kw, sw, pw)
    dxp = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=cols.dtype)
    c6 = cols.reshape(C, kh, kw, B, Ho, Wo)
    for a in range(kh):
        for b in range(kw):
            dxp[:, :, a : a + sh * Ho : sh, b : b + sw * Wo : sw] += c6[:, a, b].transpose(1, 0, 2, 3)
    return dxp[:, :, ph : ph + H, pw : pw + W]


def maxpool_forward_numpy(x, k, s):
    B, C, H, W = x.shape
    Ho, Wo = out_size(H, k, s, 0), out_size(W, k, s, 0)
    x = np.ascontiguousarray(x)
    sb, sc, shh, sww = x.strides
    win = as_strided(x, shape=(B, C, Ho, Wo, k, k), strides=(sb, sc, shh * s, sww * s, shh, sww))
    win = win.reshape(B, C, Ho, Wo, k * k)
    arg = win.argmax(axis=-1).astype(np.int32)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, arg


def maxpool_backward_numpy(dout, arg, x_shape, k, s):
    B, C, H, W = x_shape
    Ho, Wo = dout.shape[2], dout.shape[3]
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for a in range(k):
        for b in range(k):
            m = arg == a * k + b
            dx[:, :, a : a + s * Ho : s, b : b + s * Wo : s] += np.where(m, dout, 0)
    return dx


def correlate_replicate_numpy(img, kernel):
    """Correlate each (..., H, W) plane with ``kernel``, replicating edge pixels."""
    kh, kw = kernel.shape
    rh, rw = kh // 2, kw // 2
    pad = [(0, 0)] * (img.ndim - 2) + [(rh, rh), (rw, rw)]
    xp = np.pad(img, pad, mode="edge")
    H, W = img.shape[-2:]
    out = np.zeros(img.shape, dtype=np.float64)
    for a in range(kh):
        for b in range(kw):
            w = kernel[a, b]
            if w != 0.0:
                out += w * xp[..., a : a + H, b : b + W]
    return out


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _valid_cols(Wo, off, sw, W):
        # output columns j with 0 <= j*sw + off < W
        jlo = 0
        while jlo < Wo and jlo * sw + off < 0:
            jlo += 1
        jhi = Wo
        while jhi > jlo and (jhi - 1) * sw + off >= W:
            jhi -= 1
        return jlo, jhi

    @numba.njit(cache=True)
    def _im2col_nb(x, kh, kw, sh, sw, ph, pw, Ho, Wo):
        B, C, H, W = x.shape
        xf = x.ravel()
        L = B * Ho * Wo
        cols = np.empty(C * kh * kw * L, dtype=x.dtype)
        for c in range(C):
            for a in range(kh):
                for b in range(kw):
                    row = ((c * kh + a) * kw + b) * L
                    off = b - pw
                    jlo, jhi = _valid_cols(Wo, off, sw, W)
                    for bi in range(B):
                        xb = (bi * C + c) * H * W
                        for i in range(Ho):
                            y = i * sh + a - ph
                            dst = row + (bi * Ho + i) * Wo
                            if y < 0 or y >= H:
                                for j in range(Wo):
                                    cols[dst + j] = 0
                                continue
                            src = xb + y * W + off
                            for j in range(jlo):
                                cols[dst + j] = 0
                            for j in range(jlo, jhi):
                                cols[dst + j] = xf[src + j * sw]
                            for j in range(jhi, Wo):
                                cols[dst + j] = 0
        return cols.reshape(C * kh * kw, L)

    @numba.njit(cache=True)
    def _col2im_nb(cols, B, C, H, W, kh, kw, sh, sw, ph, pw, Ho, Wo):
        dx = np.zeros(B * C * H * W, dtype=cols.dtype)
        cf = cols.ravel()
        L = B * Ho * Wo
        for c in range(C):
            for a in range(kh):
                for b in range(kw):
                    row = ((c * kh + a) * kw + b) * L
                    off = b - pw
                    jlo, jhi = _valid_cols(Wo, off, sw, W)
                    for bi in range(B):
                        xb = (bi * C + c) * H * W
                        for i in range(Ho):
                            y = i * sh + a - ph
                            if y < 0 or y >= H:
                                continue
                            src = row + (bi * Ho + i) * Wo
                            dst = xb + y * W + off
                            for j in range(jlo, jhi):
                                dx[dst + j * sw] += cf[src + j]
        return dx.reshape(B, C, H, W)

    @numba.njit(cache=True)
    def _maxpool_fwd_nb(x, k, s, Ho, Wo):
        B, C, H, W = x.shape
        out = np.empty((B, C, Ho, Wo), dtype=x.dtype)
        arg = np.empty((B, C, Ho, Wo), dtype=np.int32)
        for bi in range(B):
            for c in range(C):
                for i in range(Ho):
                    for j in range(Wo):
                        best = x[bi, c, i * s, j * s]
                        bidx = 0
                        for a in range(k):
                            for b in range(k):
                                v = x[bi, c, i * s + a, j * s + b]
                                if v > best:
                                    best = v
                                    bidx = a * k + b
                        out[bi, c, i, j] = best
                        arg[bi, c, i, j] = bidx
        return out, arg

    @numba.njit(cache=True)
    def _maxpool_bwd_nb(dout, arg, H, W, k, s):
        B, C, Ho, Wo = dout.shape
        dx = np.zeros((B, C, H, W), dtype=dout.dtype)
        for bi in range(B):
            for c in range(C):
                for i in range(Ho):
                    for j in range(Wo):
                        t = arg[bi, c, i, j]
                        dx[bi, c, i * s + t // k, j * s + t % k] += dout[bi, c, i, j]
        return dx

    @numba.njit(cache=True)
    def _correlate_replicate_nb(planes, kernel):
        P, H, W = planes.shape
        kh, kw = kernel.shape
        rh, rw = kh // 2, kw // 2
        out = np.zeros((P, H, W), dtype=np.float64)
        for p in range(P):
            for i in range(H):
                for j in range(W):
                    acc = 0.0
                    for a in range(kh):
                        y = min(max(i + a - rh, 0), H - 1)
                        for b in range(kw):
                            xx = min(max(j + b - rw, 0), W - 1)
                            acc += kernel[a, b] * planes[p, y, xx]
                    out[p, i, j] = acc
        return out


def im2col_numba(x, kh, kw, sh, sw, ph, pw):
    B, C, H, W = x.shape
    return _im2col_nb(x, kh, kw, sh, sw, ph, pw, out_size(H, kh, sh, ph), out_size(W, kw, sw, pw))


def col2im_numba(cols, x_shape, kh, kw, sh, sw, ph, pw):
    B, C, H, W = x_shape
    Ho, Wo = out_size(H, kh, sh, ph), out_size(W, kw, sw, pw)
    return _col2im_nb(np.ascontiguousarray(cols), B, C, H, W, kh, kw, sh, sw, ph, pw, Ho, Wo)


def maxpool_forward_numba(x, k, s):
    B, C, H, W = x.shape
    return _maxpool_fwd_nb(x, k, s, out_size(H, k, s, 0), out_size(W, k, s, 0))


def maxpool_backward_numba(dout, arg, x_shape, k, s):
    return _maxpool_bwd_nb(np.ascontiguousarray(dout), arg, x_shape[2], x_shape[3], k, s)


def correlate_replicate_numba(img, kernel):
    img = np.asarray(img, dtype=np.float64)
    planes = np.ascontiguousarray(img.reshape((-1,) + img.shape[-2:]))
    out = _correlate_replicate_nb(planes, np.ascontiguousarray(kernel, dtype=np.float64))
    return out.reshape(img.shape)


# im2col stays on the numpy strided copy in both modes: it is a pure gather that
# numpy already runs at memcpy speed (see benchmarks/bench_kernels.py).
im2col = im2col_numpy

if USE_NUMBA:
    col2im = col2im_numba
    maxpool_forward = maxpool_forward_numba
    maxpool_backward = maxpool_backward_numba
    correlate_replicate = correlate_replicate_numba
else:
    col2im = col2im_numpy
    maxpool_forward = maxpool_forward_numpy
    maxpool_backward = maxpool_backward_numpy
    correlate_replicate = correlate_replicate_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
