"""Hot loops of the convolution machinery: im2col and col2im.

Two interchangeable implementations exist. The numba path is used when
numba imports and ``QGAN_NUMBA`` is not set to ``0``; otherwise the pure
numpy path runs. Both produce bitwise-identical results: im2col is a pure
gather, and col2im accumulates taps in the same (row, col) order.

Column layout is ``(N * OH * OW, C * KH * KW)`` with the patch index
running fastest over (C, KH, KW), so a weight of shape ``(O, C, KH, KW)``
reshaped to ``(O, -1)`` multiplies it directly.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

_WANT_NUMBA = os.environ.get("QGAN_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")
HAVE_NUMBA = numba is not None
BACKEND = "numba" if (HAVE_NUMBA and _WANT_NUMBA) else "numpy"


def out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------------------
# numpy path


def im2col_numpy(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh = out_size(h, kh, stride, pad)
    ow = out_size(w, kw, stride, pad)
    if pad:
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    cols = np.empty((n, oh, ow, c, kh, kw), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
            cols[:, :, :, :, i, j] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(n * oh * ow, c * kh * kw)


def col2im_numpy(cols, shape, kh, kw, stride, pad):
    n, c, h, w = shape
    oh = out_size(h, kh, stride, pad)
    ow = out_size(w, kw, stride, pad)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    c6 = cols.reshape(n, oh, ow, c, kh, kw)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += c6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w])


# ---------------------------------------------------------------------------
# numba path

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _im2col_jit(x, kh, kw, stride, pad, oh, ow):
        n, c, h, w = x.shape
        cols = np.zeros((n, oh, ow, c, kh, kw), dtype=x.dtype)
        for b in range(n):
            for y in range(oh):
                for xo in range(ow):
                    for ch in range(c):
                        for i in range(kh):
                            r = y * stride + i - pad
                            if r < 0 or r >= h:
                                continue
                            for j in range(kw):
                                q = xo * stride + j - pad
                                if q < 0 or q >= w:
                                    continue
                                cols[b, y, xo, ch, i, j] = x[b, ch, r, q]
        return cols

    @numba.njit(cache=True)
    def _col2im_jit(c6, n, c, h, w, kh, kw, stride, pad, oh, ow):
        hp = h + 2 * pad
        wp = w + 2 * pad
        xp = np.zeros((n, c, hp, wp), dtype=c6.dtype)
        # tap-major accumulation keeps the summation order of the numpy path
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        for y in range(oh):
                            r = y * stride + i
                            for xo in range(ow):
                                xp[b, ch, r, xo * stride + j] += c6[b, y, xo, ch, i, j]
        out = np.empty((n, c, h, w), dtype=c6.dtype)
        for b in range(n):
            for ch in range(c):
                for r in range(h):
                    for q in range(w):
                        out[b, ch, r, q] = xp[b, ch, r + pad, q + pad]
        return out


def im2col_numba(x, kh, kw, stride, pad):
    if not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    n, c, h, w = x.shape
    oh = out_size(h, kh, stride, pad)
    ow = out_size(w, kw, stride, pad)
    cols = _im2col_jit(np.ascontiguousarray(x), kh, kw, stride, pad, oh, ow)
    return cols.reshape(n * oh * ow, c * kh * kw)


def col2im_numba(cols, shape, kh, kw, stride, pad):
    if not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    n, c, h, w = shape
    oh = out_size(h, kh, stride, pad)
    ow = out_size(w, kw, stride, pad)
    c6 = np.ascontiguousarray(cols).reshape(n, oh, ow, c, kh, kw)
    return _col2im_jit(c6, n, c, h, w, kh, kw, stride, pad, oh, ow)


if BACKEND == "numba":
    im2col = im2col_numba
    col2im = col2im_numba
else:
    im2col = im2col_numpy
    col2im = col2im_numpy
