"""Pure-numpy conv/pool kernels (im2col over BLAS); fallback backend.

Semantics are shared bit-for-bit in structure with the compiled backend:
cross-correlation, zero padding, argmax picks the first maximum in the
window flattened as (dx, dy, dz).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND_NAME = "numpy"


def _out_dim(n: int, k: int, p: int, s: int) -> int:
    return (n + 2 * p - k) // s + 1


def _windows(x: np.ndarray, kshape, stride: int, pad):
    px, py, pz = pad
    if any(pad):
        x = np.pad(x, ((0, 0), (0, 0), (px, px), (py, py), (pz, pz)))
    win = sliding_window_view(x, kshape, axis=(2, 3, 4))
    return win[:, :, ::stride, ::stride, ::stride]


def conv3_forward(x, w, bias, stride, pad):
    win = _windows(x, w.shape[2:], stride, pad)
    y = np.einsum("bcxyzijk,ocijk->boxyz", win, w, optimize=True)
    if bias is not None:
        y += bias.reshape(1, -1, 1, 1, 1)
    return np.ascontiguousarray(y)


def conv3_grad_weight(x, gy, stride, pad, kshape):
    win = _windows(x, kshape[2:], stride, pad)
    return np.ascontiguousarray(
        np.einsum("boxyz,bcxyzijk->ocijk", gy, win, optimize=True)
    )


def conv3_grad_input(gy, w, stride, pad, in_shape):
    B, Ci, X, Y, Z = in_shape
    kx, ky, kz = w.shape[2:]
    px, py, pz = pad
    OX, OY, OZ = gy.shape[2:]
    cols = np.einsum("boxyz,ocijk->bcijkxyz", gy, w, optimize=True)
    gxp = np.zeros((B, Ci, X + 2 * px, Y + 2 * py, Z + 2 * pz), dtype=gy.dtype)
    for i in range(kx):
        for j in range(ky):
            for k in range(kz):
                gxp[:, :,
                    i:i + stride * OX:stride,
                    j:j + stride * OY:stride,
                    k:k + stride * OZ:stride] += cols[:, :, i, j, k]
    return np.ascontiguousarray(gxp[:, :, px:px + X, py:py + Y, pz:pz + Z])


def maxpool3_forward(x):
    B, C, X, Y, Z = x.shape
    ox, oy, oz = X // 2, Y // 2, Z // 2
    r = (x.reshape(B, C, ox, 2, oy, 2, oz, 2)
          .transpose(0, 1, 2, 4, 6, 3, 5, 7)
          .reshape(B, C, ox, oy, oz, 8))
    idx = r.argmax(axis=-1).astype(np.uint8)
    y = np.take_along_axis(r, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def maxpool3_backward(gy, idx, in_shape):
    B, C, X, Y, Z = in_shape
    ox, oy, oz = X // 2, Y // 2, Z // 2
    g8 = np.zeros((B, C, ox, oy, oz, 8), dtype=gy.dtype)
    np.put_along_axis(g8, idx[..., None].astype(np.intp), gy[..., None], axis=-1)
    gx = (g8.reshape(B, C, ox, oy, oz, 2, 2, 2)
            .transpose(0, 1, 2, 5, 3, 6, 4, 7)
            .reshape(B, C, X, Y, Z))
    return np.ascontiguousarray(gx)
