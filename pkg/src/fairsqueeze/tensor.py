"""Dense array kernels: matmul, 2-D convolution, 2x2 max pooling, and seeded RNG.

Arrays are plain numpy ``ndarray`` values laid out row-major. Activations are
NHWC, convolution kernels are ``[kh, kw, cin, cout]``. Every function here is
pure: inputs are never written to, and outputs keep the floating dtype of the
inputs so that float64 can be used for gradient checks.
"""
from __future__ import annotations

import zlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError

__all__ = [
    "make_rng",
    "matmul",
    "conv2d",
    "conv2d_backward",
    "maxpool2",
    "maxpool2_backward",
    "same_padding",
]


def make_rng(seed: int, *keys: int | str) -> np.random.Generator:
    """Counter-based (Philox) generator for ``seed`` split by ``keys``.

    Identical ``(seed, keys)`` always gives the identical stream; distinct keys
    give independent streams, so each pipeline stage draws reproducibly on its own.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for k in keys:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def same_padding(k: int) -> tuple[int, int]:
    # extra row/column goes after, as in TensorFlow
    total = k - 1
    return total // 2, total - total // 2


def _pad(x: np.ndarray, kh: int, kw: int, padding: str) -> np.ndarray:
    if padding == "valid":
        return x
    if padding != "same":
        raise ValueError(f"unknown padding {padding!r}")
    ph, pw = same_padding(kh), same_padding(kw)
    return np.pad(x, ((0, 0), ph, pw, (0, 0)))


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # (N, Ho, Wo, C, kh, kw) -> (N*Ho*Wo, kh*kw*C) with kh, kw, C ordering
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    n, ho, wo, c = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * c)


def conv2d(x: np.ndarray, kernel: np.ndarray, padding: str = "same") -> np.ndarray:
    """Stride-1 cross-correlation of an NHWC batch with a ``[kh,kw,cin,cout]`` kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: expected NHWC input and 4-D kernel, got {x.shape} and {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if x.shape[3] != cin:
        raise DimensionError(f"conv2d: input has {x.shape[3]} channels, kernel {kernel.shape} expects {cin}")
    xp = _pad(x, kh, kw, padding)
    n, hp, wp, _ = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: kernel {kernel.shape} larger than input {x.shape}")
    cols = _im2col(xp, kh, kw)
    out = cols @ kernel.reshape(kh * kw * cin, cout)
    return out.reshape(n, ho, wo, cout)


def conv2d_backward(
    x: np.ndarray, kernel: np.ndarray, dy: np.ndarray, padding: str = "same"
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients ``(dx, dkernel)`` of :func:`conv2d` given upstream ``dy``."""
    kh, kw, cin, cout = kernel.shape
    xp = _pad(x, kh, kw, padding)
    n, ho, wo, _ = dy.shape
    cols = _im2col(xp, kh, kw)
    dy2 = dy.reshape(n * ho * wo, cout)
    dkernel = (cols.T @ dy2).reshape(kernel.shape)
    dcols = (dy2 @ kernel.reshape(kh * kw * cin, cout).T).reshape(n, ho, wo, kh, kw, cin)
    dxp = np.zeros(xp.shape, dtype=np.result_type(x, dy))
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + ho, j : j + wo, :] += dcols[:, :, :, i, j, :]
    if padding == "same":
        (pt, _), (pl, _) = same_padding(kh), same_padding(kw)
        dxp = dxp[:, pt : pt + x.shape[1], pl : pl + x.shape[2], :]
    return dxp, dkernel


def _pool_windows(x: np.ndarray) -> np.ndarray:
    if x.ndim != 4:
        raise DimensionError(f"maxpool2: expected NHWC input, got {x.shape}")
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    if h2 < 1 or w2 < 1:
        raise DimensionError(f"maxpool2: spatial dims of {x.shape} too small to pool")
    # odd trailing row/column is dropped (floor), e.g. 25 -> 12
    xt = x[:, : 2 * h2, : 2 * w2, :]
    return xt.reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)


def maxpool2(x: np.ndarray) -> np.ndarray:
    """2x2 max pooling with stride 2; odd dimensions are truncated."""
    return _pool_windows(x).max(axis=-1)


def maxpool2_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Route ``dy`` to the first maximal element of each window."""
    win = _pool_windows(x)
    n, h2, w2, c, _ = win.shape
    pick = win.argmax(axis=-1)
    dwin = np.zeros(win.shape, dtype=dy.dtype)
    np.put_along_axis(dwin, pick[..., None], dy[..., None], axis=-1)
    dx = np.zeros(x.shape, dtype=dy.dtype)
    dx[:, : 2 * h2, : 2 * w2, :] = (
        dwin.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)
    )
    return dx
