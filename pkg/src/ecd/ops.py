"""Dense numeric kernels shared by the whole pipeline.

Feature maps are plain numpy arrays of shape (d, H, W): channel-major,
row-major within each channel, float32 unless the caller asks otherwise.
"""
from __future__ import annotations

import numpy as np

from .kernels import correlate_valid_raw


class ShapeError(ValueError):
    """Raised when array shapes violate an operation's contract."""


def l2_normalize_channels(f: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Unit-normalize the channel vector at every spatial position.

    Positions whose norm is below ``eps`` are left as zero vectors so the
    operation never produces NaN.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    norms = np.sqrt(np.sum(f * f, axis=0, keepdims=True))
    safe = np.where(norms < eps, 1.0, norms)
    out = f / safe
    return np.where(norms < eps, np.zeros_like(f), out)


def correlate_valid(reference: np.ndarray, patch: np.ndarray) -> np.ndarray:
    """Valid-mode sliding-window correlation of a patch against a reference map.

    Both inputs are (d, H, W) / (d, h, w); output is (H-h+1, W-w+1) where
    entry (i, j) is the full dot product of the patch with the reference
    window whose top-left corner is (i, j). Stride is 1.
    """
    if reference.ndim != 3 or patch.ndim != 3:
        raise ShapeError("correlate_valid expects (d, H, W) arrays")
    if reference.shape[0] != patch.shape[0]:
        raise ShapeError(
            f"channel mismatch: reference d={reference.shape[0]}, patch d={patch.shape[0]}"
        )
    if patch.shape[1] > reference.shape[1] or patch.shape[2] > reference.shape[2]:
        raise ShapeError(
            f"patch {patch.shape[1:]} exceeds reference extent {reference.shape[1:]}"
        )
    return correlate_valid_raw(reference, patch)


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction for overflow safety."""
    m = np.asarray(m)
    shifted = m - np.max(m, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def conv2d(
    f: np.ndarray,
    kernel: np.ndarray,
    bias: np.ndarray | None = None,
    padding: tuple[int, int] | str = (0, 0),
) -> np.ndarray:
    """2D cross-correlation of a (d, H, W) map with an (out, in, kh, kw) kernel.

    padding="same" keeps the spatial size (odd kernels only).
    """
    if f.ndim != 3 or kernel.ndim != 4:
        raise ShapeError("conv2d expects (d, H, W) input and (o, i, kh, kw) kernel")
    o, i, kh, kw = kernel.shape
    if i != f.shape[0]:
        raise ShapeError(f"channel mismatch: input d={f.shape[0]}, kernel in={i}")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"'same' padding requires odd kernels, got {kh}x{kw}")
        padding = ((kh - 1) // 2, (kw - 1) // 2)
    ph, pw = padding
    cols, oh, ow = _im2col(f, kh, kw, ph, pw)
    out = kernel.reshape(o, -1) @ cols  # (o, oh*ow)
    if bias is not None:
        out = out + bias[:, None]
    return np.ascontiguousarray(out.reshape(o, oh, ow))


def _im2col(f: np.ndarray, kh: int, kw: int, ph: int, pw: int):
    """Unfold (d, H, W) into (d*kh*kw, oh*ow) columns."""
    if ph or pw:
        f = np.pad(f, ((0, 0), (ph, ph), (pw, pw)))
    d, hp, wp = f.shape
    oh, ow = hp - kh + 1, wp - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(f, (kh, kw), axis=(1, 2))
    # (d, oh, ow, kh, kw) -> (d, kh, kw, oh, ow)
    cols = win.transpose(0, 3, 4, 1, 2).reshape(d * kh * kw, oh * ow)
    return cols, oh, ow


def _col2im(cols: np.ndarray, d: int, h: int, w: int, kh: int, kw: int, ph: int, pw: int):
    """Scatter-add inverse of _im2col (used by conv2d backward)."""
    hp, wp = h + 2 * ph, w + 2 * pw
    oh, ow = hp - kh + 1, wp - kw + 1
    out = np.zeros((d, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(d, kh, kw, oh, ow)
    for a in range(kh):
        for b in range(kw):
            out[:, a : a + oh, b : b + ow] += cols[:, a, b]
    return out[:, ph : ph + h, pw : pw + w]


def _im2col_b(f: np.ndarray, kh: int, kw: int, ph: int, pw: int):
    """Batched _im2col: (B, d, H, W) -> (B, d*kh*kw, oh*ow)."""
    if ph or pw:
        f = np.pad(f, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    b, d, hp, wp = f.shape
    oh, ow = hp - kh + 1, wp - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(f, (kh, kw), axis=(2, 3))
    # (b, d, oh, ow, kh, kw) -> (b, d, kh, kw, oh, ow)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, d * kh * kw, oh * ow)
    return cols, oh, ow


def _col2im_b(cols: np.ndarray, d: int, h: int, w: int, kh: int, kw: int, ph: int, pw: int):
    """Batched scatter-add inverse of _im2col_b."""
    b = cols.shape[0]
    hp, wp = h + 2 * ph, w + 2 * pw
    oh, ow = hp - kh + 1, wp - kw + 1
    out = np.zeros((b, d, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(b, d, kh, kw, oh, ow)
    for a in range(kh):
        for bb in range(kw):
            out[:, :, a : a + oh, bb : bb + ow] += cols[:, :, a, bb]
    return out[:, :, ph : ph + h, pw : pw + w]


def bilinear_matrix(size: int, factor: int, dtype=np.float64) -> np.ndarray:
    """Interpolation matrix A with A @ x upsampling a length-`size` axis by
    `factor`, half-pixel centers, no corner alignment (edge-clamped)."""
    out_size = size * factor
    a = np.zeros((out_size, size), dtype=dtype)
    for i in range(out_size):
        src = (i + 0.5) / factor - 0.5
        lo = int(np.floor(src))
        t = src - lo
        lo_c = min(max(lo, 0), size - 1)
        hi_c = min(max(lo + 1, 0), size - 1)
        a[i, lo_c] += 1.0 - t
        a[i, hi_c] += t
    return a


def upsample_bilinear(f: np.ndarray, factor: int) -> np.ndarray:
    """Bilinear upsampling of a (d, H, W) map by an integer factor.

    Half-pixel centers, align-corners disabled.
    """
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return f.copy()
    d, h, w = f.shape
    ah = bilinear_matrix(h, factor, dtype=f.dtype)
    aw = bilinear_matrix(w, factor, dtype=f.dtype)
    # separable: rows then columns
    return np.einsum("ih,dhw,jw->dij", ah, f, aw, optimize=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out
