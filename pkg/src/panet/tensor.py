"""Dense tensor helpers and the real-valued reference convolution.

Tensors are plain ``numpy`` arrays of dtype float32. Activations use
``(N, C, H, W)`` layout and convolution weights ``(Cout, Cin, Kh, Kw)``.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float32


class EmptyPieceError(ValueError):
    """Raised when a mask selects no elements."""


def as_tensor(x, *, check_finite: bool = False) -> np.ndarray:
    t = np.ascontiguousarray(x, dtype=DTYPE)
    if check_finite and not np.all(np.isfinite(t)):
        raise ValueError("tensor contains NaN or Inf")
    return t


def bucketize(x, edges) -> np.ndarray:
    """Number of ``edges`` that are ``<= x``, elementwise (edges ascending).

    Equivalent to ``searchsorted(edges, x, side="right")`` but much faster
    for the handful of edges a quantizer uses.
    """
    x = np.asarray(x)
    out = np.zeros(x.shape, dtype=np.int16)
    for e in np.asarray(edges):
        out += x >= e
    return out


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Unfold ``x`` into rows of receptive fields.

    Returns an array of shape ``(N, Ho, Wo, C*kh*kw)`` whose last axis is
    ordered ``(c, i, j)``, matching a flattened ``(Cin, Kh, Kw)`` kernel.
    """
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N, C, Ho, Wo, kh, kw)
    ho, wo = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * kh * kw)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col`; overlapping windows are summed."""
    n, c, h, w = x_shape
    ho, wo = cols.shape[1], cols.shape[2]
    cols = cols.reshape(n, ho, wo, c, kh, kw)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        hi = i + stride * ho
        for j in range(kw):
            wj = j + stride * wo
            out[:, :, i:hi:stride, j:wj:stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


def _check_conv_args(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"expected rank-4 input and weights, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"input has {x.shape[1]} channels but weights expect {w.shape[1]} "
            f"(input {x.shape}, weights {w.shape})"
        )
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")
    if x.shape[2] + 2 * pad < w.shape[2] or x.shape[3] + 2 * pad < w.shape[3]:
        raise ValueError(f"kernel {w.shape[2:]} larger than padded input {x.shape[2:]}")


def conv2d_reference(x, weights, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Zero-padded 2-D cross-correlation.

    Args:
        x: input of shape ``(N, C, H, W)``.
        weights: kernels of shape ``(Cout, C, Kh, Kw)``.
        stride: step between receptive fields.
        pad: zeros added on each spatial border.

    Returns:
        Array of shape ``(N, Cout, Ho, Wo)`` with
        ``Ho = (H + 2*pad - Kh) // stride + 1``.
    """
    x = as_tensor(x)
    w = as_tensor(weights)
    _check_conv_args(x, w, stride, pad)
    cout, _, kh, kw = w.shape
    cols = im2col(x, kh, kw, stride, pad)
    out = cols @ w.reshape(cout, -1).T  # (N, Ho, Wo, Cout)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def std_dev(t) -> float:
    """Population standard deviation over all elements."""
    a = np.asarray(t, dtype=np.float64)
    if a.size == 0:
        raise ValueError("std_dev of an empty tensor")
    return float(np.sqrt(np.mean((a - a.mean()) ** 2)))


def masked_mean(t, mask) -> float:
    """Mean of the elements of ``t`` selected by ``mask``.

    Raises:
        EmptyPieceError: if the mask selects nothing.
    """
    a = np.asarray(t, dtype=np.float64).ravel()
    m = np.asarray(mask, dtype=bool).ravel()
    if a.shape != m.shape:
        raise ValueError(f"mask has {m.size} elements, tensor has {a.size}")
    count = int(m.sum())
    if count == 0:
        raise EmptyPieceError("mask selects no elements")
    return float(a[m].sum() / count)
