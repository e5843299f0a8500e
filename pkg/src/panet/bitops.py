"""Bit-packed planes and AND/XNOR popcount convolution.

A :class:`BitPlane` stores a {0,1} mask in little-endian 64-bit words:
bit ``j`` of word ``k`` holds element ``64*k + j``. Bits past ``len`` are
always zero, which lets AND-based dot products ignore padding for free.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE, conv_output_size

WORD_BITS = 64
_WORD = np.dtype("<u8")


def _n_words(n: int) -> int:
    return (n + WORD_BITS - 1) // WORD_BITS


def _pack_rows(bits: np.ndarray) -> np.ndarray:
    """Pack the last axis of a boolean array into little-endian uint64 words."""
    n = bits.shape[-1]
    nw = _n_words(n)
    extra = nw * WORD_BITS - n
    if extra:
        pad = [(0, 0)] * (bits.ndim - 1) + [(0, extra)]
        bits = np.pad(bits, pad)
    packed = np.packbits(bits.astype(bool, copy=False), axis=-1, bitorder="little")
    return np.ascontiguousarray(packed).view(_WORD)


@dataclass(frozen=True)
class BitPlane:
    """Immutable packed {0,1} mask, optionally carrying a tensor shape."""

    len: int
    words: np.ndarray
    shape: tuple = field(default=())

    def __post_init__(self):
        words = np.ascontiguousarray(self.words, dtype=_WORD)
        if words.shape != (_n_words(self.len),):
            raise ValueError(f"expected {_n_words(self.len)} words for {self.len} bits, got {words.shape}")
        tail = self.len % WORD_BITS
        if tail and words[-1] >> np.uint64(tail):
            words = words.copy()
            words[-1] &= np.uint64((1 << tail) - 1)
        words.setflags(write=False)
        object.__setattr__(self, "words", words)
        shape = tuple(int(s) for s in self.shape) if self.shape else (self.len,)
        if int(np.prod(shape)) != self.len:
            raise ValueError(f"shape {shape} does not hold {self.len} elements")
        object.__setattr__(self, "shape", shape)

    def popcount(self) -> int:
        return int(np.bitwise_count(self.words).sum())

    def to_array(self) -> np.ndarray:
        """Unpack into a boolean array of ``self.shape``."""
        return unpack(self).reshape(self.shape)

    def __eq__(self, other):
        if not isinstance(other, BitPlane):
            return NotImplemented
        return self.len == other.len and self.shape == other.shape and np.array_equal(self.words, other.words)

    __hash__ = None


def pack(mask) -> BitPlane:
    m = np.asarray(mask, dtype=bool)
    flat = m.ravel()
    return BitPlane(flat.size, _pack_rows(flat), m.shape if m.ndim > 1 else ())


def unpack(p: BitPlane) -> np.ndarray:
    """Flat boolean array of length ``p.len``."""
    if p.len == 0:
        return np.zeros(0, dtype=bool)
    bits = np.unpackbits(p.words.view(np.uint8), bitorder="little", count=p.len)
    return bits.astype(bool)


def dot_and_popcount(x: BitPlane, y: BitPlane) -> int:
    """Dot product of two {0,1} vectors as ``popcount(x AND y)``."""
    if x.len != y.len:
        raise ValueError(f"length mismatch: {x.len} vs {y.len}")
    return int(np.bitwise_count(x.words & y.words).sum())


def dot_xnor_popcount(x: BitPlane, y: BitPlane) -> int:
    """Dot product of two {-1,+1} vectors (bit 1 means +1).

    Uses ``2 * popcount(XNOR(x, y)) - len``; pad bits are masked out of the
    XNOR count since XNOR of two zero pad bits is 1.
    """
    if x.len != y.len:
        raise ValueError(f"length mismatch: {x.len} vs {y.len}")
    if x.len == 0:
        return 0
    agree = ~(x.words ^ y.words)
    tail = x.len % WORD_BITS
    if tail:
        agree = agree.copy()
        agree[-1] &= np.uint64((1 << tail) - 1)
    return 2 * int(np.bitwise_count(agree).sum()) - x.len


@dataclass(frozen=True)
class MergedCoefficients:
    """phi[(i-1)*N + (j-1)] = alpha[i] * beta[j]."""

    phi: np.ndarray
    M: int
    N: int


def merge_coefficients(alpha, beta) -> MergedCoefficients:
    a = np.asarray(alpha, dtype=np.float64).ravel()
    b = np.asarray(beta, dtype=np.float64).ravel()
    return MergedCoefficients(np.outer(a, b).ravel(), a.size, b.size)


def _weight_rows(t: BitPlane) -> tuple[np.ndarray, tuple]:
    if len(t.shape) != 4:
        raise ValueError(f"weight plane needs (Cout, Cin, Kh, Kw) shape, got {t.shape}")
    bits = t.to_array()
    return _pack_rows(bits.reshape(t.shape[0], -1)), t.shape


def _activation_rows(v: BitPlane, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """im2row on a bit plane, re-packed so each window is its own word row."""
    bits = v.to_array()
    n, c, h, w = v.shape
    if pad:
        bits = np.pad(bits, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(bits, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    rows = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return _pack_rows(rows)


def binary_count_conv(wrows: np.ndarray, arows: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Integer AND+popcount products of every activation row with every weight row.

    Returns an int64 array of shape ``(n_act_rows, n_weight_rows)``.
    """
    out = np.empty((arows.shape[0], wrows.shape[0]), dtype=np.int64)
    step = max(1, chunk // max(1, wrows.shape[0]))
    for s in range(0, arows.shape[0], step):
        block = arows[s:s + step, None, :] & wrows[None, :, :]
        out[s:s + step] = np.bitwise_count(block).sum(axis=-1, dtype=np.int64)
    return out


def _thread_count() -> int:
    env = os.environ.get("PA_THREADS")
    if env:
        return max(1, int(env))
    return 1


def binary_conv2d(T, V, phi: MergedCoefficients, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Sum of ``phi_ij * BinConv(T_i, V_j)`` over all M*N plane pairs.

    Args:
        T: M weight planes, each shaped ``(Cout, Cin, Kh, Kw)``.
        V: N activation planes, each shaped ``(Nb, Cin, H, W)``.
        phi: merged coefficients from :func:`merge_coefficients`.

    The M*N integer convolutions may run on ``PA_THREADS`` workers; the
    weighted sum is always reduced in ascending ``k`` order in float64.
    """
    T, V = list(T), list(V)
    if len(T) != phi.M or len(V) != phi.N:
        raise ValueError(f"phi is {phi.M}x{phi.N} but got {len(T)} weight and {len(V)} activation planes")
    if not T or not V:
        raise ValueError("need at least one weight and one activation plane")
    wshape = T[0].shape
    ashape = V[0].shape
    if any(t.shape != wshape for t in T) or any(v.shape != ashape for v in V):
        raise ValueError("all planes of one operand must share a shape")
    if len(ashape) != 4:
        raise ValueError(f"activation plane needs (N, C, H, W) shape, got {ashape}")
    if len(wshape) != 4 or wshape[1] != ashape[1]:
        raise ValueError(f"geometry mismatch: weights {wshape}, activations {ashape}")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    cout, _, kh, kw = wshape
    nb, _, h, w = ashape
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {wshape[2:]} larger than padded input {ashape[2:]}")

    wrows = [_weight_rows(t)[0] for t in T]
    arows = [_activation_rows(v, kh, kw, stride, pad) for v in V]
    pairs = [(i, j) for i in range(phi.M) for j in range(phi.N)]

    def run(pair):
        i, j = pair
        return binary_count_conv(wrows[i], arows[j])

    workers = _thread_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            counts = list(pool.map(run, pairs))
    else:
        counts = [run(p) for p in pairs]

    acc = np.zeros((nb * ho * wo, cout), dtype=np.float64)
    for k, c in enumerate(counts):
        acc += phi.phi[k] * c
    out = acc.reshape(nb, ho, wo, cout).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out, dtype=DTYPE)
