"""Reference quantizers used as comparison baselines.

Sign binarization with a straight-through gradient, threshold ternarization,
DoReFa-style fixed point, and a least-squares linear combination of
{-1,+1} bases.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bitops import BitPlane, pack, unpack
from .tensor import DTYPE


def binarize_sign(x) -> np.ndarray:
    """+1 where ``x >= 0``, else -1."""
    return np.where(np.asarray(x) >= 0, 1.0, -1.0).astype(DTYPE)


def binarize_sign_backward(grad_out) -> np.ndarray:
    return np.array(grad_out, dtype=DTYPE, copy=True)


@dataclass(frozen=True)
class TernaryParams:
    delta: float
    x_pos: float
    x_neg: float


def ternarize(x, delta: float) -> tuple[np.ndarray, TernaryParams]:
    """Map to ``{x_pos, 0, -x_neg}`` around the threshold ``delta``.

    ``x_pos`` is the mean of values above ``delta``; ``x_neg`` the mean
    magnitude of values below ``-delta``. An empty side gets 0.
    """
    if delta < 0:
        raise ValueError("delta must be non-negative")
    a = np.asarray(x, dtype=np.float64)
    pos = a > delta
    neg = a < -delta
    x_pos = float(a[pos].mean()) if pos.any() else 0.0
    x_neg = float(np.abs(a[neg]).mean()) if neg.any() else 0.0
    out = np.where(pos, x_pos, np.where(neg, -x_neg, 0.0))
    return out.astype(DTYPE), TernaryParams(float(delta), x_pos, x_neg)


def round_half_away(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_fixed_point(x, f: int) -> np.ndarray:
    """DoReFa weight quantizer onto ``2^f`` levels in ``[-1, 1]``."""
    if f < 1:
        raise ValueError("bit-width must be >= 1")
    th = np.tanh(np.asarray(x, dtype=np.float64))
    peak = np.abs(th).max() if th.size else 0.0
    if peak == 0:
        return np.zeros(th.shape, dtype=DTYPE)
    y = th / (2 * peak) + 0.5
    levels = 2**f - 1
    q = round_half_away(y * levels) / levels
    return (2 * q - 1).astype(DTYPE)


@dataclass(frozen=True)
class LinearCombination:
    """``x ~ sum_i epsilon[i] * D_i`` with ``D_i`` in {-1,+1} (bit 1 means +1)."""

    epsilon: np.ndarray
    bases: tuple

    @property
    def P(self) -> int:
        return len(self.bases)

    def base_values(self, i: int) -> np.ndarray:
        b = self.bases[i]
        return np.where(unpack(b), 1.0, -1.0).reshape(b.shape)

    def reconstruct(self) -> np.ndarray:
        out = np.zeros(self.bases[0].shape, dtype=np.float64)
        for i, e in enumerate(self.epsilon):
            out += e * self.base_values(i)
        return out.astype(DTYPE)


def fit_linear_combination(x, P: int, ridge: float = 1e-8) -> LinearCombination:
    """Shifted-sign bases with least-squares coefficients.

    ``D_i = sign(x - mean(x) + u_i * std(x))`` for ``u_i`` evenly spaced on
    ``[-1, 1]`` (``u = 0`` when ``P = 1``); the coefficients solve the ridge-
    regularized normal equations.
    """
    if P < 1:
        raise ValueError("P must be >= 1")
    a = np.asarray(x, dtype=np.float64)
    flat = a.ravel()
    shifts = np.linspace(-1.0, 1.0, P) if P > 1 else np.zeros(1)
    mu, sd = flat.mean(), flat.std()
    D = np.stack([np.where(flat - mu + s * sd >= 0, 1.0, -1.0) for s in shifts], axis=1)
    gram = D.T @ D + ridge * np.eye(P)
    eps = np.linalg.solve(gram, D.T @ flat)
    bases = tuple(pack((D[:, i] > 0).reshape(a.shape)) for i in range(P))
    return LinearCombination(eps, bases)
