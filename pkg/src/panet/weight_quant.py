"""Piecewise approximation of a weight tensor.

Endpoints are fixed multiples of ``std(W)``. The real line is split into
M non-zero pieces plus a central dead zone that maps to 0; every piece is
replaced by the mean of the weights that fall into it. Intervals are
lower-closed and upper-open, so each value lands in exactly one piece.

Piece ids used here are 0-based: ``0 .. M/2-1`` are the negative pieces,
``DEAD`` (= -1) is the dead zone and ``M/2 .. M-1`` are the positive pieces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bitops import BitPlane, pack
from .tensor import DTYPE, bucketize, std_dev

DEAD = -1
SIGMA_EPS = 1e-8

M8_MULTIPLIERS = (-1.5, -1.0, -0.5, -0.25, 0.25, 0.5, 1.0, 1.5)


def default_multipliers(M: int) -> tuple[float, ...]:
    """Endpoint multipliers of ``std(W)`` for ``M`` pieces.

    ``M = 8`` uses the recommended table. Other sizes place ``M/2`` points per
    side evenly on ``[0.25, 2.0)``, so the innermost pair sits at +-0.25.
    """
    if M < 2 or M % 2:
        raise ValueError(f"M must be an even integer >= 2, got {M}")
    if M == 8:
        return M8_MULTIPLIERS
    pos = np.linspace(0.25, 2.0, M // 2 + 1)[:-1]
    return tuple(float(x) for x in np.concatenate([-pos[::-1], pos]))


@dataclass(frozen=True)
class WeightQuantizerConfig:
    M: int = 8
    lambda_W: float = 1.0
    endpoint_multipliers: tuple = None

    def __post_init__(self):
        if self.M < 2 or self.M % 2:
            raise ValueError(f"M must be an even integer >= 2, got {self.M}")
        if not self.lambda_W > 0:
            raise ValueError("lambda_W must be positive")
        mult = self.endpoint_multipliers
        if mult is None:
            mult = default_multipliers(self.M)
        mult = tuple(float(m) for m in mult)
        if len(mult) != self.M:
            raise ValueError(f"need {self.M} endpoint multipliers, got {len(mult)}")
        if any(b <= a for a, b in zip(mult, mult[1:])):
            raise ValueError("endpoint multipliers must be strictly ascending")
        if any(mult[i] != -mult[self.M - 1 - i] for i in range(self.M)):
            raise ValueError("endpoint multipliers must be antisymmetric about 0")
        object.__setattr__(self, "endpoint_multipliers", mult)


@dataclass
class FitDiagnostics:
    counts: np.ndarray
    empty_pieces: list = field(default_factory=list)


@dataclass(frozen=True)
class WeightPiecewise:
    """Fitted quantizer for one weight tensor.

    ``u`` holds the M endpoints, ``s`` the M-1 backward endpoints and
    ``alpha`` the M piece coefficients (dead zone excluded).
    """

    u: np.ndarray
    alpha: np.ndarray
    sigma: float = 1.0

    @property
    def M(self) -> int:
        return len(self.u)

    @property
    def s(self) -> np.ndarray:
        return backward_endpoints(self.u)


def weight_endpoints(config: WeightQuantizerConfig, sigma: float) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    scale = max(float(sigma), SIGMA_EPS)
    return np.array([m * scale for m in config.endpoint_multipliers], dtype=DTYPE)


def backward_endpoints(u) -> np.ndarray:
    u = np.asarray(u, dtype=DTYPE)
    return (u[1:] + u[:-1]) / DTYPE(2.0)


def piece_indices(w, u) -> np.ndarray:
    """Vectorized piece id for every element of ``w`` (``DEAD`` for the dead zone)."""
    u = np.asarray(u, dtype=DTYPE)
    half = len(u) // 2
    k = bucketize(w, u)
    # k counts endpoints <= w: k < half is negative piece k, k == half is the
    # dead zone, k > half is positive piece k - 1.
    return np.where(k < half, k, np.where(k == half, DEAD, k - 1))


def piece_index(w: float, u) -> int:
    """Piece id of a single scalar."""
    return int(piece_indices(np.array([w]), u)[0])


def piece_bounds(i: int, u, sigma: float) -> tuple[float, float]:
    """Closed-open interval covered by piece ``i``; unbounded pieces get +-inf."""
    M = len(u)
    half = M // 2
    if i == DEAD:
        return float(u[half - 1]), float(u[half])
    if i == 0:
        return -np.inf, float(u[0])
    if i == M - 1:
        return float(u[-1]), np.inf
    if i < half:
        return float(u[i - 1]), float(u[i])
    return float(u[i]), float(u[i + 1])


def _empty_fallback(i: int, u, sigma: float) -> float:
    M = len(u)
    scale = max(float(sigma), SIGMA_EPS)
    if i == 0:
        return float(u[0] - scale / 2)
    if i == M - 1:
        return float(u[-1] + scale / 2)
    lo, hi = piece_bounds(i, u, sigma)
    return (lo + hi) / 2


def fit_scaling_coefficients(W, u, sigma: float | None = None) -> tuple[np.ndarray, FitDiagnostics]:
    """Piece means of ``W`` under endpoints ``u``.

    Empty pieces fall back to the midpoint of their interval; the two
    unbounded pieces use the outer endpoint -+ sigma/2. The fallbacks are
    listed in the returned diagnostics.
    """
    w = np.asarray(W).ravel()
    u = np.asarray(u, dtype=DTYPE)
    M = len(u)
    if sigma is None:
        sigma = std_dev(w) if w.size else 0.0
    idx = piece_indices(w, u)
    sel = idx != DEAD
    counts = np.bincount(idx[sel], minlength=M)
    sums = np.bincount(idx[sel], weights=w[sel], minlength=M)
    alpha = np.empty(M, dtype=np.float64)
    empty = []
    for i in range(M):
        if counts[i]:
            alpha[i] = sums[i] / counts[i]
        else:
            alpha[i] = _empty_fallback(i, u, sigma)
            empty.append(i)
    return alpha.astype(DTYPE), FitDiagnostics(counts=counts, empty_pieces=empty)


def fit_weight_piecewise(W, config: WeightQuantizerConfig) -> tuple[WeightPiecewise, FitDiagnostics]:
    """Endpoints from ``std(W)`` followed by piece-mean coefficients."""
    w = np.asarray(W)
    sigma = std_dev(w)
    u = weight_endpoints(config, sigma)
    alpha, diag = fit_scaling_coefficients(w, u, sigma)
    return WeightPiecewise(u=u, alpha=alpha, sigma=sigma), diag


def _level_table(alpha) -> np.ndarray:
    """Coefficient per piece id, with the dead zone appended last so that
    indexing by ``DEAD`` (-1) yields 0."""
    return np.concatenate([np.asarray(alpha, dtype=DTYPE), np.zeros(1, dtype=DTYPE)])


def quantize_weights_forward(W, wp: WeightPiecewise) -> np.ndarray:
    w = np.asarray(W)
    idx = piece_indices(w, wp.u)
    return _level_table(wp.alpha)[idx].reshape(w.shape)


def weight_slopes(wp: WeightPiecewise, lambda_W: float) -> np.ndarray:
    """Backward slope for each of the M intervals delimited by ``s``.

    Interval k straddles endpoint ``u_k`` and carries the jump of the forward
    staircase there, with the dead-zone level taken as 0.
    """
    M = wp.M
    half = M // 2
    a = np.asarray(wp.alpha, dtype=np.float64)
    levels = np.concatenate([a[:half], [0.0], a[half:]])
    return lambda_W * np.diff(levels)


def weight_backward(grad_out, W, wp: WeightPiecewise, lambda_W: float) -> np.ndarray:
    """Straight-through gradient with a piecewise-constant slope."""
    g = np.asarray(grad_out)
    w = np.asarray(W)
    if g.shape != w.shape:
        raise ValueError(f"grad shape {g.shape} != weight shape {w.shape}")
    k = bucketize(w, wp.s)
    slope = weight_slopes(wp, lambda_W).astype(DTYPE)[k]
    return (g * slope).astype(DTYPE, copy=False)


def decompose_weight_bases(W, u) -> list[BitPlane]:
    """One {0,1} plane per non-zero piece; the dead zone is in none of them."""
    w = np.asarray(W)
    idx = piece_indices(w, u)
    return [pack(idx == i) for i in range(len(u))]
