"""Piecewise approximation of activations with trainable endpoints.

Values below ``v[0]`` map to 0, values in ``[v[i], v[i+1])`` map to
``beta[i]`` and values ``>= v[-1]`` map to ``beta[-1]``. Both ``v`` and
``beta`` are learned. The backward pass replaces each jump of the staircase
by a constant slope over a window delimited by the backward endpoints ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bitops import BitPlane, pack
from .tensor import DTYPE, bucketize

MIN_GAP = 1e-4
FALLBACK_RANGE = (0.1, 2.0)


def backward_endpoints(v, lambda_delta: float) -> np.ndarray:
    """``t_0 .. t_N`` for endpoints ``v``.

    Interior points are midpoints of consecutive endpoints, ``t_N`` sits
    ``lambda_delta`` above the last endpoint and ``t_0`` mirrors ``t_1``
    about ``v_1``.
    """
    v = np.asarray(v, dtype=DTYPE)
    n = len(v)
    t = np.empty(n + 1, dtype=DTYPE)
    t[1:n] = (v[:-1] + v[1:]) / DTYPE(2.0)
    t[n] = v[-1] + DTYPE(lambda_delta)
    t[0] = DTYPE(2.0) * v[0] - t[1]
    return t


def project_endpoints(v, min_gap: float = MIN_GAP) -> np.ndarray:
    """Ascending sweep that pushes each endpoint at least ``min_gap`` above its predecessor."""
    v = np.array(v, dtype=DTYPE)
    gap = DTYPE(min_gap)
    for i in range(1, len(v)):
        if v[i] < v[i - 1] + gap:
            v[i] = v[i - 1] + gap
    return v


@dataclass
class ActivationQuantizerState:
    v: np.ndarray
    beta: np.ndarray
    lambda_A: float = 1.0
    lambda_delta: float = 0.5

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=DTYPE).ravel()
        self.beta = np.asarray(self.beta, dtype=DTYPE).ravel()
        if self.v.size < 1 or self.v.size != self.beta.size:
            raise ValueError(f"need N >= 1 endpoints and as many coefficients, got {self.v.size} and {self.beta.size}")
        if np.any(np.diff(self.v) <= 0):
            raise ValueError("activation endpoints must be strictly ascending")
        if not (self.lambda_A > 0 and self.lambda_delta > 0):
            raise ValueError("lambda_A and lambda_delta must be positive")

    @property
    def N(self) -> int:
        return self.v.size

    @property
    def t(self) -> np.ndarray:
        return backward_endpoints(self.v, self.lambda_delta)

    def copy(self) -> "ActivationQuantizerState":
        return ActivationQuantizerState(self.v.copy(), self.beta.copy(), self.lambda_A, self.lambda_delta)


def default_lambda_delta(v) -> float:
    v = np.asarray(v, dtype=np.float64)
    if v.size < 2:
        return 0.5
    return 0.5 * float(np.mean(np.diff(v)))


def init_activation_state(sample, N: int, lambda_A: float = 1.0, lambda_delta: float | None = None) -> ActivationQuantizerState:
    """Initial endpoints at quantiles of the positive part of ``sample``.

    ``v_i`` is the ``i/(N+1)`` quantile of the positive values; with ``N`` or
    fewer positives the endpoints fall back to an even grid on ``[0.1, 2.0]``.
    ``beta_i`` starts at the mean of the sample values inside piece ``i``.
    """
    a = np.asarray(sample, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError("calibration sample is empty")
    if N < 1:
        raise ValueError("N must be >= 1")
    pos = a[a > 0]
    if pos.size > N:
        v = np.quantile(pos, np.arange(1, N + 1) / (N + 1))
    else:
        v = np.linspace(*FALLBACK_RANGE, N)
    v = project_endpoints(v).astype(np.float64)
    if lambda_delta is None:
        lambda_delta = default_lambda_delta(v)
    beta = np.empty(N, dtype=np.float64)
    for i in range(N):
        hi = v[i + 1] if i + 1 < N else np.inf
        sel = a[(a >= v[i]) & (a < hi)]
        if sel.size:
            beta[i] = sel.mean()
        elif i + 1 < N:
            beta[i] = (v[i] + v[i + 1]) / 2
        else:
            beta[i] = v[i] + lambda_delta / 2
    return ActivationQuantizerState(v, beta, lambda_A, lambda_delta)


def activation_pieces(A, state: ActivationQuantizerState) -> np.ndarray:
    """Piece id per element: -1 below ``v_1``, else ``0 .. N-1``."""
    return bucketize(A, state.v) - 1


def _levels(state: ActivationQuantizerState) -> np.ndarray:
    # index -1 (zero piece) wraps to the trailing 0
    return np.concatenate([state.beta.astype(DTYPE), np.zeros(1, dtype=DTYPE)])


def quantize_activations_forward(A, state: ActivationQuantizerState) -> np.ndarray:
    a = np.asarray(A)
    return _levels(state)[activation_pieces(a, state)]


def activation_slopes(state: ActivationQuantizerState) -> np.ndarray:
    """Slopes for the N windows ``[t_{k-1}, t_k)``; zero outside ``[t_0, t_N)``."""
    b = np.concatenate([[0.0], state.beta.astype(np.float64)])
    return state.lambda_A * np.diff(b)


def _windows(A, state: ActivationQuantizerState) -> np.ndarray:
    # window id 0 .. N-1 inside [t_0, t_N), -1 below, N above
    return bucketize(A, state.t) - 1


def activation_backward_input(grad_out, A, state: ActivationQuantizerState) -> np.ndarray:
    g = np.asarray(grad_out)
    a = np.asarray(A)
    if g.shape != a.shape:
        raise ValueError(f"grad shape {g.shape} != activation shape {a.shape}")
    table = np.concatenate([activation_slopes(state), [0.0, 0.0]]).astype(DTYPE)
    w = _windows(a, state)
    w = np.where(w < 0, state.N + 1, w)  # below t_0 -> trailing zero slot
    return (g * table[w]).astype(DTYPE, copy=False)


def grad_beta(grad_out, A, state: ActivationQuantizerState) -> np.ndarray:
    """Exact derivative of ``sum(grad_out * forward(A))`` with respect to beta."""
    g = np.asarray(grad_out, dtype=np.float64).ravel()
    idx = activation_pieces(A, state).ravel()
    sel = idx >= 0
    return np.bincount(idx[sel], weights=g[sel], minlength=state.N)


def grad_v(grad_out, A, state: ActivationQuantizerState) -> np.ndarray:
    """Straight-through gradient for the endpoints.

    Raising ``v_k`` moves the jump of height ``beta_k - beta_{k-1}`` to the
    right and so lowers the output; the surrogate is that jump times
    ``lambda_A`` times the gradient summed over window k, with a minus sign.
    """
    g = np.asarray(grad_out, dtype=np.float64).ravel()
    w = _windows(A, state).ravel()
    sel = (w >= 0) & (w < state.N)
    sums = np.bincount(w[sel], weights=g[sel], minlength=state.N)
    return -activation_slopes(state) * sums


def decompose_activation_bases(A, state: ActivationQuantizerState) -> list[BitPlane]:
    idx = activation_pieces(A, state)
    return [pack(idx == i) for i in range(state.N)]
