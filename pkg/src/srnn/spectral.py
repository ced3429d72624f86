"""Factorized transition ``W = U diag(s) Vᵀ`` with a margin-bounded spectrum,
and the soft regularizers that act on it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIGMOID_MARGIN = "sigmoid"
DIRECT = "direct"
FROZEN = "frozen"
SPECTRUM_MODES = (SIGMOID_MARGIN, DIRECT, FROZEN)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def singular_values(p, m: float) -> np.ndarray:
    """Map free parameters to singular values confined to (1 - m, 1 + m)."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"margin must lie in [0, 1], got {m}")
    return 2.0 * m * (sigmoid(p) - 0.5) + 1.0


def compose(U: np.ndarray, s, V: np.ndarray) -> np.ndarray:
    return (U * np.asarray(s)) @ V.T


def factor_gradients(G_W: np.ndarray, U: np.ndarray, s, V: np.ndarray):
    """Chain rule from ``dL/dW`` to ``(dL/dU, dL/ds, dL/dV)``."""
    s = np.asarray(s)
    G_WV = G_W @ V
    G_U = G_WV * s
    G_s = np.einsum("ij,ij->j", U, G_WV)
    G_V = (G_W.T @ U) * s
    return G_U, G_s, G_V


def spectrum_gradient(G_s, p, m: float) -> np.ndarray:
    """Gradient for the spectrum parameters with the ``2m`` factor divided out.

    The exact derivative is ``2m * sigmoid'(p) * G_s``; dropping ``2m`` keeps
    the effective step size along the spectrum independent of the margin.
    """
    if m <= 0.0:
        raise ValueError("spectrum gradient is undefined for a zero margin")
    sg = sigmoid(p)
    return sg * (1.0 - sg) * np.asarray(G_s)


def soft_orthogonality_penalty(W: np.ndarray, lam: float):
    """``lam * ||WᵀW - I||_F²`` and its gradient with respect to W."""
    R = W.T @ W - np.eye(W.shape[1])
    value = lam * float(np.sum(R * R))
    grad = 4.0 * lam * (W @ R)
    return value, grad


def gaussian_prior(s, gamma: float):
    """Mean-one Gaussian prior on the singular values."""
    d = np.asarray(s, dtype=np.float64) - 1.0
    return gamma * float(np.sum(d * d)), 2.0 * gamma * d


@dataclass
class SpectralPenaltyConfig:
    lambda_orth: float = 0.0
    gamma_prior: float = 0.0

    def __post_init__(self):
        if self.lambda_orth < 0 or self.gamma_prior < 0:
            raise ValueError("penalty strengths must be nonnegative")


@dataclass
class FactorizedTransition:
    """Orthogonal bases ``U``, ``V`` and spectrum parameters ``p``.

    ``mode`` is ``"sigmoid"`` (s confined by ``margin``), ``"direct"``
    (s = p, unconstrained) or ``"frozen"`` (s = 1, p never trained).
    """

    U: np.ndarray
    V: np.ndarray
    p: np.ndarray
    margin: float | None = None
    mode: str = SIGMOID_MARGIN

    def __post_init__(self):
        if self.mode not in SPECTRUM_MODES:
            raise ValueError(f"unknown spectrum mode {self.mode!r}")
        if self.mode == SIGMOID_MARGIN and (self.margin is None or not 0 < self.margin <= 1):
            raise ValueError("sigmoid mode needs a margin in (0, 1]")

    @classmethod
    def from_margin(cls, U, V, margin: float | None):
        """Pick the spectrum mode from a margin: None -> direct, 0 -> frozen."""
        n = U.shape[1]
        if margin is None:
            return cls(U, V, np.ones(n), None, DIRECT)
        if margin == 0:
            return cls(U, V, np.zeros(n), 0.0, FROZEN)
        return cls(U, V, np.zeros(n), float(margin), SIGMOID_MARGIN)

    @property
    def n(self) -> int:
        return self.U.shape[0]

    @property
    def trainable_spectrum(self) -> bool:
        return self.mode != FROZEN

    def singular_values(self) -> np.ndarray:
        if self.mode == FROZEN:
            return np.ones(self.n)
        if self.mode == DIRECT:
            return self.p.copy()
        return singular_values(self.p, self.margin)

    def matrix(self) -> np.ndarray:
        return compose(self.U, self.singular_values(), self.V)

    def spectrum_param_gradient(self, G_s) -> np.ndarray:
        """Map ``dL/ds`` onto the update direction for ``p``."""
        if self.mode == DIRECT:
            return np.asarray(G_s).copy()
        if self.mode == FROZEN:
            raise ValueError("frozen spectrum has no trainable parameters")
        return spectrum_gradient(G_s, self.p, self.margin)

    def copy(self) -> "FactorizedTransition":
        return FactorizedTransition(self.U.copy(), self.V.copy(), self.p.copy(),
                                    self.margin, self.mode)
