"""Update rules: geodesic (Cayley) descent, RMSprop, SGD, clipping, weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import matcore
from .rnncell import RnnModel

GEODESIC = "geodesic"
SPECTRUM = "spectrum"
EUCLIDEAN = "euclidean"


def geodesic_step(M: np.ndarray, G: np.ndarray, eta: float) -> np.ndarray:
    """One Cayley-transform step along the orthogonal manifold.

    With ``A = G Mᵀ - M Gᵀ`` the update is
    ``(I + eta/2 A)^-1 (I - eta/2 A) M``, which is orthogonal whenever M is.
    """
    A = G @ M.T
    A = A - A.T
    if not np.any(A):
        return M.copy()
    I = np.eye(M.shape[0])
    half = 0.5 * eta * A
    return matcore.solve(I + half, (I - half) @ M)


def rmsprop_step(param, grad, acc, lr: float, rho: float = 0.9, eps: float = 1e-8):
    """Return ``(new_param, new_acc)``; inputs are left untouched."""
    acc = rho * acc + (1.0 - rho) * grad * grad
    return param - lr * grad / (np.sqrt(acc) + eps), acc


def sgd_step(param, grad, lr: float):
    return param - lr * grad


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_gradients(grads: dict[str, np.ndarray], threshold: float) -> dict[str, np.ndarray]:
    """Rescale all gradients jointly so their global L2 norm is at most ``threshold``."""
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    norm = global_norm(grads)
    if norm <= threshold:
        return grads
    scale = threshold / norm
    return {k: g * scale for k, g in grads.items()}


def apply_weight_decay(model: RnnModel, decay: float) -> dict[str, np.ndarray]:
    """Gradient contributions of ``decay/2 * ||P||²`` for every weight matrix.

    The recurrent matrix is decayed as the composite ``W`` (key ``"W"``), even
    when it is factorized; callers feed that term into the factor chain rule.
    Biases and the PReLU slope are not decayed.
    """
    if decay < 0:
        raise ValueError("weight decay must be nonnegative")
    if decay == 0:
        return {}
    return {
        "W_in": decay * model.W_in,
        "W_out": decay * model.W_out,
        "W": decay * model.recurrent_matrix(),
    }


@dataclass
class OptimState:
    """Per-group learning rates and per-parameter RMSprop accumulators."""

    euclidean_lr: float = 1e-4
    geodesic_lr: float = 1e-6
    spectrum_lr: float = 1e-4
    rho: float = 0.9
    eps: float = 1e-8
    clip_threshold: float | None = 100.0
    weight_decay: float = 1e-4
    method: str = "rmsprop"
    accumulators: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        if self.method not in ("rmsprop", "sgd"):
            raise ValueError(f"unknown method {self.method!r}")


def parameter_groups(model: RnnModel, hard_orthogonal_W: bool = False) -> dict[str, str]:
    groups = {}
    for name in model.parameters():
        if name in ("U", "V") or (name == "W" and hard_orthogonal_W):
            groups[name] = GEODESIC
        elif name == "p":
            groups[name] = SPECTRUM
        else:
            groups[name] = EUCLIDEAN
    return groups


def apply_updates(model: RnnModel, grads: dict[str, np.ndarray], state: OptimState,
                  hard_orthogonal_W: bool = False) -> None:
    """Update ``model`` in place: geodesic steps for orthogonal factors,
    RMSprop (or SGD) for everything else."""
    params = model.parameters()
    for name, group in parameter_groups(model, hard_orthogonal_W).items():
        grad = grads.get(name)
        if grad is None:
            continue
        param = params[name]
        if group == GEODESIC:
            if state.geodesic_lr:
                model.set_parameter(name, geodesic_step(param, grad, state.geodesic_lr))
            continue
        lr = state.spectrum_lr if group == SPECTRUM else state.euclidean_lr
        if state.method == "sgd":
            model.set_parameter(name, sgd_step(param, grad, lr))
            continue
        acc = state.accumulators.get(name)
        if acc is None:
            acc = np.zeros_like(param)
        new, state.accumulators[name] = rmsprop_step(param, grad, acc, lr, state.rho, state.eps)
        model.set_parameter(name, new)
