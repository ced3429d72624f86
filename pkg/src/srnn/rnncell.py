"""Elman RNN forward pass and hand-written backpropagation through time.

Tensors are time-major: inputs ``(T, B, n_in)``, hidden states ``(T+1, B, n)``
with ``H[0]`` the initial state, outputs ``(T, B, n_out)``. Hidden vectors are
rows, so one step is ``h_t = f(g * (h_{t-1} Wᵀ + x_t W_inᵀ + b))``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .spectral import FactorizedTransition, factor_gradients

NONLINEARITIES = ("identity", "tanh", "relu", "prelu", "oplu")


@dataclass
class Nonlinearity:
    kind: str = "tanh"
    alpha: float = 0.7
    trainable: bool = False

    def __post_init__(self):
        if self.kind not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.kind!r}; expected one of {NONLINEARITIES}")
        if self.kind == "prelu" and not self.trainable and not 0.0 <= self.alpha <= 1.0:
            raise ValueError("clamped PReLU slope must lie in [0, 1]")


def apply_nonlinearity(kind: str | Nonlinearity, a: np.ndarray):
    """Apply the activation along the last axis.

    Returns ``(h, record)``. For elementwise activations ``record`` is the
    elementwise derivative ``dh/da``; for OPLU it is the boolean mask of pairs
    that were swapped.
    """
    nl = kind if isinstance(kind, Nonlinearity) else Nonlinearity(kind)
    a = np.asarray(a, dtype=np.float64)
    if nl.kind == "identity":
        return a.copy(), np.ones_like(a)
    if nl.kind == "tanh":
        h = np.tanh(a)
        return h, 1.0 - h * h
    if nl.kind == "relu":
        pos = a > 0
        return np.where(pos, a, 0.0), pos.astype(np.float64)
    if nl.kind == "prelu":
        pos = a > 0
        return np.where(pos, a, nl.alpha * a), np.where(pos, 1.0, nl.alpha)
    return oplu(a)


def oplu(a: np.ndarray):
    """Sort each adjacent disjoint pair ``(a[2i], a[2i+1])`` into (max, min)."""
    if a.shape[-1] % 2:
        raise ValueError("OPLU needs an even number of units")
    even, odd = a[..., 0::2], a[..., 1::2]
    swap = even < odd
    h = np.empty_like(a)
    h[..., 0::2] = np.where(swap, odd, even)
    h[..., 1::2] = np.where(swap, even, odd)
    return h, swap


def oplu_backward(dh: np.ndarray, swap: np.ndarray) -> np.ndarray:
    da = np.empty_like(dh)
    de, do = dh[..., 0::2], dh[..., 1::2]
    da[..., 0::2] = np.where(swap, do, de)
    da[..., 1::2] = np.where(swap, de, do)
    return da


def _act_backward(nl: Nonlinearity, dh, record):
    if nl.kind == "oplu":
        return oplu_backward(dh, record)
    return dh * record


@dataclass
class RnnModel:
    W_in: np.ndarray
    transition: np.ndarray | FactorizedTransition
    b: np.ndarray
    W_out: np.ndarray
    b_out: np.ndarray
    nonlinearity: Nonlinearity = field(default_factory=Nonlinearity)
    preact_gain: float = 1.0
    h0: np.ndarray | None = None

    def __post_init__(self):
        n = self.n_hidden
        if self.nonlinearity.kind == "oplu" and n % 2:
            raise ValueError("OPLU requires an even hidden size")
        if self.W_in.shape[0] != n or self.W_out.shape[1] != n:
            raise ValueError("weight shapes do not match the hidden size")
        if self.h0 is None:
            self.h0 = np.zeros(n)

    @property
    def n_hidden(self) -> int:
        return self.b.shape[0]

    @property
    def n_in(self) -> int:
        return self.W_in.shape[1]

    @property
    def n_out(self) -> int:
        return self.W_out.shape[0]

    @property
    def factorized(self) -> bool:
        return isinstance(self.transition, FactorizedTransition)

    def recurrent_matrix(self) -> np.ndarray:
        if self.factorized:
            return self.transition.matrix()
        return self.transition

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name. Scalars are returned as 1-element arrays."""
        out = {"W_in": self.W_in, "b": self.b, "W_out": self.W_out, "b_out": self.b_out}
        if self.factorized:
            out["U"] = self.transition.U
            out["V"] = self.transition.V
            if self.transition.trainable_spectrum:
                out["p"] = self.transition.p
        else:
            out["W"] = self.transition
        if self.nonlinearity.kind == "prelu" and self.nonlinearity.trainable:
            out["alpha"] = np.array([self.nonlinearity.alpha])
        return out

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        if name in ("U", "V", "p"):
            setattr(self.transition, name, value)
        elif name == "W":
            self.transition = value
        elif name == "alpha":
            self.nonlinearity.alpha = float(np.asarray(value).reshape(-1)[0])
        elif name in ("W_in", "b", "W_out", "b_out"):
            setattr(self, name, value)
        else:
            raise KeyError(name)

    def copy(self) -> "RnnModel":
        tr = self.transition.copy()
        nl = Nonlinearity(self.nonlinearity.kind, self.nonlinearity.alpha, self.nonlinearity.trainable)
        return RnnModel(self.W_in.copy(), tr, self.b.copy(), self.W_out.copy(), self.b_out.copy(),
                        nl, self.preact_gain, self.h0.copy())


@dataclass
class Batch:
    """One minibatch.

    ``targets`` holds integer class indices ``(T, B)`` for categorical tasks or
    reals ``(T, B, n_out)`` for regression; ``loss_mask`` is ``(T, B)``.
    """

    inputs: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray

    def __post_init__(self):
        T, B = self.inputs.shape[:2]
        mask = np.asarray(self.loss_mask, dtype=np.float64)
        if mask.ndim == 1:
            mask = mask[:, None]
        self.loss_mask = np.broadcast_to(mask, (T, B))
        if np.any(self.loss_mask < 0):
            raise ValueError("loss mask must be nonnegative")

    @property
    def categorical(self) -> bool:
        return np.issubdtype(self.targets.dtype, np.integer)

    @property
    def T(self) -> int:
        return self.inputs.shape[0]


@dataclass
class ForwardTape:
    inputs: np.ndarray
    preacts: np.ndarray   # (T, B, n), after the gain
    hidden: np.ndarray    # (T+1, B, n)
    records: np.ndarray   # activation derivative or OPLU swap mask, (T, B, ...)
    W: np.ndarray         # realized transition used for this pass

    def __len__(self):
        return self.preacts.shape[0]


def forward(model: RnnModel, batch: Batch | np.ndarray):
    """Run the network over a batch; returns ``(outputs, tape)``."""
    X = batch.inputs if isinstance(batch, Batch) else np.asarray(batch)
    if X.ndim != 3 or X.shape[2] != model.n_in:
        raise ValueError(f"expected inputs (T, B, {model.n_in}), got {X.shape}")
    T, B, _ = X.shape
    n = model.n_hidden
    W = model.recurrent_matrix()
    Wt = W.T
    g = model.preact_gain
    nl = model.nonlinearity
    drive = X @ model.W_in.T + model.b
    A = np.empty((T, B, n))
    H = np.empty((T + 1, B, n))
    H[0] = model.h0
    recs = np.empty((T, B, n // 2), dtype=bool) if nl.kind == "oplu" else np.empty((T, B, n))
    h = H[0]
    for t in range(T):
        a = h @ Wt
        a += drive[t]
        if g != 1.0:
            a *= g
        A[t] = a
        h, recs[t] = apply_nonlinearity(nl, a)
        H[t + 1] = h
    Y = H[1:] @ model.W_out.T + model.b_out
    return Y, ForwardTape(X, A, H, recs, W)


def _log_softmax(Y):
    m = Y.max(axis=-1, keepdims=True)
    Z = Y - m
    return Z - np.log(np.exp(Z).sum(axis=-1, keepdims=True))


def step_losses(outputs: np.ndarray, batch: Batch) -> np.ndarray:
    """Unmasked per-step losses, shape ``(T, B)``."""
    if batch.categorical:
        lp = _log_softmax(outputs)
        return -np.take_along_axis(lp, batch.targets[..., None], axis=-1)[..., 0]
    d = outputs - batch.targets
    return np.sum(d * d, axis=-1)


def loss(outputs: np.ndarray, batch: Batch) -> float:
    """Masked mean of per-step losses (cross-entropy or squared error)."""
    mask = batch.loss_mask
    total = mask.sum()
    if total <= 0:
        return 0.0
    return float(np.sum(mask * step_losses(outputs, batch)) / total)


def output_gradient(outputs: np.ndarray, batch: Batch) -> np.ndarray:
    mask = batch.loss_mask
    total = mask.sum()
    if total <= 0:
        return np.zeros_like(outputs)
    w = (mask / total)[..., None]
    if batch.categorical:
        P = np.exp(_log_softmax(outputs))
        np.put_along_axis(P, batch.targets[..., None],
                          np.take_along_axis(P, batch.targets[..., None], axis=-1) - 1.0, axis=-1)
        return w * P
    return w * 2.0 * (outputs - batch.targets)


def _backprop_hidden(model: RnnModel, tape: ForwardTape, dH_out: np.ndarray):
    """Reverse sweep. Returns (dZ, dH_total) with dZ = dL/d(unscaled preact)."""
    T = len(tape)
    g = model.preact_gain
    nl = model.nonlinearity
    W = tape.W
    dZ = np.empty_like(tape.preacts)
    dHtot = np.empty_like(tape.preacts)
    carry = np.zeros(dH_out.shape[1:])
    for t in range(T - 1, -1, -1):
        dh = dH_out[t] + carry
        dHtot[t] = dh
        dz = _act_backward(nl, dh, tape.records[t])
        if g != 1.0:
            dz *= g
        dZ[t] = dz
        carry = dz @ W
    return dZ, dHtot


def _check_tape(model: RnnModel, tape: ForwardTape, batch: Batch):
    if tape.preacts.shape[0] != batch.T or tape.preacts.shape[2] != model.n_hidden:
        raise ValueError("tape does not belong to this model and batch")
    if tape.inputs.shape != batch.inputs.shape:
        raise ValueError("tape was recorded on a different batch")


def backward(model: RnnModel, tape: ForwardTape, batch: Batch, outputs: np.ndarray | None = None,
             extra_W: np.ndarray | None = None, extra_s: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Exact loss gradients for every trainable parameter.

    ``extra_W`` is added to the composite ``dL/dW`` and ``extra_s`` to
    ``dL/ds`` before the factorized chain rule runs; the trainer uses them for
    weight decay and the soft regularizers. For a factorized transition the
    result carries ``U``, ``V``, ``p`` (margin-renormalized), and also ``s``
    and the composite ``W_composite`` for inspection.
    """
    _check_tape(model, tape, batch)
    if outputs is None:
        outputs = tape.hidden[1:] @ model.W_out.T + model.b_out
    dY = output_gradient(outputs, batch)
    n = model.n_hidden
    H = tape.hidden
    grads = {
        "W_out": dY.reshape(-1, model.n_out).T @ H[1:].reshape(-1, n),
        "b_out": dY.sum(axis=(0, 1)),
    }
    dZ, dHtot = _backprop_hidden(model, tape, dY @ model.W_out)
    dZf = dZ.reshape(-1, n)
    grads["W_in"] = dZf.T @ tape.inputs.reshape(-1, model.n_in)
    grads["b"] = dZf.sum(axis=0)
    G_W = dZf.T @ H[:-1].reshape(-1, n)
    if extra_W is not None:
        G_W = G_W + extra_W
    if model.factorized:
        tr = model.transition
        s = tr.singular_values()
        G_U, G_s, G_V = factor_gradients(G_W, tr.U, s, tr.V)
        if extra_s is not None:
            G_s = G_s + extra_s
        grads.update(U=G_U, V=G_V, s=G_s, W_composite=G_W)
        if tr.trainable_spectrum:
            grads["p"] = tr.spectrum_param_gradient(G_s)
    else:
        grads["W"] = G_W
    nl = model.nonlinearity
    if nl.kind == "prelu" and nl.trainable:
        grads["alpha"] = np.array([np.sum(dHtot * np.minimum(tape.preacts, 0.0))])
    return grads


def hidden_grad_norms(model: RnnModel, tape: ForwardTape, batch: Batch,
                      outputs: np.ndarray | None = None) -> np.ndarray:
    """``||dL/dh_t||`` for ``t = 1..T`` (Frobenius over the batch)."""
    _check_tape(model, tape, batch)
    if outputs is None:
        outputs = tape.hidden[1:] @ model.W_out.T + model.b_out
    dY = output_gradient(outputs, batch)
    _, dHtot = _backprop_hidden(model, tape, dY @ model.W_out)
    return np.sqrt(np.sum(dHtot * dHtot, axis=(1, 2)))


def last_step_mask(T: int, B: int) -> np.ndarray:
    mask = np.zeros((T, B))
    mask[-1] = 1.0
    return mask
