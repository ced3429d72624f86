"""Spectrum traces, gradient-norm grids and the per-step norm bound audit."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import matcore, rnncell
from .spectral import FactorizedTransition

NORM_BOUND_SLACK = 1e-8


@dataclass
class SpectrumTrace:
    rows: list[tuple[float, float, float, float, float]] = field(default_factory=list)

    header = ("epoch", "mean", "std", "min", "max")

    def __len__(self):
        return len(self.rows)


@dataclass
class GradNormGrid:
    iterations: list[int] = field(default_factory=list)
    raw: list[np.ndarray] = field(default_factory=list)

    def normalized(self, how: str = "sum") -> list[np.ndarray]:
        """Per-iteration rows scaled to unit sum (``"sum"``) or unit max (``"max"``)."""
        out = []
        for row in self.raw:
            d = row.sum() if how == "sum" else row.max()
            out.append(row / d if d > 0 else row.copy())
        return out


def current_singular_values(transition) -> np.ndarray:
    if isinstance(transition, FactorizedTransition):
        return transition.singular_values()
    W = np.asarray(transition)
    if W.shape[0] > 512:
        raise ValueError("explicit SVD of a plain transition is limited to n <= 512")
    return np.linalg.svd(W, compute_uv=False)


def spectrum_stats(s) -> tuple[float, float, float, float]:
    s = np.asarray(s, dtype=np.float64)
    return float(s.mean()), float(s.std()), float(s.min()), float(s.max())


def record_spectrum(transition, trace: SpectrumTrace | None = None, epoch: float = 0):
    """Append ``(epoch, mean, std, min, max)`` of the current singular values."""
    row = (float(epoch),) + spectrum_stats(current_singular_values(transition))
    if trace is not None:
        trace.rows.append(row)
    return row


def record_grad_norms(model: rnncell.RnnModel, probe: rnncell.Batch,
                      grid: GradNormGrid | None = None, iteration: int = 0) -> np.ndarray:
    """``||dL_T/dh_t||`` for t = 1..T on a probe batch whose loss sits on the last step."""
    mask = np.asarray(probe.loss_mask)
    if np.any(mask[:-1]):
        raise ValueError("probe batch must carry loss on the final step only")
    outputs, tape = rnncell.forward(model, probe)
    row = rnncell.hidden_grad_norms(model, tape, probe, outputs)
    if grid is not None:
        grid.iterations.append(int(iteration))
        grid.raw.append(row)
    return row


def step_gains(model: rnncell.RnnModel, tape: rnncell.ForwardTape, sample: int = 0, iters: int = 200):
    """Per-step ``(lhs, rhs)`` for the map from the gradient at ``a_{t+1}`` to ``a_t``.

    lhs is the spectral norm of ``g W D_t`` (estimated by power iteration,
    which can only under-estimate); rhs is ``|g| * ||W||_2 * max|D_t|``.
    """
    W = tape.W
    g = model.preact_gain
    lam_W = float(np.linalg.norm(W, 2))
    nl = model.nonlinearity
    out = []
    for t in range(len(tape) - 1):
        rec = tape.records[t, sample]
        if nl.kind == "oplu":
            perm = np.arange(W.shape[0])
            swap = np.repeat(rec, 2)
            perm[swap] = perm[swap].reshape(-1, 2)[:, ::-1].reshape(-1)
            J = g * W[:, perm]
            lam_D = 1.0
        else:
            J = g * (W * rec)
            lam_D = float(np.max(np.abs(rec)))
        out.append((t, matcore.spectral_norm_estimate(J, iters), abs(g) * lam_W * lam_D))
    return out


def check_norm_bound(model: rnncell.RnnModel, tape: rnncell.ForwardTape, sample: int = 0,
                     slack: float = NORM_BOUND_SLACK):
    """Steps where the one-step gradient gain exceeds ``lambda_D * lambda_W``.

    Returns a list of ``(t, lhs, rhs)``; empty when the bound holds everywhere.
    """
    return [(t, lhs, rhs) for t, lhs, rhs in step_gains(model, tape, sample)
            if lhs > rhs * (1.0 + slack) + slack]


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def export_csv(record: SpectrumTrace | GradNormGrid, path, normalize: str | None = None) -> Path:
    """Write a spectrum trace or gradient-norm grid as a headered CSV.

    Reals are written with 17 significant digits so a round trip through
    ``float()`` is exact. ``normalize`` ("sum" or "max") applies to grids only.
    """
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if isinstance(record, SpectrumTrace):
            w.writerow(SpectrumTrace.header)
            for row in record.rows:
                w.writerow([_fmt(v) for v in row])
        else:
            rows = record.raw if normalize is None else record.normalized(normalize)
            T = len(rows[0]) if rows else 0
            w.writerow(["iteration"] + [f"t{t + 1}" for t in range(T)])
            for it, row in zip(record.iterations, rows):
                w.writerow([str(it)] + [_fmt(v) for v in row])
    return path


def read_csv(path) -> tuple[list[str], list[list[float]]]:
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [[float(v) for v in row] for row in r]
