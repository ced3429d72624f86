"""Dense linear algebra primitives, the seeded random stream and initializers.

Matrices are plain float64 ``numpy`` arrays; every public function returns a
fresh array and never mutates its inputs.
"""

from __future__ import annotations

import warnings

import numpy as np
import scipy.linalg

SINGULAR_PIVOT_RTOL = 1e-14


class SingularMatrixError(ArithmeticError):
    """Raised when an LU pivot is numerically zero."""


class Rng:
    """Seedable random stream backed by the counter-based Philox generator.

    Gaussian draws use the Box-Muller transform on the uniform stream so the
    sequence depends only on the seed, not on the sampling algorithm numpy
    happens to ship.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def uniform(self, size=None) -> np.ndarray:
        """Uniform draws in [0, 1)."""
        return self._gen.random(size)

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        shape = () if size is None else tuple(np.atleast_1d(size))
        n = int(np.prod(shape)) if shape else 1
        half = (n + 1) // 2
        u1 = 1.0 - self._gen.random(half)  # (0, 1], keeps log finite
        u2 = self._gen.random(half)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * half)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        z = scale * z[:n]
        return z.reshape(shape) if shape else float(z[0])

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self, stream: int) -> "Rng":
        """An independent stream derived from this seed and a stream index."""
        seq = np.random.SeedSequence([self.seed, int(stream)])
        return Rng(int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)))

    def get_state(self) -> dict:
        """JSON-serializable stream position."""
        return _jsonable(self._gen.bit_generator.state) | {"seed": self.seed}

    def set_state(self, state: dict) -> None:
        state = dict(state)
        self.seed = int(state.pop("seed"))
        inner = dict(state["state"])
        inner = {k: np.asarray(v, dtype=np.uint64) for k, v in inner.items()}
        state["state"] = inner
        state["buffer"] = np.asarray(state["buffer"], dtype=np.uint64)
        self._gen.bit_generator.state = state


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return [int(v) for v in obj.tolist()]
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def orthogonal_init(rows: int, cols: int, rng: Rng) -> np.ndarray:
    """Haar-distributed matrix with orthonormal columns (or rows if wide)."""
    if rows < 1 or cols < 1:
        raise ValueError(f"shape must be positive, got ({rows}, {cols})")
    tall = rows >= cols
    big, small = (rows, cols) if tall else (cols, rows)
    q, r = np.linalg.qr(rng.normal((big, small)))
    # sign fix on diag(R) makes the draw uniform over the manifold
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs
    return q if tall else q.T.copy()


def glorot_normal_init(rows: int, cols: int, rng: Rng) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ValueError(f"shape must be positive, got ({rows}, {cols})")
    return rng.normal((rows, cols), scale=np.sqrt(2.0 / (rows + cols)))


def identity_init(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be positive")
    return np.eye(n)


def solve(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve ``A X = B`` by LU with partial pivoting.

    Raises SingularMatrixError if a pivot falls below 1e-14 * max|A|.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"A must be square, got shape {A.shape}")
    if B.shape[0] != A.shape[0]:
        raise ValueError(f"row mismatch: A is {A.shape}, B is {B.shape}")
    scale = np.max(np.abs(A)) if A.size else 0.0
    if scale == 0.0 or not np.isfinite(scale):
        raise SingularMatrixError("matrix is zero or non-finite")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(A, check_finite=False)
    if np.min(np.abs(np.diag(lu))) < SINGULAR_PIVOT_RTOL * scale:
        raise SingularMatrixError("pivot below tolerance; matrix is numerically singular")
    X = scipy.linalg.lu_solve((lu, piv), B, check_finite=False)
    if not np.all(np.isfinite(X)):
        raise SingularMatrixError("solution is not finite")
    return X


def spectral_norm_estimate(M: np.ndarray, iters: int = 100) -> float:
    """Largest singular value by power iteration on MᵀM.

    The start vector is fixed, so the estimate is a deterministic function of
    ``M`` and never decreases as ``iters`` grows.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    M = np.asarray(M, dtype=np.float64)
    if not np.any(M):
        return 0.0
    x = Rng(0x5EED).normal(M.shape[1])
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(iters):
        y = M @ x
        est = float(np.linalg.norm(y))
        if est == 0.0:
            break
        z = M.T @ y
        nz = np.linalg.norm(z)
        if nz == 0.0:
            break
        x = z / nz
    return max(est, float(np.linalg.norm(M @ x)))
