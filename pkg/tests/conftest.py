import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from srnn import matcore, spectral  # noqa: E402
from srnn.rnncell import Nonlinearity, RnnModel  # noqa: E402

DATA = Path(__file__).parent / "data"
MNIST_IMAGES = DATA / "mnist-2500-images-idx3-ubyte.gz"
MNIST_LABELS = DATA / "mnist-2500-labels-idx1-ubyte.gz"


def make_model(n=6, n_in=3, n_out=4, kind="tanh", factorized=True, margin=0.5, seed=0,
               alpha=0.7, trainable=False, gain=1.0, spectrum_scale=0.5):
    """Random small model with a non-trivial spectrum for gradient checks."""
    rng = matcore.Rng(seed)
    if factorized:
        U = matcore.orthogonal_init(n, n, rng)
        V = matcore.orthogonal_init(n, n, rng)
        tr = spectral.FactorizedTransition.from_margin(U, V, margin)
        if tr.mode != spectral.FROZEN:
            tr.p = tr.p + spectrum_scale * rng.normal(n)
    else:
        tr = 0.5 * rng.normal((n, n)) / np.sqrt(n)
    return RnnModel(
        rng.normal((n, n_in)) * 0.5, tr, 0.1 * rng.normal(n), rng.normal((n_out, n)) * 0.5,
        0.1 * rng.normal(n_out), Nonlinearity(kind, alpha, trainable), gain)


@pytest.fixture
def rng():
    return matcore.Rng(1234)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_log.LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
