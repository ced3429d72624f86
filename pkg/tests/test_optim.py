import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_model
from oracles import numeric_gradient
from srnn import matcore, optim, rnncell
from srnn.matcore import Rng


def ortho_err(M):
    return np.linalg.norm(M.T @ M - np.eye(M.shape[0]))


class TestGeodesicStep:
    def test_zero_gradient_is_noop(self):
        M = matcore.orthogonal_init(5, 5, Rng(0))
        assert np.array_equal(optim.geodesic_step(M, np.zeros((5, 5)), 0.3), M)

    def test_symmetric_direction_is_noop(self):
        # G = M S with S symmetric gives A = M S Mᵀ - M Sᵀ Mᵀ = 0
        M = matcore.orthogonal_init(4, 4, Rng(1))
        S = Rng(2).normal((4, 4))
        S = S + S.T
        assert np.allclose(optim.geodesic_step(M, M @ S, 0.1), M, atol=1e-14)

    def test_first_order_matches_tangent(self):
        r = Rng(3)
        M, G = matcore.orthogonal_init(6, 6, r), r.normal((6, 6))
        A = G @ M.T - M @ G.T
        errs = []
        for eta in (1e-2, 5e-3, 2.5e-3):
            errs.append(np.linalg.norm(optim.geodesic_step(M, G, eta) - (M - eta * A @ M)))
        # second-order remainder: halving eta quarters the error
        assert 3.5 < errs[0] / errs[1] < 4.5 and 3.5 < errs[1] / errs[2] < 4.5

    def test_tangent_agreement_tenfold(self):
        r = Rng(13)
        M, G = matcore.orthogonal_init(10, 10, r), r.normal((10, 10))
        tangent = lambda eta: M - eta * (G - M @ G.T @ M)
        e3 = np.linalg.norm(optim.geodesic_step(M, G, 1e-3) - tangent(1e-3))
        e4 = np.linalg.norm(optim.geodesic_step(M, G, 1e-4) - tangent(1e-4))
        assert 80 < e3 / e4 < 120
        assert ortho_err(optim.geodesic_step(M, G, 1e-3)) < 1e-12

    def test_descent_direction(self):
        # for L(M) = <C, M>, a small step lowers the loss
        r = Rng(4)
        M, C = matcore.orthogonal_init(5, 5, r), r.normal((5, 5))
        M2 = optim.geodesic_step(M, C, 1e-3)
        assert np.sum(C * M2) < np.sum(C * M)

    def test_long_run_stays_orthogonal(self):
        r = Rng(5)
        M = matcore.orthogonal_init(8, 8, r)
        for _ in range(1000):
            M = optim.geodesic_step(M, r.normal((8, 8)), 0.05)
        assert ortho_err(M) < 1e-10

    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(1, 16), seed=st.integers(0, 2**31), eta=st.floats(1e-6, 1.0))
    def test_preserves_orthogonality(self, n, seed, eta):
        r = Rng(seed)
        M = matcore.orthogonal_init(n, n, r)
        out = optim.geodesic_step(M, r.normal((n, n)), eta)
        assert ortho_err(out) < 1e-12 * max(1, n)


class TestRmsprop:
    def test_accumulator_trace(self):
        p, acc = np.zeros(1), np.zeros(1)
        trace = []
        for _ in range(3):
            p, acc = optim.rmsprop_step(p, np.ones(1), acc, lr=0.01)
            trace.append(acc[0])
        assert np.allclose(trace, [0.1, 0.19, 0.271], rtol=0, atol=1e-15)

    def test_first_step_size(self):
        # acc = (1 - rho) g² so the step is lr / sqrt(1 - rho), independent of |g|
        for g in (1e-3, 1.0, 50.0):
            p, _ = optim.rmsprop_step(np.zeros(1), np.array([g]), np.zeros(1), lr=0.1, eps=0)
            assert abs(p[0] + 0.1 / np.sqrt(0.1)) < 1e-14

    def test_inputs_untouched(self):
        p, g, a = np.ones(3), np.ones(3), np.zeros(3)
        optim.rmsprop_step(p, g, a, 0.1)
        assert np.array_equal(p, np.ones(3)) and np.array_equal(a, np.zeros(3))


class TestClipping:
    def test_rescales(self):
        out = optim.clip_gradients({"a": np.array([30.0]), "b": np.array([40.0])}, 25.0)
        assert np.allclose(out["a"], [15.0]) and np.allclose(out["b"], [20.0])

    def test_below_threshold_unchanged(self):
        g = {"a": np.array([3.0, 4.0])}
        assert optim.clip_gradients(g, 5.0)["a"] is g["a"]

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            optim.clip_gradients({"a": np.ones(1)}, 0)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31), thr=st.floats(0.01, 100))
    def test_norm_bounded_and_direction_kept(self, seed, thr):
        r = Rng(seed)
        g = {"a": r.normal(4) * 10, "b": r.normal((2, 3)) * 10}
        out = optim.clip_gradients(g, thr)
        assert optim.global_norm(out) <= thr * (1 + 1e-12)
        flat_in = np.concatenate([v.ravel() for v in g.values()])
        flat_out = np.concatenate([v.ravel() for v in out.values()])
        cos = flat_in @ flat_out / (np.linalg.norm(flat_in) * np.linalg.norm(flat_out))
        assert cos > 1 - 1e-12


class TestWeightDecay:
    def test_zero_decay(self):
        assert optim.apply_weight_decay(make_model(), 0.0) == {}

    def test_matches_fd_of_penalty(self):
        model = make_model(factorized=False)
        decay = 0.3
        g = optim.apply_weight_decay(model, decay)
        for name in ("W_in", "W_out"):
            arr = getattr(model, name)
            fd = numeric_gradient(lambda: 0.5 * decay * np.sum(arr * arr), arr)
            assert np.allclose(g[name], fd, atol=1e-9)
        W = model.transition
        fd = numeric_gradient(lambda: 0.5 * decay * np.sum(W * W), W)
        assert np.allclose(g["W"], fd, atol=1e-9)

    def test_factorized_uses_composite(self):
        model = make_model()
        g = optim.apply_weight_decay(model, 0.1)
        assert np.allclose(g["W"], 0.1 * model.recurrent_matrix())

    def test_negative(self):
        with pytest.raises(ValueError):
            optim.apply_weight_decay(make_model(), -1)


class TestApplyUpdates:
    def test_groups(self):
        groups = optim.parameter_groups(make_model())
        assert groups["U"] == groups["V"] == optim.GEODESIC
        assert groups["p"] == optim.SPECTRUM and groups["W_in"] == optim.EUCLIDEAN
        assert optim.parameter_groups(make_model(factorized=False), True)["W"] == optim.GEODESIC

    def test_factors_stay_orthogonal_and_spectrum_moves(self):
        model = make_model(seed=2)
        state = optim.OptimState(geodesic_lr=0.05, spectrum_lr=0.01, euclidean_lr=0.01)
        r = Rng(0)
        p0 = model.transition.p.copy()
        for _ in range(50):
            X = r.normal((6, 4, 3))
            batch = rnncell.Batch(X, r.integers(0, 4, (6, 4)), np.ones((6, 4)))
            Y, tape = rnncell.forward(model, batch)
            optim.apply_updates(model, rnncell.backward(model, tape, batch, Y), state)
        assert ortho_err(model.transition.U) < 1e-12 and ortho_err(model.transition.V) < 1e-12
        assert not np.array_equal(model.transition.p, p0)
        assert set(state.accumulators) == {"W_in", "b", "W_out", "b_out", "p"}

    def test_sgd(self):
        model = make_model(factorized=False)
        W0 = model.transition.copy()
        G = np.ones_like(W0)
        optim.apply_updates(model, {"W": G}, optim.OptimState(method="sgd", euclidean_lr=0.5))
        assert np.allclose(model.transition, W0 - 0.5)

    def test_bad_state(self):
        with pytest.raises(ValueError):
            optim.OptimState(method="adam")
        with pytest.raises(ValueError):
            optim.OptimState(rho=1.0)
