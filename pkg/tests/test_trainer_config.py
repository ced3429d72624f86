import math

import numpy as np
import pytest

from conftest import MNIST_IMAGES, MNIST_LABELS
from srnn import checkpoint, config, optim, rnncell, tasks, trainer
from srnn.config import ConfigError, ExperimentConfig
from srnn.matcore import Rng


def small_cfg(**kw):
    base = dict(task="copy", T=10, n_hidden=8, nonlinearity="identity", epochs=2, epoch_len=3,
                batch_size=4, val_batches=1, patience=None)
    base.update(kw)
    return ExperimentConfig(**base)


class TestConfig:
    def test_defaults(self):
        c = ExperimentConfig()
        assert (c.batch_size, c.epoch_len, c.weight_decay, c.clip_threshold) == (50, 100, 1e-4, 100.0)
        assert (c.euclidean_lr, c.geodesic_lr) == (1e-4, 1e-6)

    def test_parse_text(self):
        c = config.parse_config_text("task = adding  # comment\nT = 50\nmargin = none\n"
                                     "grad_norms = yes\nclip_threshold = none\n")
        assert c.task == "adding" and c.T == 50 and c.margin is None and c.grad_norms
        assert c.clip_threshold is None and c.resolved_spectrum_mode == "direct"

    def test_roundtrip_text(self):
        c = small_cfg(margin=0.25, lambda_orth=0.5, corpus="x.txt")
        assert config.parse_config_text(c.to_text()) == c

    @pytest.mark.parametrize("text,fragment", [
        ("T = 10\nbogus = 1\n", ":2: unknown key"),
        ("T = 10\nT = 20\n", ":2: duplicate key"),
        ("T = ten\n", ":1: bad value"),
        ("just words\n", ":1: expected"),
        ("margin = 1.5\n", "margin"),
        ("task = video\n", "task"),
        ("nonlinearity = oplu\nn_hidden = 7\n", "even"),
        ("task = copy\nT = 5\n", "T >= 10"),
        ("spectrum_mode = sigmoid\nmargin = 0\n", "positive margin"),
        ("grad_norms = maybe\n", "boolean"),
    ])
    def test_errors(self, text, fragment):
        with pytest.raises(ConfigError, match=fragment):
            config.parse_config_text(text, "f.cfg")

    def test_parse_file(self, tmp_path):
        p = tmp_path / "a.cfg"
        p.write_text("seed = 3\n")
        assert config.parse_config(p).seed == 3

    def test_resolved(self):
        assert ExperimentConfig(margin=0).resolved_spectrum_mode == "frozen"
        assert ExperimentConfig(margin=0.3).resolved_spectrum_mode == "sigmoid"
        assert ExperimentConfig(task="adding").resolved_threshold == 0.05
        assert ExperimentConfig(task="copy").resolved_threshold == 0.95


class TestBuildModel:
    @pytest.mark.parametrize("init", ["orthogonal", "glorot", "identity"])
    @pytest.mark.parametrize("margin", [None, 0.0, 0.5])
    def test_factorized_inits(self, init, margin):
        cfg = small_cfg(init=init, margin=margin if init != "glorot" or margin else 1.0)
        model = trainer.build_model(cfg)
        tr = model.transition
        for M in (tr.U, tr.V):
            assert np.linalg.norm(M.T @ M - np.eye(8)) < 1e-10
        if init != "glorot":
            assert np.allclose(tr.singular_values(), 1.0)

    def test_glorot_factorization_recovers_draw(self):
        cfg = small_cfg(init="glorot", margin=None)
        model = trainer.build_model(cfg)
        sv = np.linalg.svd(model.recurrent_matrix(), compute_uv=False)
        assert np.allclose(np.sort(sv), np.sort(model.transition.p))

    def test_plain_and_orthogonal(self):
        assert not trainer.build_model(small_cfg(transition="plain")).factorized
        W = trainer.build_model(small_cfg(transition="orthogonal")).transition
        assert np.linalg.norm(W.T @ W - np.eye(8)) < 1e-12

    def test_seeded(self):
        a, b = trainer.build_model(small_cfg(seed=4)), trainer.build_model(small_cfg(seed=4))
        assert np.array_equal(a.W_in, b.W_in) and np.array_equal(a.transition.U, b.transition.U)


class TestEvaluate:
    def test_uniform_bpc(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("hello world\nthe quick brown fox\n")
        corpus = tasks.load_char_corpus(p)
        cfg = small_cfg(task="chars", corpus=str(p))
        model = trainer.build_model(cfg)
        model.W_out[:] = 0.0
        bpc = trainer.evaluate(model, tasks.char_batches(corpus, 2), "bpc")
        assert abs(bpc - math.log2(49)) < 1e-12

    def test_copy_accuracy_of_blank_predictor(self):
        b = tasks.gen_copy_batch(tasks.CopySpec(30), 10, Rng(0))
        model = trainer.build_model(small_cfg(T=30))
        model.W_out[:] = 0.0
        model.b_out[:] = 0.0
        model.b_out[0] = 1.0
        assert trainer.evaluate(model, [b], "accuracy") == 40 / 50

    def test_unknown_metric(self):
        model = trainer.build_model(small_cfg())
        with pytest.raises(ValueError):
            trainer.evaluate(model, [tasks.gen_copy_batch(tasks.CopySpec(10), 2, Rng(0))], "f1")


class TestGradients:
    def test_regularizers_included(self):
        cfg = small_cfg(lambda_orth=0.3, gamma_prior=0.2, weight_decay=0.01, margin=0.5)
        model = trainer.build_model(cfg)
        model.transition.p = Rng(1).normal(8)
        batch = tasks.gen_copy_batch(tasks.CopySpec(10), 3, Rng(2))
        value, grads = trainer.compute_gradients(model, batch, cfg)
        Y, _ = rnncell.forward(model, batch)
        W = model.recurrent_matrix()
        s = model.transition.singular_values()
        expected = (rnncell.loss(Y, batch) + 0.3 * np.sum((W.T @ W - np.eye(8)) ** 2)
                    + 0.2 * np.sum((s - 1) ** 2))
        assert abs(value - expected) < 1e-12
        assert set(grads) == set(model.parameters())

    def test_diverged(self):
        cfg = small_cfg(transition="plain")
        model = trainer.build_model(cfg)
        model.transition = model.transition * np.nan
        batch = tasks.gen_copy_batch(tasks.CopySpec(10), 2, Rng(0))
        with pytest.raises(trainer.TrainingDiverged):
            trainer.train_step(model, batch, cfg, trainer.build_optim_state(cfg))


class TestRun:
    def test_zero_learning_rates_keep_metrics_constant(self):
        cfg = small_cfg(euclidean_lr=0.0, geodesic_lr=0.0, spectrum_lr=0.0, epochs=3)
        r = trainer.run_experiment(cfg)
        vals = [h["val_metric"] for h in r["history"]]
        assert len(vals) == 3 and vals[0] == vals[1] == vals[2]

    def test_artifacts(self, tmp_path):
        cfg = small_cfg(out_dir=str(tmp_path), grad_norms=True, check_norm_bound=True, diag_every=2)
        r = trainer.run_experiment(cfg)
        for name in ("config.resolved", "metrics.csv", "timing.csv", "spectrum.csv", "grad_norms.csv",
                     "grad_norms_normalized.csv", "grad_norms_unitmax.csv", "checkpoint.srnn"):
            assert (tmp_path / name).exists(), name
        assert (tmp_path / "metrics.csv").read_text().splitlines()[0] == "epoch,train_loss,val_metric,val_loss"
        assert len(r["spectrum"]) == 3 and r["norm_bound_violations"] == 0
        assert config.parse_config(tmp_path / "config.resolved") == cfg

    def test_patience(self):
        cfg = small_cfg(euclidean_lr=0.0, geodesic_lr=0.0, spectrum_lr=0.0, epochs=10, patience=2)
        assert trainer.run_experiment(cfg)["epochs"] == 3

    def test_stop_at_threshold(self):
        cfg = small_cfg(epochs=5, threshold=0.0, stop_at_threshold=True)
        r = trainer.run_experiment(cfg)
        assert r["epochs"] == 1 and r["epochs_to_threshold"] == 1

    def test_mnist_loader_split(self):
        cfg = small_cfg(task="mnist", mnist_images=str(MNIST_IMAGES), mnist_labels=str(MNIST_LABELS),
                        mnist_limit=100, mnist_val=30, batch_size=25)
        data = trainer.load_task_data(cfg)
        assert sum(b.inputs.shape[1] for b in data.val) == 30
        assert data._train_source[0].shape == (784, 70, 1)

    def test_pmnist_uses_permutation(self):
        base = dict(mnist_images=str(MNIST_IMAGES), mnist_labels=str(MNIST_LABELS), mnist_limit=20,
                    mnist_val=10, batch_size=10)
        plain = trainer.load_task_data(small_cfg(task="mnist", **base))
        perm = trainer.load_task_data(small_cfg(task="pmnist", permutation_seed=5, **base))
        p = tasks.pixel_permutation(5)
        assert np.array_equal(perm.val[0].inputs, plain.val[0].inputs[p])

    def test_missing_data_paths(self):
        with pytest.raises(ValueError):
            trainer.load_task_data(small_cfg(task="mnist"))
        with pytest.raises(ValueError):
            trainer.load_task_data(small_cfg(task="chars"))


class TestCheckpoint:
    def test_roundtrip_bytes(self, tmp_path):
        cfg = small_cfg(margin=0.3)
        r = trainer.run_experiment(cfg.replace(out_dir=str(tmp_path / "a")))
        path = tmp_path / "a" / "checkpoint.srnn"
        run, cfg2 = trainer.load_checkpoint(path)
        assert cfg2 == cfg.replace(out_dir=str(tmp_path / "a"))
        trainer.save_checkpoint(tmp_path / "b.srnn", run, cfg2)
        assert path.read_bytes() == (tmp_path / "b.srnn").read_bytes()
        for name, arr in r["model"].parameters().items():
            assert np.array_equal(arr, run.model.parameters()[name])

    def test_plain_model_roundtrip(self, tmp_path):
        cfg = small_cfg(transition="plain", nonlinearity="prelu", prelu_trainable=True)
        run = trainer.init_run(cfg)
        trainer.save_checkpoint(tmp_path / "p.srnn", run, cfg)
        back, _ = trainer.load_checkpoint(tmp_path / "p.srnn")
        assert np.array_equal(back.model.transition, run.model.transition)
        assert back.model.nonlinearity == run.model.nonlinearity

    def test_corrupt(self, tmp_path):
        run = trainer.init_run(small_cfg())
        p = trainer.save_checkpoint(tmp_path / "c.srnn", run, small_cfg())
        raw = p.read_bytes()
        (tmp_path / "bad.srnn").write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(checkpoint.CheckpointError, match="magic"):
            trainer.load_checkpoint(tmp_path / "bad.srnn")
        (tmp_path / "short.srnn").write_bytes(raw[:-3])
        with pytest.raises(checkpoint.CheckpointError, match="truncated"):
            trainer.load_checkpoint(tmp_path / "short.srnn")

    def test_tensor_layout(self, tmp_path):
        p = checkpoint.write_checkpoint(tmp_path / "t.srnn", {"k": 1}, {"x": np.arange(6.0).reshape(2, 3)})
        raw = p.read_bytes()
        assert raw[:5] == b"SRNN1"
        manifest, tensors = checkpoint.read_checkpoint(p)
        assert manifest["k"] == 1 and np.array_equal(tensors["x"], np.arange(6.0).reshape(2, 3))
        assert raw.endswith(np.arange(6.0).astype("<f8").tobytes())

    def test_optim_state_restored(self, tmp_path):
        cfg = small_cfg()
        r = trainer.run_experiment(cfg)
        p = trainer.save_checkpoint(tmp_path / "o.srnn", r["run"], cfg)
        back, _ = trainer.load_checkpoint(p)
        st = r["run"].optim_state
        assert isinstance(back.optim_state, optim.OptimState)
        for k, v in st.accumulators.items():
            assert np.array_equal(back.optim_state.accumulators[k], v)
