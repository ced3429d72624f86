"""Training loop, evaluation and checkpoint I/O for experiment configs."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, diagnostics, matcore, optim, rnncell, spectral, tasks
from .config import ExperimentConfig
from .rnncell import Batch, Nonlinearity, RnnModel

log = logging.getLogger(__name__)

TASK_SHAPES = {"copy": (10, 10), "adding": (2, 1), "mnist": (1, 10), "pmnist": (1, 10), "chars": (49, 49)}
METRIC = {"copy": "accuracy", "adding": "mse", "mnist": "accuracy", "pmnist": "accuracy", "chars": "bpc"}
HIGHER_IS_BETTER = {"accuracy": True, "mse": False, "bpc": False}

# fixed stream indices so every consumer of randomness is independent of the others
STREAM_INIT, STREAM_DATA, STREAM_VAL, STREAM_PROBE = range(4)


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- model setup

def _logit(x):
    return np.log(x) - np.log1p(-x)


def _transition_init(cfg: ExperimentConfig, n: int, rng: matcore.Rng):
    if cfg.init == "identity":
        return matcore.identity_init(n)
    if cfg.init == "glorot":
        return matcore.glorot_normal_init(n, n, rng)
    return matcore.orthogonal_init(n, n, rng)


def build_model(cfg: ExperimentConfig, rng: matcore.Rng | None = None) -> RnnModel:
    """Initialize a model for ``cfg``. Input and output weights are Glorot normal."""
    rng = rng or matcore.Rng(cfg.seed).spawn(STREAM_INIT)
    n_in, n_out = TASK_SHAPES[cfg.task]
    n = cfg.n_hidden
    mode = cfg.resolved_spectrum_mode
    if cfg.transition == "factorized":
        if cfg.init == "glorot":
            # the only place a runtime SVD is needed: factor the initial draw
            U, s, Vt = np.linalg.svd(matcore.glorot_normal_init(n, n, rng))
            V = Vt.T
        else:
            U = _transition_init(cfg, n, rng)
            V = _transition_init(cfg, n, rng) if cfg.init == "orthogonal" else U.copy()
            s = np.ones(n)
        if mode == "direct":
            p = s.copy()
        elif mode == "frozen":
            p = np.zeros(n)
        else:
            m = cfg.margin
            frac = np.clip((s - 1.0) / (2.0 * m) + 0.5, 1e-6, 1 - 1e-6)
            p = _logit(frac)
        transition = spectral.FactorizedTransition(U, V, p, cfg.margin if mode != "direct" else None, mode)
    else:
        transition = _transition_init(cfg, n, rng)
    W_in = matcore.glorot_normal_init(n, n_in, rng)
    W_out = matcore.glorot_normal_init(n_out, n, rng)
    nl = Nonlinearity(cfg.nonlinearity, cfg.prelu_alpha, cfg.prelu_trainable)
    return RnnModel(W_in, transition, np.zeros(n), W_out, np.zeros(n_out), nl, cfg.preact_gain)


def build_optim_state(cfg: ExperimentConfig) -> optim.OptimState:
    return optim.OptimState(
        euclidean_lr=cfg.euclidean_lr, geodesic_lr=cfg.geodesic_lr, spectrum_lr=cfg.spectrum_lr,
        rho=cfg.rmsprop_decay, eps=cfg.rmsprop_eps, clip_threshold=cfg.clip_threshold,
        weight_decay=cfg.weight_decay, method=cfg.optimizer)


# ---------------------------------------------------------------- data

@dataclass
class TaskData:
    """Training stream factory plus a fixed validation set."""

    cfg: ExperimentConfig
    val: list[Batch]
    probe: Batch | None = None
    _train_source: object = None

    def epoch(self, rng: matcore.Rng):
        cfg = self.cfg
        if cfg.task == "copy":
            spec = tasks.CopySpec(cfg.T)
            for _ in range(cfg.epoch_len):
                yield tasks.gen_copy_batch(spec, cfg.batch_size, rng, cfg.copy_positions_only)
        elif cfg.task == "adding":
            spec = tasks.AddingSpec(cfg.T)
            for _ in range(cfg.epoch_len):
                yield tasks.gen_adding_batch(spec, cfg.batch_size, rng)
        elif cfg.task in ("mnist", "pmnist"):
            seqs, labels = self._train_source
            yield from tasks.mnist_batches(seqs, labels, cfg.batch_size, rng)
        else:
            yield from tasks.char_batches(self._train_source, cfg.batch_size, rng)


def last_step_probe(batch: Batch) -> Batch:
    return Batch(batch.inputs, batch.targets, rnncell.last_step_mask(batch.T, batch.inputs.shape[1]))


def load_task_data(cfg: ExperimentConfig) -> TaskData:
    root = matcore.Rng(cfg.seed)
    val_rng = root.spawn(STREAM_VAL)
    if cfg.task == "copy":
        spec = tasks.CopySpec(cfg.T)
        val = [tasks.gen_copy_batch(spec, cfg.batch_size, val_rng, cfg.copy_positions_only)
               for _ in range(cfg.val_batches)]
        probe = last_step_probe(tasks.gen_copy_batch(spec, cfg.batch_size, root.spawn(STREAM_PROBE)))
        return TaskData(cfg, val, probe)
    if cfg.task == "adding":
        spec = tasks.AddingSpec(cfg.T)
        val = [tasks.gen_adding_batch(spec, cfg.batch_size, val_rng) for _ in range(cfg.val_batches)]
        probe = tasks.gen_adding_batch(spec, cfg.batch_size, root.spawn(STREAM_PROBE))
        return TaskData(cfg, val, probe)
    if cfg.task in ("mnist", "pmnist"):
        if not (cfg.mnist_images and cfg.mnist_labels):
            raise ValueError("mnist tasks need mnist_images and mnist_labels paths")
        data = tasks.load_mnist_idx(cfg.mnist_images, cfg.mnist_labels)
        if cfg.mnist_limit is not None:
            data = data.subset(slice(0, cfg.mnist_limit))
        n_val = min(cfg.mnist_val, len(data) // 2)
        train, val = data.subset(slice(0, len(data) - n_val)), data.subset(slice(len(data) - n_val, None))
        perm_seed = None
        if cfg.task == "pmnist":
            perm_seed = cfg.permutation_seed if cfg.permutation_seed is not None else cfg.seed
        tr_seq, tr_lab, _ = tasks.sequentialize_mnist(train, perm_seed)
        va_seq, va_lab, _ = tasks.sequentialize_mnist(val, perm_seed)
        val_batches = list(tasks.mnist_batches(va_seq, va_lab, cfg.batch_size))
        return TaskData(cfg, val_batches, val_batches[0], (tr_seq, tr_lab))
    if not cfg.corpus:
        raise ValueError("chars task needs a corpus path")
    corpus = tasks.load_char_corpus(cfg.corpus, cfg.max_len)
    train, val = corpus.split(0.05)
    if not len(train) or not len(val):
        train = val = corpus
    return TaskData(cfg, list(tasks.char_batches(val, cfg.batch_size)), None, train)


# ---------------------------------------------------------------- evaluation

def evaluate(model: RnnModel, batches, metric: str) -> float:
    """Accuracy over masked steps, bits per character, or final-step MSE."""
    num = den = 0.0
    for batch in batches:
        outputs, _ = rnncell.forward(model, batch)
        mask = batch.loss_mask
        if metric == "accuracy":
            hit = outputs.argmax(axis=-1) == batch.targets
            num += float(np.sum(hit * (mask > 0)))
            den += float(np.sum(mask > 0))
        elif metric in ("bpc", "loss", "mse"):
            num += float(np.sum(mask * rnncell.step_losses(outputs, batch)))
            den += float(np.sum(mask))
        else:
            raise ValueError(f"unknown metric {metric!r}")
    value = num / den if den else float("nan")
    return value / math.log(2.0) if metric == "bpc" else value


# ---------------------------------------------------------------- one update

def compute_gradients(model: RnnModel, batch: Batch, cfg: ExperimentConfig):
    """Forward, loss (with regularizers) and all parameter gradients."""
    outputs, tape = rnncell.forward(model, batch)
    value = rnncell.loss(outputs, batch)
    W = tape.W
    extra_W = np.zeros_like(W)
    extra_s = None
    if cfg.lambda_orth:
        pen, g = spectral.soft_orthogonality_penalty(W, cfg.lambda_orth)
        value += pen
        extra_W += g
    decay = optim.apply_weight_decay(model, cfg.weight_decay)
    if decay:
        extra_W += decay.pop("W")
    if cfg.gamma_prior and model.factorized:
        pen, extra_s = spectral.gaussian_prior(model.transition.singular_values(), cfg.gamma_prior)
        value += pen
    grads = rnncell.backward(model, tape, batch, outputs, extra_W=extra_W, extra_s=extra_s)
    for name, g in decay.items():
        grads[name] = grads[name] + g
    params = model.parameters()
    grads = {k: v for k, v in grads.items() if k in params}
    return value, grads


def train_step(model: RnnModel, batch: Batch, cfg: ExperimentConfig, state: optim.OptimState) -> float:
    value, grads = compute_gradients(model, batch, cfg)
    if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise TrainingDiverged(f"non-finite loss or gradient (loss={value})")
    if state.clip_threshold is not None:
        grads = optim.clip_gradients(grads, state.clip_threshold)
    optim.apply_updates(model, grads, state, hard_orthogonal_W=cfg.transition == "orthogonal")
    return value


# ---------------------------------------------------------------- run state / checkpoints

@dataclass
class RunState:
    model: RnnModel
    optim_state: optim.OptimState
    data_rng: matcore.Rng
    epoch: int = 0
    iteration: int = 0
    history: list[dict] = field(default_factory=list)
    spectrum: diagnostics.SpectrumTrace = field(default_factory=diagnostics.SpectrumTrace)
    best: float | None = None
    best_epoch: int = 0
    epochs_to_threshold: int | None = None
    norm_bound_violations: int = 0


def _model_manifest(model: RnnModel) -> dict:
    tr = model.transition
    info = {
        "n_in": model.n_in, "n_hidden": model.n_hidden, "n_out": model.n_out,
        "nonlinearity": model.nonlinearity.kind, "alpha": model.nonlinearity.alpha,
        "alpha_trainable": model.nonlinearity.trainable, "preact_gain": model.preact_gain,
        "factorized": model.factorized,
    }
    if model.factorized:
        info.update(margin=tr.margin, spectrum_mode=tr.mode)
    return info


def _model_tensors(model: RnnModel) -> dict[str, np.ndarray]:
    t = {"W_in": model.W_in, "b": model.b, "W_out": model.W_out, "b_out": model.b_out, "h0": model.h0}
    if model.factorized:
        t.update(U=model.transition.U, V=model.transition.V, p=model.transition.p)
    else:
        t["W"] = model.transition
    return t


def model_from_checkpoint(info: dict, tensors: dict[str, np.ndarray]) -> RnnModel:
    try:
        if info["factorized"]:
            tr = spectral.FactorizedTransition(tensors["U"], tensors["V"], tensors["p"],
                                               info["margin"], info["spectrum_mode"])
        else:
            tr = tensors["W"]
        nl = Nonlinearity(info["nonlinearity"], info["alpha"], info["alpha_trainable"])
        model = RnnModel(tensors["W_in"], tr, tensors["b"], tensors["W_out"], tensors["b_out"],
                         nl, info["preact_gain"], tensors["h0"])
    except KeyError as exc:
        raise checkpoint.CheckpointError(f"checkpoint is missing {exc}") from None
    if (model.n_in, model.n_hidden, model.n_out) != (info["n_in"], info["n_hidden"], info["n_out"]):
        raise checkpoint.CheckpointError("tensor shapes disagree with the manifest")
    return model


def save_checkpoint(path, run: RunState, cfg: ExperimentConfig | None = None):
    """Model, optimizer accumulators, data stream position and run history."""
    st = run.optim_state
    manifest = {
        "config": cfg.to_dict() if cfg is not None else None,
        "model": _model_manifest(run.model),
        "optim": {k: getattr(st, k) for k in ("euclidean_lr", "geodesic_lr", "spectrum_lr", "rho",
                                               "eps", "clip_threshold", "weight_decay", "method")},
        "rng": run.data_rng.get_state(),
        "epoch": run.epoch, "iteration": run.iteration, "history": run.history,
        "spectrum": [list(r) for r in run.spectrum.rows],
        "best": run.best, "best_epoch": run.best_epoch,
        "epochs_to_threshold": run.epochs_to_threshold,
        "norm_bound_violations": run.norm_bound_violations,
    }
    tensors = {f"model/{k}": v for k, v in _model_tensors(run.model).items()}
    tensors.update({f"acc/{k}": v for k, v in st.accumulators.items()})
    return checkpoint.write_checkpoint(path, manifest, tensors)


def load_checkpoint(path) -> tuple[RunState, ExperimentConfig | None]:
    manifest, tensors = checkpoint.read_checkpoint(path)
    model = model_from_checkpoint(manifest["model"], {k[6:]: v for k, v in tensors.items()
                                                        if k.startswith("model/")})
    st = optim.OptimState(**manifest["optim"])
    params = model.parameters()
    for k, v in tensors.items():
        if k.startswith("acc/"):
            name = k[4:]
            if name not in params or params[name].shape != v.shape:
                raise checkpoint.CheckpointError(f"accumulator {name!r} does not match the model")
            st.accumulators[name] = v
    rng = matcore.Rng()
    rng.set_state(manifest["rng"])
    run = RunState(model, st, rng, manifest["epoch"], manifest["iteration"], manifest["history"],
                   diagnostics.SpectrumTrace([tuple(r) for r in manifest["spectrum"]]),
                   manifest["best"], manifest["best_epoch"], manifest["epochs_to_threshold"],
                   manifest["norm_bound_violations"])
    cfg = ExperimentConfig(**manifest["config"]) if manifest.get("config") else None
    return run, cfg


# ---------------------------------------------------------------- experiment

def _improved(metric: str, value: float, best: float | None) -> bool:
    if best is None:
        return True
    return value > best if HIGHER_IS_BETTER[metric] else value < best


def _meets(metric: str, value: float, threshold: float | None) -> bool:
    if threshold is None:
        return False
    return value >= threshold if HIGHER_IS_BETTER[metric] else value < threshold


def _write_metrics(path: Path, history: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_metric", "val_loss"])
        for h in history:
            w.writerow([h["epoch"], format(h["train_loss"], ".17g"), format(h["val_metric"], ".17g"),
                        format(h["val_loss"], ".17g")])


def _audit_spectrum(model: RnnModel) -> None:
    if not model.factorized:
        return
    tr = model.transition
    s = tr.singular_values()
    if tr.mode == "sigmoid" and not np.all((s > 1 - tr.margin) & (s < 1 + tr.margin)):
        log.warning("singular values left the margin interval: [%g, %g]", s.min(), s.max())


def init_run(cfg: ExperimentConfig) -> RunState:
    root = matcore.Rng(cfg.seed)
    model = build_model(cfg, root.spawn(STREAM_INIT))
    run = RunState(model, build_optim_state(cfg), root.spawn(STREAM_DATA))
    diagnostics.record_spectrum(model.transition, run.spectrum, 0)
    return run


def run_experiment(cfg: ExperimentConfig, resume: str | Path | None = None,
                   stop_after_epoch: int | None = None) -> dict:
    """Train according to ``cfg`` and write artifacts to ``cfg.out_dir``.

    Artifacts: ``config.resolved``, ``metrics.csv``, ``timing.csv``,
    ``spectrum.csv``, optional ``grad_norms*.csv`` and ``checkpoint.srnn``.
    ``stop_after_epoch`` halts early (used to produce resumable checkpoints).
    """
    out = Path(cfg.out_dir) if cfg.out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved").write_text(cfg.to_text())
    data = load_task_data(cfg)
    if resume is not None:
        run, _ = load_checkpoint(resume)
    else:
        run = init_run(cfg)
    model, state = run.model, run.optim_state
    metric = METRIC[cfg.task]
    threshold = cfg.resolved_threshold
    grid = diagnostics.GradNormGrid()
    timing = []
    t_start = time.perf_counter()
    stale = run.epoch - run.best_epoch

    def diagnose():
        if data.probe is None:
            return
        if cfg.grad_norms:
            diagnostics.record_grad_norms(model, data.probe, grid, run.iteration)
        if cfg.check_norm_bound:
            _, tape = rnncell.forward(model, data.probe)
            bad = diagnostics.check_norm_bound(model, tape)
            run.norm_bound_violations += len(bad)

    if run.iteration == 0:
        diagnose()
    while run.epoch < cfg.epochs:
        if stop_after_epoch is not None and run.epoch >= stop_after_epoch:
            break
        losses = []
        for batch in data.epoch(run.data_rng):
            try:
                losses.append(train_step(model, batch, cfg, state))
            except TrainingDiverged:
                if out is not None:
                    save_checkpoint(out / "diverged.srnn", run, cfg)
                raise
            run.iteration += 1
            if cfg.diag_every and run.iteration % cfg.diag_every == 0:
                diagnose()
        run.epoch += 1
        val_metric = evaluate(model, data.val, metric)
        val_loss = evaluate(model, data.val, "loss")
        run.history.append({"epoch": run.epoch, "train_loss": float(np.mean(losses)) if losses else float("nan"),
                            "val_metric": val_metric, "val_loss": val_loss})
        timing.append((run.epoch, time.perf_counter() - t_start))
        diagnostics.record_spectrum(model.transition, run.spectrum, run.epoch)
        _audit_spectrum(model)
        log.info("epoch %d loss %.5f val %s %.5f", run.epoch, run.history[-1]["train_loss"], metric, val_metric)
        if run.epochs_to_threshold is None and _meets(metric, val_metric, threshold):
            run.epochs_to_threshold = run.epoch
        if _improved(metric, val_metric, run.best):
            run.best, run.best_epoch, stale = val_metric, run.epoch, 0
        else:
            stale += 1
        if cfg.checkpoint_every and out is not None and run.epoch % cfg.checkpoint_every == 0:
            save_checkpoint(out / "checkpoint.srnn", run, cfg)
        if cfg.stop_at_threshold and run.epochs_to_threshold is not None:
            break
        if cfg.patience is not None and stale >= cfg.patience:
            log.info("early stop at epoch %d", run.epoch)
            break

    if out is not None:
        _write_metrics(out / "metrics.csv", run.history)
        with (out / "timing.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "wall_seconds"])
            w.writerows((e, f"{s:.3f}") for e, s in timing)
        diagnostics.export_csv(run.spectrum, out / "spectrum.csv")
        if grid.raw:
            diagnostics.export_csv(grid, out / "grad_norms.csv")
            diagnostics.export_csv(grid, out / "grad_norms_normalized.csv", normalize="sum")
            diagnostics.export_csv(grid, out / "grad_norms_unitmax.csv", normalize="max")
        save_checkpoint(out / "checkpoint.srnn", run, cfg)
    return {
        "epochs": run.epoch,
        "iterations": run.iteration,
        "metric": metric,
        "final_val_metric": run.history[-1]["val_metric"] if run.history else None,
        "best_val_metric": run.best,
        "epochs_to_threshold": run.epochs_to_threshold,
        "history": run.history,
        "spectrum": run.spectrum,
        "grad_norms": grid,
        "norm_bound_violations": run.norm_bound_violations,
        "model": model,
        "run": run,
    }
