"""Command line entry point: ``srnn train | evaluate | gen-data | diagnose``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, diagnostics, rnncell, tasks, trainer
from .config import TASKS, ConfigError, parse_config
from .matcore import Rng


def _cmd_train(args) -> int:
    cfg = parse_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out_dir"] = args.out
    if args.epochs is not None:
        changes["epochs"] = args.epochs
    cfg = cfg.replace(**changes) if changes else cfg
    result = trainer.run_experiment(cfg, resume=args.resume, stop_after_epoch=args.stop_after_epoch)
    summary = {k: result[k] for k in ("epochs", "iterations", "metric", "final_val_metric",
                                      "best_val_metric", "epochs_to_threshold", "norm_bound_violations")}
    print(json.dumps(summary, indent=2))
    return 0


def _checkpoint_config(args):
    run, cfg = trainer.load_checkpoint(args.checkpoint)
    if cfg is None:
        raise ConfigError("checkpoint carries no config; pass a config-bearing checkpoint")
    changes = {"out_dir": None}
    for key in ("task", "T", "seed", "mnist_images", "mnist_labels", "corpus"):
        value = getattr(args, key, None)
        if value is not None:
            changes[key] = value
    return run, cfg.replace(**changes)


def _cmd_evaluate(args) -> int:
    run, cfg = _checkpoint_config(args)
    if trainer.TASK_SHAPES[cfg.task] != (run.model.n_in, run.model.n_out):
        raise ConfigError(f"model shape {run.model.n_in}->{run.model.n_out} does not fit task {cfg.task}")
    if args.batches is not None:
        cfg = cfg.replace(val_batches=args.batches)
    data = trainer.load_task_data(cfg)
    metric = trainer.METRIC[cfg.task]
    out = {"task": cfg.task, "metric": metric,
           "value": trainer.evaluate(run.model, data.val, metric),
           "loss": trainer.evaluate(run.model, data.val, "loss")}
    print(json.dumps(out, indent=2))
    return 0


def _cmd_gen_data(args) -> int:
    rng = Rng(args.seed)
    if args.task == "copy":
        batch = tasks.gen_copy_batch(tasks.CopySpec(args.T), args.batch, rng)
    else:
        batch = tasks.gen_adding_batch(tasks.AddingSpec(args.T), args.batch, rng)
    np.savez(args.out, inputs=batch.inputs, targets=batch.targets, loss_mask=np.asarray(batch.loss_mask))
    print(f"wrote {args.task} batch {batch.inputs.shape} to {args.out}")
    return 0


def _cmd_diagnose(args) -> int:
    run, cfg = _checkpoint_config(args)
    model = run.model
    out_dir = Path(args.out) if args.out else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    report = {}
    if args.spectrum or not args.grad_norms:
        s = diagnostics.current_singular_values(model.transition)
        mean, std, lo, hi = diagnostics.spectrum_stats(s)
        report["spectrum"] = {"mean": mean, "std": std, "min": lo, "max": hi}
        if out_dir is not None:
            trace = diagnostics.SpectrumTrace(list(run.spectrum.rows))
            diagnostics.export_csv(trace, out_dir / "spectrum.csv")
    if args.grad_norms:
        data = trainer.load_task_data(cfg)
        probe = data.probe if data.probe is not None else data.val[0]
        probe = trainer.last_step_probe(probe)
        grid = diagnostics.GradNormGrid()
        row = diagnostics.record_grad_norms(model, probe, grid, run.iteration)
        report["grad_norms"] = {"T": len(row), "first": float(row[0]), "last": float(row[-1]),
                                "ratio_first_last": float(row[0] / row[-1]) if row[-1] else None}
        _, tape = rnncell.forward(model, probe)
        report["norm_bound_violations"] = len(diagnostics.check_norm_bound(model, tape))
        if out_dir is not None:
            diagnostics.export_csv(grid, out_dir / "grad_norms.csv")
            diagnostics.export_csv(grid, out_dir / "grad_norms_normalized.csv", normalize="sum")
    print(json.dumps(report, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="srnn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stop-after-epoch", type=int, help="halt once this many epochs are done")
    p.set_defaults(func=_cmd_train)

    def add_checkpoint_args(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--task", choices=TASKS)
        p.add_argument("--T", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--mnist-images", dest="mnist_images")
        p.add_argument("--mnist-labels", dest="mnist_labels")
        p.add_argument("--corpus")

    p = sub.add_parser("evaluate", help="score a checkpoint on held-out data")
    add_checkpoint_args(p)
    p.add_argument("--batches", type=int, help="number of generated validation batches")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("gen-data", help="write a generated batch to an .npz file")
    p.add_argument("--task", choices=("copy", "adding"), required=True)
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--batch", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("diagnose", help="spectrum and gradient-norm report for a checkpoint")
    add_checkpoint_args(p)
    p.add_argument("--grad-norms", action="store_true")
    p.add_argument("--spectrum", action="store_true")
    p.add_argument("--out", help="directory for CSV exports")
    p.set_defaults(func=_cmd_diagnose)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, checkpoint.CheckpointError, tasks.DataFormatError, ValueError, OSError) as exc:
        print(f"srnn: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
