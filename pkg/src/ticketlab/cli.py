"""Command line front end.

Seven subcommands cover the stages of a run:

* ``train-dense``  train the dense network, save init/rewind/best/final.
* ``find-ticket``  derive pruning masks from a saved dense stage.
* ``retrain``      retrain one sparsity level from a mask file.
* ``pipeline``     the full dense -> masks -> retrain sweep in one go.
* ``diagnose``     top Hessian eigenvalue estimates for a checkpoint.
* ``landscape``    2-D loss surface grid around a checkpoint.
* ``report``       merge several run reports into one sparsity CSV.

Exit codes: 0 on success, 1 for validation problems (bad flags, bad
config, malformed files), 2 for runtime failures.  Each successful
command prints a single JSON summary line on stdout; progress chatter
goes to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .config import ConfigError, LOSS_NAMES, echo_config, parse_config
from .datasets import load_dataset
from .diagnostics import (
    CurvatureProbe,
    LandscapeGrid,
    landscape,
    probe_batches,
    top_eigenvalue,
)
from .models import ACTIVATION_KINDS, build_model, make_arch
from .report import (
    build_report,
    load_checkpoint,
    load_mask,
    load_report,
    save_checkpoint,
    save_mask,
    save_report,
    write_eigenvalue_csv,
    write_landscape_csv,
    write_metrics_csv,
    write_sparsity_csv,
)
from .training import (
    DenseStage,
    TrainResult,
    find_masks,
    retrain_level,
    run_pipeline,
    train_dense,
)


class UsageError(ValueError):
    """Bad command line arguments."""


class _Parser(argparse.ArgumentParser):
    # argparse exits the process on error; surface a ValueError instead
    # so main() can map it to exit code 1.
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True), flush=True)


def _ensure_out(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _load_config(args):
    cfg = parse_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _apply_tweak_flags(cfg, args):
    """Tweak flags layer on top of the config; they only switch things on."""
    changes = {}
    if getattr(args, "skips", False):
        changes["skips"] = True
    if getattr(args, "activation", None):
        changes["activation"] = args.activation
    if getattr(args, "rescale_init", False):
        changes["rescale"] = True
    if getattr(args, "loss", None):
        changes["loss"] = dataclasses.replace(cfg.loss, kind=LOSS_NAMES[args.loss])
    if getattr(args, "rewind", False):
        changes["rewind"] = True
    if changes:
        cfg = dataclasses.replace(cfg, **changes)
    return cfg


# ---------------------------------------------------------------------------
# artifact helpers

_DENSE_FILES = {
    "init": "dense_init.ltkt",
    "rewind": "dense_rewind.ltkt",
    "best": "dense_best.ltkt",
    "final": "dense_final.ltkt",
}


def _vanilla_spec(cfg, ds):
    return make_arch(cfg.arch, ds.input_shape, ds.num_classes)


def _save_dense_stage(outdir, cfg, ds, stage) -> None:
    model = build_model(_vanilla_spec(cfg, ds), cfg.seed)
    named = {
        "init": (stage.init_state, 0),
        "rewind": (stage.rewind_state, stage.rewind_epoch),
        "best": (stage.result.best_state, stage.result.best_epoch),
        "final": (stage.result.final_state, cfg.epochs),
    }
    for key, (state, epoch) in named.items():
        model.load_state(state)
        save_checkpoint(
            os.path.join(outdir, _DENSE_FILES[key]),
            model,
            epoch=epoch,
            seed=cfg.seed,
            dataset=cfg.dataset,
        )
    write_metrics_csv(os.path.join(outdir, "dense_metrics.csv"), stage.result.metrics)


def _load_dense_stage(dense_dir, cfg, ds):
    """Rebuild a DenseStage from saved checkpoints for staged runs."""
    states = {}
    epochs = {}
    spec = _vanilla_spec(cfg, ds)
    for key, fname in _DENSE_FILES.items():
        path = os.path.join(dense_dir, fname)
        if not os.path.exists(path):
            raise ConfigError(f"missing dense checkpoint: {path}")
        model, _, meta = load_checkpoint(path)
        if meta["arch_hash"] != spec.arch_hash():
            raise ConfigError(
                f"{path}: architecture does not match config "
                f"({meta['arch']['name']} vs {cfg.arch})"
            )
        if int(meta["seed"]) != cfg.seed:
            raise ConfigError(
                f"{path}: checkpoint seed {meta['seed']} does not match "
                f"config seed {cfg.seed}"
            )
        states[key] = model.state_dict()
        epochs[key] = int(meta["epoch"])
    result = TrainResult(
        metrics=[],
        best_val_accuracy=float("nan"),
        best_epoch=epochs["best"],
        best_state=states["best"],
        final_state=states["final"],
        checkpoints={},
        warnings=[],
    )
    return DenseStage(
        result=result,
        init_state=states["init"],
        rewind_state=states["rewind"],
        rewind_epoch=epochs["rewind"],
    )


def _mask_path(outdir, round_index: int) -> str:
    return os.path.join(outdir, f"mask_round_{round_index}.ltkt")


def _save_level(outdir, cfg, ds, level, mask) -> None:
    k = level.round_index
    write_metrics_csv(
        os.path.join(outdir, f"retrain_round_{k}_metrics.csv"),
        level.train_result.metrics,
    )
    spec = make_arch(
        cfg.arch,
        ds.input_shape,
        ds.num_classes,
        activation_kind=cfg.activation,
        injected_skips=cfg.skips,
    )
    model = build_model(spec, cfg.seed)
    model.load_state(level.train_result.best_state)
    save_checkpoint(
        os.path.join(outdir, f"retrain_round_{k}_best.ltkt"),
        model,
        epoch=level.train_result.best_epoch,
        seed=cfg.seed,
        mask=mask,
        dataset=cfg.dataset,
    )


def _write_pipeline_artifacts(outdir, cfg, ds, result, echo, partial) -> None:
    if result.dense is not None:
        _save_dense_stage(outdir, cfg, ds, result.dense)
    for i, (_, mask) in enumerate(result.masks):
        save_mask(_mask_path(outdir, i + 1), mask, meta={"round": i + 1})
    for level in result.levels:
        _, mask = result.masks[level.round_index - 1]
        _save_level(outdir, cfg, ds, level, mask)
    report = build_report(result, echo, partial=partial)
    save_report(os.path.join(outdir, "report.json"), report)
    write_sparsity_csv(os.path.join(outdir, "sparsity.csv"), [report], names=["run"])


# ---------------------------------------------------------------------------
# subcommands


def _cmd_train_dense(args) -> dict:
    cfg = _load_config(args)
    outdir = _ensure_out(args.out)
    ds = load_dataset(cfg.dataset)
    _progress(f"training dense {cfg.arch} on {cfg.dataset} ({cfg.epochs} epochs)")
    stage = train_dense(cfg, ds)
    _save_dense_stage(outdir, cfg, ds, stage)
    with open(os.path.join(outdir, "config.echo"), "w") as fh:
        fh.write(echo_config(cfg))
    return {
        "command": "train-dense",
        "status": "ok",
        "seed": cfg.seed,
        "best_epoch": stage.result.best_epoch,
        "best_val_accuracy": stage.result.best_val_accuracy,
        "rewind_epoch": stage.rewind_epoch,
        "warnings": stage.result.warnings,
        "out": outdir,
    }


def _cmd_find_ticket(args) -> dict:
    cfg = _load_config(args)
    outdir = _ensure_out(args.out)
    dense_dir = args.dense or outdir
    ds = load_dataset(cfg.dataset)
    stage = _load_dense_stage(dense_dir, cfg, ds)
    _progress(
        f"deriving masks: mode={cfg.prune.mode} rounds={cfg.prune.rounds} "
        f"per_round={cfg.prune.per_round_fraction}"
    )
    masks = find_masks(cfg, stage, ds)
    for i, (_, mask) in enumerate(masks):
        save_mask(_mask_path(outdir, i + 1), mask, meta={"round": i + 1})
    return {
        "command": "find-ticket",
        "status": "ok",
        "seed": cfg.seed,
        "rounds": len(masks),
        "sparsities": [sp for sp, _ in masks],
        "out": outdir,
    }


def _cmd_retrain(args) -> dict:
    cfg = _load_config(args)
    cfg = _apply_tweak_flags(cfg, args)
    outdir = _ensure_out(args.out)
    dense_dir = args.dense or outdir
    ds = load_dataset(cfg.dataset)
    stage = _load_dense_stage(dense_dir, cfg, ds)
    if args.mask:
        mask_file = args.mask
    elif args.round is not None:
        mask_file = _mask_path(dense_dir, args.round)
    else:
        raise UsageError("retrain: pass --mask FILE or --round K")
    mask, meta = load_mask(mask_file)
    round_index = args.round if args.round is not None else int(meta.get("round", 0))
    _progress(
        f"retraining round {round_index} at sparsity {mask.sparsity():.4f} "
        f"(activation={cfg.activation} skips={cfg.skips} loss={cfg.loss.kind})"
    )
    level = retrain_level(cfg, stage, mask, round_index, ds)
    _save_level(outdir, cfg, ds, level, mask)
    return {
        "command": "retrain",
        "status": "ok",
        "seed": cfg.seed,
        "round": round_index,
        "sparsity": level.sparsity,
        "best_val_accuracy": level.best_val_accuracy,
        "test_accuracy": level.test_accuracy,
        "collapsed": level.collapsed,
        "out": outdir,
    }


def _cmd_pipeline(args) -> dict:
    cfg = _load_config(args)
    cfg = _apply_tweak_flags(cfg, args)
    outdir = _ensure_out(args.out)
    ds = load_dataset(cfg.dataset)
    echo = echo_config(cfg)
    with open(os.path.join(outdir, "config.echo"), "w") as fh:
        fh.write(echo)

    def flush(partial_result):
        # Abort path: persist whatever completed, clearly marked partial.
        try:
            _write_pipeline_artifacts(outdir, cfg, ds, partial_result, echo, True)
            _emit(
                {
                    "command": "pipeline",
                    "status": "partial",
                    "seed": cfg.seed,
                    "levels_done": len(partial_result.levels),
                    "out": outdir,
                }
            )
        except Exception as exc:  # the original error matters more
            _progress(f"while flushing partial results: {exc}")

    result = run_pipeline(cfg, progress=_progress, flush=flush)
    _write_pipeline_artifacts(outdir, cfg, ds, result, echo, False)
    rows = [
        {
            "round": lv.round_index,
            "sparsity": lv.sparsity,
            "best_val_accuracy": lv.best_val_accuracy,
            "test_accuracy": lv.test_accuracy,
            "collapsed": lv.collapsed,
        }
        for lv in result.levels
    ]
    return {
        "command": "pipeline",
        "status": "ok",
        "seed": cfg.seed,
        "dense_test_accuracy": result.dense_test_accuracy,
        "levels": rows,
        "wall_clock": result.wall_clock,
        "out": outdir,
    }


def _cmd_diagnose(args) -> dict:
    outdir = _ensure_out(args.out)
    model, mask, meta = load_checkpoint(args.checkpoint)
    dataset_name = meta.get("dataset", "")
    if not dataset_name:
        raise ConfigError(
            f"{args.checkpoint}: checkpoint records no dataset; cannot "
            "build probe batches"
        )
    ds = load_dataset(dataset_name)
    batches = probe_batches(
        ds.x_pool,
        ds.y_pool,
        n=args.probe,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    probe = CurvatureProbe(batches=batches, seed=args.seed)
    _progress(
        f"estimating top eigenvalue over {len(batches)} batches "
        f"(epoch {meta['epoch']})"
    )
    res = top_eigenvalue(model, mask, probe)
    rows = [(int(meta["epoch"]), i, lam) for i, lam in enumerate(res.per_batch)]
    csv_path = os.path.join(outdir, "eigenvalues.csv")
    write_eigenvalue_csv(csv_path, rows)
    return {
        "command": "diagnose",
        "status": "ok",
        "checkpoint": args.checkpoint,
        "epoch": int(meta["epoch"]),
        "lambda_max": res.value,
        "per_batch": [float(v) for v in res.per_batch],
        "converged": res.converged,
        "out": csv_path,
    }


def _cmd_landscape(args) -> dict:
    outdir = _ensure_out(args.out)
    if args.resolution % 2 == 0:
        raise UsageError("landscape: --resolution must be odd")
    model, mask, meta = load_checkpoint(args.checkpoint)
    dataset_name = meta.get("dataset", "")
    if not dataset_name:
        raise ConfigError(
            f"{args.checkpoint}: checkpoint records no dataset; cannot "
            "build a probe batch"
        )
    ds = load_dataset(dataset_name)
    batch = probe_batches(
        ds.x_pool, ds.y_pool, n=1, batch_size=args.batch_size, seed=args.seed
    )[0]
    grid = LandscapeGrid(
        mode=args.mode,
        resolution=args.resolution,
        extents=(args.extent, args.extent),
        clamp=args.clamp,
    )
    _progress(f"sampling {args.resolution}x{args.resolution} {args.mode}-space grid")
    m = landscape(model, batch, grid, mask=mask, seed=args.seed)
    csv_path = os.path.join(outdir, "landscape.csv")
    write_landscape_csv(csv_path, m, grid)
    c = args.resolution // 2
    return {
        "command": "landscape",
        "status": "ok",
        "checkpoint": args.checkpoint,
        "mode": args.mode,
        "center_loss": float(m[c, c]),
        "min_loss": float(np.min(m)),
        "max_loss": float(np.max(m)),
        "out": csv_path,
    }


def _cmd_report(args) -> dict:
    outdir = _ensure_out(args.out)
    run_dirs = [d for d in args.runs.split(",") if d]
    if not run_dirs:
        raise UsageError("report: --runs needs at least one run directory")
    names = []
    reports = []
    for d in run_dirs:
        path = os.path.join(d, "report.json")
        if not os.path.exists(path):
            raise ConfigError(f"missing report: {path}")
        names.append(os.path.basename(os.path.normpath(d)) or d)
        reports.append(load_report(path))
    csv_path = os.path.join(outdir, "sparsity.csv")
    write_sparsity_csv(csv_path, reports, names=names)
    total = sum(len(r.rows) + 1 for r in reports)
    return {
        "command": "report",
        "status": "ok",
        "runs": names,
        "rows": total,
        "out": csv_path,
    }


# ---------------------------------------------------------------------------
# parser


def _add_config_flags(p) -> None:
    p.add_argument("--config", required=True, help="experiment config file")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", default=".", help="output directory")


def _add_tweak_flags(p) -> None:
    p.add_argument("--skips", action="store_true", help="inject identity skips")
    p.add_argument(
        "--activation",
        choices=sorted(ACTIVATION_KINDS),
        default=None,
        help="swap retraining activation",
    )
    p.add_argument(
        "--rescale-init",
        action="store_true",
        dest="rescale_init",
        help="layer-wise rescale of the sparse init",
    )
    p.add_argument(
        "--loss",
        choices=sorted(LOSS_NAMES),
        default=None,
        help="retraining loss",
    )
    p.add_argument(
        "--rewind",
        action="store_true",
        help="rewind to an early-epoch state instead of the init",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ticketlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train-dense", help="train the dense network")
    _add_config_flags(p)

    p = sub.add_parser("find-ticket", help="derive pruning masks")
    _add_config_flags(p)
    p.add_argument("--dense", default=None, help="directory with dense checkpoints")

    p = sub.add_parser("retrain", help="retrain one sparsity level")
    _add_config_flags(p)
    p.add_argument("--dense", default=None, help="directory with dense checkpoints")
    p.add_argument("--mask", default=None, help="mask archive to retrain from")
    p.add_argument("--round", type=int, default=None, help="mask round in --dense")
    _add_tweak_flags(p)

    p = sub.add_parser("pipeline", help="dense -> masks -> retrains, end to end")
    _add_config_flags(p)
    _add_tweak_flags(p)

    p = sub.add_parser("diagnose", help="top Hessian eigenvalue of a checkpoint")
    p.add_argument("--checkpoint", required=True, help="model archive")
    p.add_argument("--probe", type=int, default=10, help="number of probe batches")
    p.add_argument("--batch-size", type=int, default=128, dest="batch_size")
    p.add_argument("--seed", type=int, default=0, help="probe sampling seed")
    p.add_argument("--out", default=".", help="output directory")

    p = sub.add_parser("landscape", help="loss surface grid around a checkpoint")
    p.add_argument("--checkpoint", required=True, help="model archive")
    p.add_argument("--mode", choices=("weight", "input"), default="weight")
    p.add_argument("--resolution", type=int, default=21)
    p.add_argument("--extent", type=float, default=1.0)
    p.add_argument("--clamp", type=float, default=8.0)
    p.add_argument("--batch-size", type=int, default=128, dest="batch_size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".", help="output directory")

    p = sub.add_parser("report", help="merge run reports into one CSV")
    p.add_argument("--runs", required=True, help="comma-separated run directories")
    p.add_argument("--out", default=".", help="output directory")

    return parser


_COMMANDS = {
    "train-dense": _cmd_train_dense,
    "find-ticket": _cmd_find_ticket,
    "retrain": _cmd_retrain,
    "pipeline": _cmd_pipeline,
    "diagnose": _cmd_diagnose,
    "landscape": _cmd_landscape,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("ticketlab: pick a subcommand (see --help)")
        summary = _COMMANDS[args.command](args)
        _emit(summary)
        return 0
    except SystemExit as exc:  # argparse --help lands here with code 0
        code = exc.code if isinstance(exc.code, int) else 0
        return code
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr, flush=True)
        return 1
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr, flush=True)
        return 2
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr, flush=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
