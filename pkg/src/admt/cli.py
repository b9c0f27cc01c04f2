"""Command-line entry point: dataset generation, training, evaluation,
and the ablation grid.

Every run directory is reproducible byte-for-byte from (config, seed):
all randomness flows from the config seed through named substreams and
no output file embeds timestamps.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import os
import sys

import numpy as np

from . import data as data_mod
from . import metrics as metrics_mod
from .config import ConfigError, RunConfig, config_from_dict, echo_config, load_config
from .model import SegModel, load_checkpoint, save_checkpoint
from .training import REPORT_COLUMNS, Trainer, TrainingError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; we reserve that
        raise UsageError(message)


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args):
    if args.classes < 2 or args.classes > 5:
        raise UsageError(f"--classes must be in 2..5, got {args.classes}")
    if args.size < 32:
        raise UsageError(f"--size must be >= 32, got {args.size}")
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    samples = data_mod.generate_dataset(args.seed, args.n, args.size, args.classes)
    data_mod.write_dataset(args.out, samples, args.classes, args.size)
    print(f"wrote {len(samples)} samples to {args.out}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# train


def _resolve_t_max(cfg, epoch_iters):
    if cfg.t_max == "half_epoch":
        return max(1, -(-epoch_iters // 2))
    return int(cfg.t_max)


def _setup_run(cfg):
    """Load data, split roles, build the sampler and trainer."""
    manifest = data_mod.load_manifest(cfg.dataset)
    samples = data_mod.load_samples(cfg.dataset, manifest)
    split = data_mod.split(manifest, cfg.labeled_fraction, cfg.seed)
    labeled = split.ids_with_role("labeled")
    unlabeled = split.ids_with_role("unlabeled")
    test = split.ids_with_role("test")
    spec = data_mod.BatchSpec(cfg.batch_size, cfg.unlabeled_ratio)
    sampler = data_mod.BatchSampler(labeled, unlabeled, spec, cfg.seed)
    t_max_iters = _resolve_t_max(cfg, sampler.epoch_iters)
    model = SegModel(1, manifest.num_classes)
    trainer = Trainer(
        model,
        cfg.seed,
        mode=cfg.mode,
        ensembling=cfg.ensembling if cfg.ensembling != "none" else "ccm",
        crop_size=cfg.crop_size,
        max_iters=cfg.max_iters,
        base_lr=cfg.base_lr,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        ema_decay=cfg.ema_decay,
        lambda_u_max=cfg.lambda_u_max,
        ramp_iters=cfg.ramp_iters,
        tau=cfg.tau,
        t_max_iters=t_max_iters,
    )
    resolved = {
        "epoch_iters": sampler.epoch_iters,
        "t_max_iters": t_max_iters,
        "n_labeled": len(labeled),
        "n_unlabeled": len(unlabeled),
        "n_test": len(test),
    }
    return manifest, samples, split, sampler, trainer, resolved


def _evaluate_params(model, params, samples, ids, num_classes):
    rows = []
    for sid in ids:
        s = samples[sid]
        logits = model.forward(params, s.image[None, None]).data
        pred = np.argmax(logits[0], axis=0)
        rows.extend(metrics_mod.evaluate_sample(sid, pred, s.mask, num_classes))
    return metrics_mod.aggregate(rows, num_classes)


def run_train(cfg, out_dir, quiet=False):
    """Full training run; returns the final test MetricReport."""
    os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
    manifest, samples, split, sampler, trainer, resolved = _setup_run(cfg)
    echo_config(cfg, resolved, os.path.join(out_dir, "config.echo.json"))

    ckpt_interval = max(1, cfg.max_iters // 10)
    log_path = os.path.join(out_dir, "train_log.csv")
    semi = cfg.mode != "sup_only"
    try:
        with open(log_path, "w", encoding="utf-8") as log:
            log.write(",".join(REPORT_COLUMNS) + "\n")
            for it in range(cfg.max_iters):
                labeled_ids, unlabeled_ids = sampler.next_batches()
                labeled_batch = [samples[i] for i in labeled_ids]
                unlabeled_batch = [samples[i] for i in unlabeled_ids] if semi else []
                report = trainer.step(labeled_batch, unlabeled_batch, it)
                log.write(report.csv_row() + "\n")
                if (it + 1) % ckpt_interval == 0:
                    save_checkpoint(
                        os.path.join(out_dir, "checkpoints", f"iter_{it + 1:06d}.ckpt"),
                        trainer.student,
                    )
                if not quiet and (it + 1) % max(1, cfg.max_iters // 10) == 0:
                    print(
                        f"[{cfg.mode}/{cfg.ensembling} seed={cfg.seed}] "
                        f"iter {it + 1}/{cfg.max_iters} "
                        f"loss_x={report.loss_x:.4f} loss_u={report.loss_u:.4f}",
                        file=sys.stderr,
                    )
    except TrainingError as e:
        # keep the last good student weights around for post-mortem use
        save_checkpoint(
            os.path.join(out_dir, "checkpoints", "student_last_good.ckpt"),
            trainer.student,
        )
        raise RuntimeError(f"training aborted: {e}") from e

    save_checkpoint(
        os.path.join(out_dir, "checkpoints", "student_final.ckpt"), trainer.student
    )
    report = _evaluate_params(
        trainer.model, trainer.student, samples, split.ids_with_role("test"),
        manifest.num_classes,
    )
    with open(os.path.join(out_dir, "eval.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(metrics_mod.metrics_csv_lines(report)) + "\n")
    return report


def _config_from_args(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "dataset", None):
        overrides["dataset"] = args.dataset
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as e:
        raise UsageError(str(e))
    except FileNotFoundError as e:
        raise UsageError(f"config not found: {e.filename}")
    if not cfg.dataset:
        raise UsageError("config must set a dataset path (or pass --dataset)")
    return cfg


def cmd_train(args):
    cfg = _config_from_args(args)
    report = run_train(cfg, args.out, quiet=args.quiet)
    print(f"final test mean dice: {report.mean_dice:.2f}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args):
    cfg = _config_from_args(args)
    manifest = data_mod.load_manifest(cfg.dataset)
    samples = data_mod.load_samples(cfg.dataset, manifest)
    split = data_mod.split(manifest, cfg.labeled_fraction, cfg.seed)
    ids = split.ids_with_role(args.split)
    if not ids:
        raise UsageError(f"split {args.split!r} is empty")
    model = SegModel(1, manifest.num_classes)
    params = load_checkpoint(args.checkpoint)
    if params.size != model.param_count:
        raise RuntimeError(
            f"checkpoint/model layout mismatch: expected {model.param_count} "
            f"parameters, checkpoint has {params.size}"
        )
    report = _evaluate_params(model, params, samples, ids, manifest.num_classes)
    lines = metrics_mod.metrics_csv_lines(report)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    else:
        print("\n".join(lines))
    return 0


# ---------------------------------------------------------------------------
# ablate


def _grid_cells(cfg, args):
    """(label, config) cells for the requested sweep."""
    cells = []
    if args.sweep == "modes":
        plan = [
            ("sup_only", "none"),
            ("mt_single_t1", "none"),
            ("mt_single_t2", "none"),
            ("admt_rpa_only", "avg"),
            ("admt_full", "ccm"),
        ]
        for mode, ens in plan:
            cells.append(
                (mode, dataclasses.replace(cfg, mode=mode, ensembling=ens).validated())
            )
    elif args.sweep == "ensembling":
        for ens in ("drop", "avg", "entropy", "ccm"):
            cells.append(
                (
                    f"admt_full/{ens}",
                    dataclasses.replace(cfg, mode="admt_full", ensembling=ens).validated(),
                )
            )
    elif args.sweep == "tau":
        for tau in args.tau_values:
            cells.append((f"tau={tau:g}", dataclasses.replace(cfg, tau=tau).validated()))
    elif args.sweep == "tmax":
        for t_max in args.tmax_values:
            label = f"tmax={t_max}"
            cells.append((label, dataclasses.replace(cfg, t_max=t_max).validated()))
    else:
        raise UsageError(f"unknown sweep {args.sweep!r}")
    return cells


def _run_cell(job):
    """One (cell, seed) training run; returns a result row. Top-level so it
    can cross a process boundary."""
    label, cfg_doc, seed, out_dir, quiet = job
    cfg = dataclasses.replace(config_from_dict(cfg_doc), seed=seed).validated()
    try:
        report = run_train(cfg, out_dir, quiet=quiet)
        per_class = {c: report.per_class[c]["dice"] for c in sorted(report.per_class)}
        return {
            "cell": label,
            "mode": cfg.mode,
            "ensembling": cfg.ensembling,
            "tau": cfg.tau,
            "t_max": str(cfg.t_max),
            "seed": seed,
            "dice_per_class": per_class,
            "mean_dice": report.mean_dice,
            "mean_hd95": report.mean_hd95,
            "status": "ok",
        }
    except Exception as e:  # record the failure, keep the grid going
        return {
            "cell": label,
            "mode": cfg.mode,
            "ensembling": cfg.ensembling,
            "tau": cfg.tau,
            "t_max": str(cfg.t_max),
            "seed": seed,
            "dice_per_class": {},
            "mean_dice": float("nan"),
            "mean_hd95": float("nan"),
            "status": f"failed: {e}",
        }


def _fmt(v):
    return "NA" if isinstance(v, float) and np.isnan(v) else f"{v:.12g}"


def ablate_csv_lines(rows, num_classes):
    classes = list(range(1, num_classes))
    header = ["cell", "mode", "ensembling", "tau", "t_max", "seed"]
    header += [f"dice_c{c}" for c in classes] + ["mean_dice", "mean_hd95", "status"]
    lines = [",".join(header)]

    def emit(row, seed_label):
        vals = [row["cell"], row["mode"], row["ensembling"], _fmt(row["tau"]),
                row["t_max"], seed_label]
        for c in classes:
            vals.append(_fmt(row["dice_per_class"].get(c, float("nan"))))
        vals += [_fmt(row["mean_dice"]), _fmt(row["mean_hd95"]), row["status"]]
        lines.append(",".join(vals))

    by_cell = {}
    for row in rows:
        emit(row, str(row["seed"]))
        by_cell.setdefault(row["cell"], []).append(row)
    for cell, cell_rows in by_cell.items():
        ok = [r for r in cell_rows if r["status"] == "ok"]
        agg = {
            "cell": cell,
            "mode": cell_rows[0]["mode"],
            "ensembling": cell_rows[0]["ensembling"],
            "tau": cell_rows[0]["tau"],
            "t_max": cell_rows[0]["t_max"],
            "dice_per_class": {
                c: float(np.mean([r["dice_per_class"][c] for r in ok]))
                for c in classes
                if ok and all(c in r["dice_per_class"] for r in ok)
            },
            "mean_dice": float(np.mean([r["mean_dice"] for r in ok])) if ok else float("nan"),
            "mean_hd95": float(np.mean([r["mean_hd95"] for r in ok])) if ok else float("nan"),
            "status": "ok" if len(ok) == len(cell_rows) else f"{len(cell_rows) - len(ok)} failed",
        }
        emit(agg, "mean")
    return lines


def run_ablation(cfg, out_dir, seeds, args):
    cells = _grid_cells(cfg, args)
    jobs = []
    for label, cell_cfg in cells:
        for seed in seeds:
            cell_dir = os.path.join(out_dir, label.replace("/", "_"), f"seed{seed}")
            os.makedirs(cell_dir, exist_ok=True)
            doc = dataclasses.asdict(cell_cfg)
            jobs.append((label, doc, seed, cell_dir, True))
    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_run_cell, jobs))
    else:
        rows = [_run_cell(job) for job in jobs]
    manifest = data_mod.load_manifest(cfg.dataset)
    lines = ablate_csv_lines(rows, manifest.num_classes)
    with open(os.path.join(out_dir, "ablate.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return rows


def cmd_ablate(args):
    cfg = _config_from_args(args)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated ints, got {args.seeds!r}")
    if not seeds:
        raise UsageError("--seeds must name at least one seed")
    if args.sweep == "tau" and not args.tau_values:
        raise UsageError("--sweep tau needs --tau-values")
    if args.sweep == "tmax" and not args.tmax_values:
        raise UsageError("--sweep tmax needs --tmax-values")
    rows = run_ablation(cfg, args.out, seeds, args)
    failed = [r for r in rows if r["status"] != "ok"]
    print(
        f"ablation grid: {len(rows) - len(failed)}/{len(rows)} runs ok",
        file=sys.stderr,
    )
    return 0


# ---------------------------------------------------------------------------
# argument plumbing


def _parse_tmax(value):
    if value == "half_epoch":
        return value
    return int(value)


def build_parser():
    parser = _Parser(prog="admt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=250)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="run one training configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dataset", default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--split", default="test", choices=["labeled", "unlabeled", "test"])
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dataset", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run a component/sweep grid")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--sweep", default="modes", choices=["modes", "ensembling", "tau", "tmax"])
    p.add_argument("--tau-values", type=float, nargs="*", default=None)
    p.add_argument("--tmax-values", type=_parse_tmax, nargs="*", default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dataset", default=None)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as e:  # runtime failure
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
