"""Command-line pipeline: synth, pretrain, train, eval, sweep, report.

Each stage is idempotent: its outputs are tagged with a digest of the
config sections that influence them, and a re-run with an unchanged
digest reuses the artifact instead of recomputing it. Stage commands
ensure their prerequisites, so `volmetric eval` runs the whole chain.
"""

import argparse
import contextlib
import json
import os
import time

from . import model as model_mod
from .config import ExperimentConfig
from .data import generate_synthetic, preset_paper_shaped, rare_classes, save_dataset
from .evaluation import EvalReport, evaluate_model
from .reporting import (format_table, read_curves_csv, render_curves,
                        render_per_class_recall, render_sweep, table_row,
                        write_curves_csv, write_sweep_csv)
from .training import (acquire_dataset, apply_augmentation, run_pretrain,
                       run_train)

_LOSS_TABLE_LABEL = {"none": "-", "ntxent": "NT-Xent", "batch_all": "BATriplet",
                     "batch_hard": "BHTriplet", "cross_entropy": "CrossEntropy"}


@contextlib.contextmanager
def _dir_lock(exp_dir):
    os.makedirs(exp_dir, exist_ok=True)
    lock = os.path.join(exp_dir, ".lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise SystemExit(f"experiment directory {exp_dir} is locked "
                         f"(remove {lock} if no other run owns it)")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.remove(lock)


def _digest_matches(path, digest):
    try:
        with open(path) as f:
            return f.read().strip() == digest
    except OSError:
        return False


def _write_digest(path, digest):
    with open(path, "w") as f:
        f.write(digest + "\n")


def experiment_dir(cfg, out):
    d = os.path.join(out, cfg.experiment_name())
    os.makedirs(d, exist_ok=True)
    with open(os.path.join(d, "config.json"), "w") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
    return d


def _record_timing(exp_dir, stage, seconds):
    path = os.path.join(exp_dir, "timings.json")
    timings = {}
    if os.path.exists(path):
        with open(path) as f:
            timings = json.load(f)
    timings[stage] = round(seconds, 3)
    with open(path, "w") as f:
        json.dump(timings, f, indent=2, sort_keys=True)


def ensure_pretrain(cfg, dataset, exp_dir):
    """Pre-trained params, reusing the checkpoint when the digest matches."""
    if cfg.pretrain["loss"] == "none":
        return None
    ckpt = os.path.join(exp_dir, "pretrain.ckpt")
    digest_file = os.path.join(exp_dir, "pretrain.digest")
    digest = cfg.stage_digest("pretrain")
    if os.path.exists(ckpt) and _digest_matches(digest_file, digest):
        return model_mod.load_checkpoint(ckpt)
    t0 = time.monotonic()
    epoch_dir = os.path.join(exp_dir, "pretrain_epochs")
    os.makedirs(epoch_dir, exist_ok=True)

    def save_epoch(epoch, params):
        model_mod.save_checkpoint(
            params, os.path.join(epoch_dir, f"epoch_{epoch:03d}.ckpt"))

    params, losses = run_pretrain(cfg, dataset, checkpoint_every=1,
                                  checkpoint_fn=save_epoch)
    model_mod.save_checkpoint(params, ckpt)
    with open(os.path.join(exp_dir, "pretrain_losses.csv"), "w") as f:
        f.write("epoch,loss\n")
        f.writelines(f"{i + 1},{l:.6f}\n" for i, l in enumerate(losses))
    _write_digest(digest_file, digest)
    _record_timing(exp_dir, "pretrain", time.monotonic() - t0)
    return params


def ensure_train(cfg, dataset, exp_dir):
    ckpt = os.path.join(exp_dir, "train_best.ckpt")
    digest_file = os.path.join(exp_dir, "train.digest")
    digest = cfg.stage_digest("train")
    if os.path.exists(ckpt) and _digest_matches(digest_file, digest):
        return model_mod.load_checkpoint(ckpt)
    init = ensure_pretrain(cfg, dataset, exp_dir)
    t0 = time.monotonic()
    best, curve = run_train(cfg, dataset, init_from=init)
    model_mod.save_checkpoint(best, ckpt)
    write_curves_csv(curve, os.path.join(exp_dir, "curves.csv"))
    _write_digest(digest_file, digest)
    _record_timing(exp_dir, "train", time.monotonic() - t0)
    return best


def ensure_eval(cfg, dataset, exp_dir, checkpoint=None):
    report_path = os.path.join(exp_dir, "report.json")
    digest_file = os.path.join(exp_dir, "eval.digest")
    digest = cfg.stage_digest("eval")
    if checkpoint is None and os.path.exists(report_path) \
            and _digest_matches(digest_file, digest):
        with open(report_path) as f:
            return EvalReport.from_json(f.read())
    if checkpoint is not None:
        params = model_mod.load_checkpoint(checkpoint)
    else:
        params = ensure_train(cfg, dataset, exp_dir)
    t0 = time.monotonic()
    eval_ds = apply_augmentation(cfg, dataset)
    report = evaluate_model(
        params, eval_ds, k=cfg.eval["k"], rare_set=rare_classes(dataset),
        rank_ks=tuple(cfg.eval["rank_ks"]),
        config={"experiment": cfg.experiment_name(),
                "config_digest": cfg.digest(), "seed": cfg.seed})
    with open(report_path, "w") as f:
        f.write(report.to_json())
    row = table_row(report,
                    _LOSS_TABLE_LABEL[cfg.pretrain["loss"]],
                    "Yes" if cfg.augment["enabled"] else "-",
                    _LOSS_TABLE_LABEL[cfg.train["loss"]])
    with open(os.path.join(exp_dir, "report.txt"), "w") as f:
        f.write(format_table([row]))
    _write_digest(digest_file, digest)
    _record_timing(exp_dir, "eval", time.monotonic() - t0)
    return report


def _load_config(args):
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        d = cfg.to_dict()
        d["seed"] = args.seed
        cfg = ExperimentConfig.from_dict(d)
    return cfg


# --- subcommand entry points -----------------------------------------------

def cmd_synth(args):
    if args.preset:
        if args.scale <= 0:
            raise SystemExit("--scale must be positive")
        sizes = preset_paper_shaped(args.scale)
    elif args.class_sizes:
        sizes = [int(x) for x in args.class_sizes.split(",")]
    else:
        raise SystemExit("synth needs --preset or --class-sizes")
    shape = tuple(int(x) for x in args.shape.split("x"))
    ds = generate_synthetic(sizes, shape=shape, seed=args.seed,
                            separation=args.separation,
                            rare_threshold=args.rare_threshold)
    path = save_dataset(ds, args.out)
    rare = rare_classes(ds)
    print(f"wrote {len(ds.samples)} samples, {ds.class_count} classes "
          f"({len(rare)} rare) to {path}")


def cmd_pretrain(args):
    cfg = _load_config(args)
    dataset = acquire_dataset(cfg)
    exp_dir = experiment_dir(cfg, args.out)
    with _dir_lock(exp_dir):
        ensure_pretrain(cfg, dataset, exp_dir)
    print(f"pretrain checkpoint in {exp_dir}")


def cmd_train(args):
    cfg = _load_config(args)
    dataset = acquire_dataset(cfg)
    exp_dir = experiment_dir(cfg, args.out)
    with _dir_lock(exp_dir):
        ensure_train(cfg, dataset, exp_dir)
    print(f"trained checkpoint in {exp_dir}")


def cmd_eval(args):
    cfg = _load_config(args)
    dataset = acquire_dataset(cfg)
    exp_dir = experiment_dir(cfg, args.out)
    with _dir_lock(exp_dir):
        ensure_eval(cfg, dataset, exp_dir, checkpoint=args.checkpoint)
    with open(os.path.join(exp_dir, "report.txt")) as f:
        print(f.read(), end="")


_SWEEP_AXES = {"margin": ("train", "margin"),
               "embed_dim": ("train", "embed_dim"),
               "pretrain_epochs": ("pretrain", "epochs")}


def cmd_sweep(args):
    base = _load_config(args)
    section, key = _SWEEP_AXES[args.axis]
    values = [float(v) if args.axis == "margin" else int(v)
              for v in args.values.split(",")]
    rows = []
    failures = {}
    for value in values:
        d = base.to_dict()
        d[section][key] = value
        cfg = ExperimentConfig.from_dict(d)
        sub_out = os.path.join(args.out, f"sweep-{args.axis}",
                               f"{args.axis}={value}")
        try:
            dataset = acquire_dataset(cfg)
            exp_dir = experiment_dir(cfg, sub_out)
            with _dir_lock(exp_dir):
                report = ensure_eval(cfg, dataset, exp_dir)
            rows.append((value, report))
        except Exception as e:  # noqa: BLE001 - sweep must continue
            failures[str(value)] = str(e)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "sweep.csv")
    write_sweep_csv(rows, csv_path)
    if failures:
        with open(os.path.join(args.out, "sweep_failures.json"), "w") as f:
            json.dump(failures, f, indent=2, sort_keys=True)
    print(f"wrote {csv_path} ({len(rows)} rows, {len(failures)} failures)")


def cmd_report(args):
    """Render figures and print the results table for finished runs."""
    fig_dir = os.path.join(args.out, "figures")
    os.makedirs(fig_dir, exist_ok=True)
    rows = []
    made = []
    for root, _, files in os.walk(args.out):
        if "report.json" not in files:
            continue
        name = os.path.basename(root)
        with open(os.path.join(root, "report.json")) as f:
            report = EvalReport.from_json(f.read())
        with open(os.path.join(root, "config.json")) as f:
            cfg = ExperimentConfig.from_dict(json.load(f))
        rows.append(table_row(report,
                              _LOSS_TABLE_LABEL[cfg.pretrain["loss"]],
                              "Yes" if cfg.augment["enabled"] else "-",
                              _LOSS_TABLE_LABEL[cfg.train["loss"]]))
        png = os.path.join(fig_dir, f"{name}-per-class-recall.png")
        render_per_class_recall(report, png)
        made.append(png)
        curves = os.path.join(root, "curves.csv")
        if os.path.exists(curves):
            png = os.path.join(fig_dir, f"{name}-curves.png")
            render_curves(read_curves_csv(curves), png)
            made.append(png)
    sweep_csv = os.path.join(args.out, "sweep.csv")
    if os.path.exists(sweep_csv):
        png = os.path.join(fig_dir, "sweep.png")
        render_sweep(sweep_csv, png)
        made.append(png)
    if rows:
        print(format_table(rows), end="")
    for png in made:
        print(f"figure: {png}")
    if not rows and not made:
        raise SystemExit(f"no reports found under {args.out}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="volmetric",
        description="metric-learning pipeline on synthetic volumetric data")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="experiment JSON")
            p.add_argument("--seed", type=int, default=None,
                           help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=1,
                       help="accepted for compatibility; execution is sequential")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--preset", choices=["paper-shaped"], default=None)
    p.add_argument("--scale", type=float, default=0.25)
    p.add_argument("--class-sizes", default=None,
                   help="comma-separated per-class sample counts")
    p.add_argument("--shape", default="32x32x8")
    p.add_argument("--separation", default="easy",
                   choices=["easy", "medium", "hard"])
    p.add_argument("--rare-threshold", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="contrastive pre-training stage")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="supervised training stage")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate on the test split")
    common(p)
    p.add_argument("--checkpoint", default=None,
                   help="evaluate this checkpoint instead of the trained one")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run the pipeline across an axis")
    common(p)
    p.add_argument("--axis", required=True, choices=sorted(_SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="render figures and the results table")
    common(p, config=False)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
