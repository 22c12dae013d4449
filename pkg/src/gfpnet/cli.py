"""Command-line entry point: ``gfpnet <command> [options]``.

Options can also come from a ``--config`` file of ``key = value`` lines
(``#`` starts a comment); keys are option names with dashes or underscores.
Flags given on the command line win over the file.

Exit codes: 0 success, 1 runtime failure (one-line diagnostic on stderr),
2 bad usage.
"""

from __future__ import annotations

import argparse
import glob
import logging
import os
import sys
import time

from threadpoolctl import threadpool_limits

log = logging.getLogger("gfpnet")

# option name -> (type, default); None default means "required for this command"
_DEFAULTS = {
    "seed": (int, None),
    "threads": (int, 1),
    "iters": (int, 5),
    "epochs": (int, 1000),
    "batch_size": (int, 256),
    "learning_rate": (float, 1e-4),
    "lr_decay": (float, 0.92),
    "alpha": (float, 0.7),
    "val_fraction": (float, 0.1),
    "points": (int, 2048),
    "mls_radius": (float, 0.05),
    "n_views": (int, 4),
    "noise_sigma": (float, 0.01),
    "patches_per_view": (int, 64),
    "source_count": (int, 64),
    "template_count": (int, 64),
    "dropout": (float, 0.2),
    "toy_patches": (int, 1000),
    "toy_test_shapes": (int, 5),
}


class UsageError(Exception):
    pass


def read_config(path) -> dict:
    """Parse ``key = value`` lines; unknown keys are a usage error."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, value = (p.strip() for p in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in _DEFAULTS:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                out[key] = _DEFAULTS[key][0](value)
            except ValueError:
                raise UsageError(f"{path}:{lineno}: bad value for {key}: {value!r}") from None
    return out


def _opt(args, key):
    """Flag value, else config value, else default; a missing required value is a usage error."""
    v = getattr(args, key, None)
    if v is None:
        v = args.config_values.get(key)
    if v is None:
        v = _DEFAULTS[key][1]
    if v is None:
        raise UsageError(f"--{key.replace('_', '-')} is required for {args.command}")
    return v


def _seed(args) -> int:
    """Seed for commands where it is optional (patch subsampling only)."""
    v = args.seed if args.seed is not None else args.config_values.get("seed")
    return 0 if v is None else v


def _net_config(args):
    from .net import NetworkConfig

    return NetworkConfig(source_count=_opt(args, "source_count"), template_count=_opt(args, "template_count"),
                         dropout_p=_opt(args, "dropout"))


# ---------------------------------------------------------------------------
# commands


def cmd_build_gp(args) -> int:
    from .formats import read_ply
    from .gp import GpConfig, build_gp, save_gp

    paths = sorted(glob.glob(os.path.join(args.shapes, "*.ply")))
    if len(paths) < 2:
        raise RuntimeError(f"need ≥ 2 shapes in {args.shapes}, found {len(paths)}")
    shapes = [read_ply(p) for p in paths]
    cfg = GpConfig(target_point_count=_opt(args, "points"), mls_radius=_opt(args, "mls_radius"))
    gp = build_gp(args.class_name, shapes, cfg)
    save_gp(gp, args.out)
    print(f"wrote {args.out}: {len(gp)} points from {len(shapes)} shapes")
    return 0


def cmd_make_dataset(args) -> int:
    from .formats import read_ply
    from .gp import GpConfig, build_gp, load_gp
    from .pipeline import DatasetConfig, build_dataset, split_shapes
    from .toy import ToyConfig, make_toy_data, write_toy_dataset

    seed = _opt(args, "seed")
    dcfg = DatasetConfig(n_views=_opt(args, "n_views"), noise_sigma=_opt(args, "noise_sigma"),
                         patches_per_view=_opt(args, "patches_per_view"))
    net_cfg = _net_config(args)
    if args.toy:
        tcfg = ToyConfig(n_patches=_opt(args, "toy_patches"), n_test_shapes=_opt(args, "toy_test_shapes"))
        data = make_toy_data(seed, tcfg, dcfg, net_cfg)
        m = write_toy_dataset(data, args.out)
    else:
        if not args.shapes:
            raise UsageError("make-dataset needs --shapes DIR or --toy")
        classes = sorted(d for d in os.listdir(args.shapes) if os.path.isdir(os.path.join(args.shapes, d)))
        if not classes:
            raise RuntimeError(f"no class subdirectories in {args.shapes}")
        class_shapes, gps = {}, {}
        given = dict(kv.split("=", 1) for kv in (args.gp or []))
        for cls in classes:
            paths = sorted(glob.glob(os.path.join(args.shapes, cls, "*.ply")))
            class_shapes[cls] = [read_ply(p) for p in paths]
            if cls in given:
                gps[cls] = load_gp(given[cls])
            else:
                tr, _ = split_shapes(len(paths), seed, dcfg.train_fraction)
                gps[cls] = build_gp(cls, [class_shapes[cls][i] for i in tr],
                                    GpConfig(target_point_count=_opt(args, "points")))
        m = build_dataset(class_shapes, gps, args.out, dcfg, net_cfg, seed)
    print(f"wrote {os.path.join(args.out, 'manifest.tsv')}: {len(m.split('train'))} train, "
          f"{len(m.split('test'))} test entries")
    return 0


def cmd_train(args) -> int:
    from .formats import load_manifest
    from .metrics import load_training_arrays
    from .net import TrainConfig, save_checkpoint, train, write_loss_curve

    seed = _opt(args, "seed")
    m = load_manifest(args.manifest)
    s, t, lab = load_training_arrays(m, os.path.dirname(os.path.abspath(args.manifest)))
    cfg = _net_config(args)
    hyper = TrainConfig(learning_rate=_opt(args, "learning_rate"), batch_size=_opt(args, "batch_size"),
                        epochs=_opt(args, "epochs"), lr_decay=_opt(args, "lr_decay"),
                        alpha=_opt(args, "alpha"), val_fraction=_opt(args, "val_fraction"), seed=seed)

    def progress(epoch, tr, va):
        log.info("epoch %d train %.6f val %.6f", epoch, tr, va)

    res = train(s, t, lab, cfg, hyper, progress=progress)
    save_checkpoint(res.params, cfg, args.out)
    curve = args.curve or os.path.splitext(args.out)[0] + "_curve.tsv"
    write_loss_curve(res, curve)
    print(f"wrote {args.out} (best epoch {res.best_epoch}) and {curve}")
    return 0


def cmd_complete(args) -> int:
    from .formats import read_ply, write_ply
    from .gp import load_gp
    from .net import load_checkpoint
    from .pipeline import complete_shape

    params, cfg = load_checkpoint(args.ckpt)
    gp = load_gp(args.gp)
    obs = read_ply(args.obs)
    mgp = complete_shape(gp, obs, params, cfg, _opt(args, "iters"), threads=_opt(args, "threads"),
                         seed=_seed(args))
    write_ply(mgp, args.out)
    print(f"wrote {args.out}: {len(mgp)} points")
    return 0


def cmd_evaluate(args) -> int:
    from .formats import load_manifest
    from .metrics import run_benchmark
    from .net import load_checkpoint

    params, cfg = load_checkpoint(args.ckpt)
    m = load_manifest(args.manifest)
    rep = run_benchmark(m, os.path.dirname(os.path.abspath(args.manifest)), params, cfg,
                        _opt(args, "iters"), _opt(args, "threads"), not args.no_baselines, _seed(args))
    rep.write(args.out)
    summary = ", ".join(f"{k} {rep.mean_cd(k):.6g}" for k in rep.samples[0].cd)
    print(f"wrote {args.out}: mean CD {summary}")
    return 0


def _parse_list(text: str, sep: str) -> list:
    try:
        return [int(v) for v in text.split(sep) if v.strip()]
    except ValueError:
        raise UsageError(f"expected integers separated by {sep!r}: {text!r}") from None


def cmd_ablate(args) -> int:
    from dataclasses import replace

    from .formats import load_manifest
    from .metrics import ablation_sweep
    from .net import TrainConfig

    seed = _opt(args, "seed")
    layers = [_parse_list(block, ",") for block in args.layers.split(";") if block.strip()]
    iters = _parse_list(args.iter_counts, ",")
    m = load_manifest(args.manifest)
    hyper = TrainConfig(learning_rate=_opt(args, "learning_rate"), batch_size=_opt(args, "batch_size"),
                        epochs=_opt(args, "epochs"), lr_decay=_opt(args, "lr_decay"), seed=seed)
    cfg = replace(_net_config(args))
    _, text = ablation_sweep(layers, iters, m, os.path.dirname(os.path.abspath(args.manifest)), cfg, hyper,
                             _opt(args, "threads"))
    with open(args.out, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    sys.stdout.write(text)
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_all

    return 0 if run_all(print) else 1


COMMANDS = {
    "build-gp": cmd_build_gp,
    "make-dataset": cmd_make_dataset,
    "train": cmd_train,
    "complete": cmd_complete,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "selftest": cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="worker threads (results do not depend on it)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gfpnet", description="Generic-primitive shape completion.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("build-gp", parents=[common], help="average a directory of PLY shapes into a GP")
    s.add_argument("--shapes", required=True)
    s.add_argument("--class", dest="class_name", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--points", type=int)
    s.add_argument("--mls-radius", type=float)

    s = sub.add_parser("make-dataset", parents=[common], help="patches, labels, partial views and manifest")
    s.add_argument("--shapes", help="directory with one subdirectory of PLYs per class")
    s.add_argument("--toy", action="store_true", help="generate the sphere/ellipsoid toy family instead")
    s.add_argument("--gp", action="append", metavar="CLASS=PATH", help="use an existing GP for a class")
    s.add_argument("--out", required=True)
    for opt, typ in (("--points", int), ("--n-views", int), ("--noise-sigma", float),
                     ("--patches-per-view", int), ("--source-count", int), ("--template-count", int),
                     ("--dropout", float), ("--toy-patches", int), ("--toy-test-shapes", int)):
        s.add_argument(opt, type=typ)

    s = sub.add_parser("train", parents=[common], help="train on a manifest's train split")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", default="model.bin")
    s.add_argument("--curve", help="loss curve path (default: <out>_curve.tsv)")
    for opt, typ in (("--epochs", int), ("--batch-size", int), ("--learning-rate", float),
                     ("--lr-decay", float), ("--alpha", float), ("--val-fraction", float),
                     ("--source-count", int), ("--template-count", int), ("--dropout", float)):
        s.add_argument(opt, type=typ)

    s = sub.add_parser("complete", parents=[common], help="model a GP onto one observation")
    s.add_argument("--gp", required=True)
    s.add_argument("--obs", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--iters", type=int)
    s.add_argument("--out", required=True)

    s = sub.add_parser("evaluate", parents=[common], help="benchmark report on the test split")
    s.add_argument("--manifest", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--iters", type=int)
    s.add_argument("--out", default="report.tsv")
    s.add_argument("--no-baselines", action="store_true")

    s = sub.add_parser("ablate", parents=[common], help="encoder-width x iteration CD grid")
    s.add_argument("--manifest", required=True)
    s.add_argument("--layers", required=True, help='e.g. "64,128,1024;64,1024"')
    s.add_argument("--iter-counts", default="1,5")
    s.add_argument("--out", default="ablation.tsv")
    for opt, typ in (("--epochs", int), ("--batch-size", int), ("--learning-rate", float),
                     ("--lr-decay", float), ("--source-count", int), ("--template-count", int),
                     ("--dropout", float)):
        s.add_argument(opt, type=typ)

    sub.add_parser("selftest", parents=[common], help="oracle-equivalence and gradient-check suites")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse already printed usage
        return int(e.code) if e.code is not None else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.config_values = read_config(args.config) if args.config else {}
        threads = _opt(args, "threads")
        if threads < 1:
            raise UsageError("--threads must be >= 1")
        args.threads = threads
        start = time.process_time()
        # BLAS stays single-threaded so results never depend on its scheduling
        with threadpool_limits(limits=1):
            code = COMMANDS[args.command](args)
        log.info("%s took %.1f s CPU", args.command, time.process_time() - start)
        return code
    except UsageError as e:
        print(f"gfpnet {args.command}: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - one-line diagnostic, exit 1
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"gfpnet {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
