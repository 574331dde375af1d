"""Command-line entry point: ``smlhsi <command> [flags]``.

Commands: gen-data, train, eval, gradcheck, map, sweep. Run configuration
comes from defaults, then an optional flat ``key=value`` file (--config),
then command-line flags, later sources winning. Every file a command
writes goes under --out.
"""
import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import data, evaluation, experiment, network, sml
from .numerics import make_rng
from .train import write_history

log = logging.getLogger("smlhsi")

# RunConfig fields settable from the command line, with their flag spelling.
RUN_FLAGS = {
    "dataset": "--dataset", "patch_size": "--patch-size", "layers": "--layers",
    "alpha": "--alpha", "beta": "--beta", "lam": "--lam", "mu": "--mu",
    "learning_rate": "--lr", "iterations": "--iterations", "batch_size": "--batch-size",
    "momentum": "--momentum", "seed": "--seed", "out": "--out", "loss": "--loss",
    "per_class_train": "--per-class-train", "kappa": "--margin",
}


class UsageError(Exception):
    pass


def env_seed():
    raw = os.environ.get("SML_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"SML_SEED must be an integer, got {raw!r}") from None


def out_dir(path):
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    return d


def add_run_flags(p):
    p.add_argument("--config", help="flat key=value file of run settings")
    types = experiment.FIELD_TYPES
    for key, flag in RUN_FLAGS.items():
        kind = {"int": int, "float": float, "str": str}.get(types[key], types[key])
        p.add_argument(flag, dest=key, type=kind, default=None,
                       help=f"run setting {key} (default {getattr(experiment.RunConfig(), key)})")


def resolve_config(args):
    """Defaults < SML_SEED < config file < flags."""
    cfg = experiment.RunConfig()
    seed = env_seed()
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    if args.config:
        cfg = cfg.replace(**experiment.parse_config_text(Path(args.config).read_text()))
    flags = {k: getattr(args, k) for k in RUN_FLAGS if getattr(args, k) is not None}
    cfg = cfg.replace(**flags)
    if not cfg.dataset:
        raise UsageError("no dataset given (--dataset or dataset= in --config)")
    if not Path(cfg.dataset).is_file():
        raise UsageError(f"dataset {cfg.dataset} does not exist")
    return cfg.validate()


# --- commands ---------------------------------------------------------------

def cmd_gen_data(args):
    if args.classes < 2:
        raise UsageError("--classes must be at least 2 (SML needs two classes per batch)")
    seed = args.seed if args.seed is not None else env_seed()
    seed = experiment.BENCHMARK_CUBE["seed"] if seed is None else seed
    cube = data.generate_synthetic(
        make_rng(seed), args.height, args.width, args.bands, args.classes,
        region_scale=args.region_scale, spectral_sep=args.spectral_sep,
        noise_std=args.noise_std, unlabeled_fraction=args.unlabeled_fraction)
    path = out_dir(args.out) / args.name
    data.write_cube(cube, path)
    counts = np.bincount(cube.labels.ravel(), minlength=cube.num_classes + 1)[1:]
    print(f"wrote {path}: {cube.height}x{cube.width}x{cube.bands}, "
          f"{cube.num_classes} classes, pixels per class {counts.tolist()}")
    return 0


def cmd_train(args):
    cfg = resolve_config(args)
    cube = data.read_cube(cfg.dataset)
    out = out_dir(cfg.out)
    t0 = time.perf_counter()
    res = experiment.run_once(cube, cfg)
    network.save_checkpoint(res.net, out / "model.smln")
    write_history(out / "history.csv", res.history)
    data.write_split(out / "train_split.csv", res.train_coords, cube)
    data.write_split(out / "test_split.csv", res.test_coords, cube)
    evaluation.write_kv(out / "report.txt", res.report(cfg, cfg.seed))
    (out / "config.txt").write_text(experiment.format_config(cfg))
    print(f"{cfg.loss} seed {cfg.seed}: oa {res.oa:.4f} aa {res.aa:.4f} kappa {res.kappa:.4f} "
          f"fisher {res.fisher:.4f} ({time.perf_counter() - t0:.1f}s)")
    if res.sml_skipped:
        print(f"warning: SML term skipped on {res.sml_skipped} steps", file=sys.stderr)
    return 0


def load_pair(args):
    net = network.load_checkpoint(args.checkpoint)
    cube = data.read_cube(args.dataset)
    p = net.input_shape[0]
    if net.input_shape != (p, p, cube.bands):
        raise ValueError(f"checkpoint expects {net.input_shape[2]} bands, cube has {cube.bands}")
    return net, cube, p


def cmd_eval(args):
    net, cube, p = load_pair(args)
    if args.split:
        coords, _ = data.read_split(args.split)
    else:
        coords = cube.labeled_coords()
    truth = cube.labels[coords[:, 0], coords[:, 1]] - 1
    pred, feats = evaluation.predict_coords(net, cube, coords, p)
    cm = evaluation.confusion_matrix(truth, pred, cube.num_classes)
    m = evaluation.metrics(cm)
    out = out_dir(args.out)
    items = {"samples": len(coords), "oa": m.oa, "aa": m.aa, "kappa": m.kappa,
             "fisher_ratio": evaluation.fisher_ratio(feats, truth) if len(coords) else float("nan")}
    for k, acc in enumerate(m.per_class, 1):
        items[f"class{k}_acc"] = float(acc)
    if m.unsupported:
        items["unsupported_classes"] = " ".join(str(k + 1) for k in m.unsupported)
    evaluation.write_kv(out / "eval_report.txt", items)
    np.savetxt(out / "confusion.csv", cm, fmt="%d", delimiter=",")
    print(f"oa {m.oa!r} aa {m.aa!r} kappa {m.kappa!r}")
    return 0


def cmd_map(args):
    net, cube, p = load_pair(args)
    pred = evaluation.classify_cube(net, cube, p)
    out = out_dir(args.out)
    evaluation.render_map(pred, out / args.name)
    labeled = cube.labels > 0
    wrong = int((pred[labeled] != cube.labels[labeled]).sum())
    print(f"wrote {out / args.name}; {wrong} of {int(labeled.sum())} labeled pixels misclassified")
    if args.ground_truth:
        evaluation.render_map(cube.labels, out / "ground_truth.ppm")
    return 0


def cmd_gradcheck(args):
    seed = args.seed if args.seed is not None else env_seed()
    rng = make_rng(0 if seed is None else seed)
    weights = sml.LossWeights(args.alpha, args.beta, args.lam)
    worst = None
    lines = []
    t0 = time.perf_counter()
    for i in range(args.batches):
        n = int(rng.integers(8, 65))
        dim = int(rng.integers(2, 65))
        k = int(rng.integers(2, min(9, n) + 1))
        batch = sml.random_feature_batch(rng, n, dim, k)
        analytic = sml.sml_forward_backward(batch, weights).d_features
        if args.perturb_gradient:
            analytic = analytic.copy()
            analytic.flat[0] += 1e-3
        rep = sml.finite_difference_check(batch, weights, h=args.h, analytic=analytic)
        coord, a, num, err = rep.worst
        lines.append(f"batch {i:3d}  N={n:2d} d={dim:2d} K={k}  max_rel_err {err:.3e}")
        if worst is None or err > worst[0]:
            worst = (err, i, coord, a, num)
    err, i, coord, a, num = worst
    status = "PASS" if err <= args.threshold else "FAIL"
    lines.append(f"worst: batch {i} coord {tuple(int(c) for c in coord)} "
                 f"analytic {a!r} numeric {num!r} rel_err {err:.3e}")
    lines.append(f"{status}: max relative error {err:.3e} vs threshold {args.threshold:g} "
                 f"(h={args.h:g}, {args.batches} batches)")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    print(f"gradcheck took {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    if args.out:
        (out_dir(args.out) / "gradcheck.txt").write_text(text)
    return 0 if status == "PASS" else 1


def parse_int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def cmd_sweep(args):
    cfg = resolve_config(args)
    cube = data.read_cube(cfg.dataset)
    seeds = args.seeds if args.seeds else list(range(cfg.seed, cfg.seed + args.runs))
    if len(seeds) < 2:
        raise UsageError("a sweep needs at least two seeds")
    rows, skipped, _ = experiment.sample_size_sweep(cube, cfg, args.sizes, seeds,
                                                    methods=tuple(args.methods.split(",")))
    out = out_dir(cfg.out)
    experiment.write_sweep_csv(out / "sweep.csv", rows)
    for row in rows:
        print(f"size {row['size']:4d} {row['method']:12s} oa {row['oa_mean']:.4f} "
              f"+- {row['oa_std']:.4f}")
    for size, reason in skipped:
        print(f"skipped size {size}: {reason}", file=sys.stderr)
    return 0


# --- parser -----------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="smlhsi", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic hyperspectral cube")
    p.add_argument("--height", type=int, default=experiment.BENCHMARK_CUBE["height"])
    p.add_argument("--width", type=int, default=experiment.BENCHMARK_CUBE["width"])
    p.add_argument("--bands", type=int, default=experiment.BENCHMARK_CUBE["bands"])
    p.add_argument("--classes", type=int, default=experiment.BENCHMARK_CUBE["classes"])
    p.add_argument("--region-scale", type=int, default=experiment.BENCHMARK_CUBE["region_scale"])
    p.add_argument("--spectral-sep", type=float, default=experiment.BENCHMARK_CUBE["spectral_sep"])
    p.add_argument("--noise-std", type=float, default=experiment.BENCHMARK_CUBE["noise_std"])
    p.add_argument("--unlabeled-fraction", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=None,
                   help=f"generator seed (else SML_SEED, else {experiment.BENCHMARK_CUBE['seed']})")
    p.add_argument("--out", default="out")
    p.add_argument("--name", default="cube.hsc")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model and evaluate it on the held-out split")
    add_run_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, help_ in [("eval", cmd_eval, "metrics of a checkpoint on a cube"),
                              ("map", cmd_map, "render a classification map")]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--dataset", required=True)
        p.add_argument("--out", default="out")
        if name == "eval":
            p.add_argument("--split", help="CSV of coordinates to score (default: all labeled)")
        else:
            p.add_argument("--name", default="map.ppm")
            p.add_argument("--ground-truth", action="store_true",
                           help="also write ground_truth.ppm")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="finite-difference check of the SML gradient")
    p.add_argument("--batches", type=int, default=50)
    p.add_argument("--h", type=float, default=1e-3, help="central-difference step")
    p.add_argument("--threshold", type=float, default=1e-5)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=0.01)
    p.add_argument("--lam", type=float, default=0.001)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--perturb-gradient", action="store_true",
                   help="add 1e-3 to one analytic entry per batch (harness self-test)")
    p.add_argument("--out", default=None, help="also write gradcheck.txt here")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="OA vs. training samples per class")
    add_run_flags(p)
    p.add_argument("--sizes", type=parse_int_list, default=[25, 50, 100, 200])
    p.add_argument("--seeds", type=parse_int_list, default=None,
                   help="explicit seed list (default: --runs seeds from the run seed)")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--methods", default=",".join(experiment.SWEEP_METHODS))
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as err:
        parser.error(str(err))
    except (ValueError, KeyError, OSError, data.CubeFormatError, network.CheckpointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
