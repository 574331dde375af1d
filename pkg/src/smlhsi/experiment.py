"""Run configuration and the train/evaluate pipeline shared by the CLI.

One integer seed fixes a whole run: it is split into independent streams
for the train/test split, weight init and batch sampling, so two runs with
the same seed but different losses see the same split, initial weights and
batch sequence (paired comparisons).
"""
import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from .data import SplitSpec, extract_patches, generate_synthetic, stratified_split
from .evaluation import confusion_matrix, fisher_ratio, mean_std, metrics, predict_coords
from .network import default_layers, format_layers, init_weights, parse_layers
from .numerics import SgdConfig, make_rng, spawn_rngs
from .sml import LossWeights
from .train import LOSSES, train

log = logging.getLogger(__name__)


# The "hard" synthetic benchmark: generator settings (also the gen-data
# defaults) and the training overrides used for softmax vs. SML comparisons.
BENCHMARK_CUBE = dict(height=80, width=80, bands=16, classes=6, region_scale=4,
                      spectral_sep=2.3, noise_std=1.0, seed=1)
BENCHMARK_RUN = dict(momentum=0.9, mu=0.05, iterations=800)


def benchmark_cube(**overrides):
    args = {**BENCHMARK_CUBE, **overrides}
    return generate_synthetic(make_rng(args["seed"]), args["height"], args["width"],
                              args["bands"], args["classes"], region_scale=args["region_scale"],
                              spectral_sep=args["spectral_sep"], noise_std=args["noise_std"])


@dataclass
class RunConfig:
    dataset: str = ""
    patch_size: int = 5
    layers: str = format_layers(default_layers())
    alpha: float = 1.0
    beta: float = 0.01
    lam: float = 0.001
    mu: float = 0.0002
    learning_rate: float = 0.001
    iterations: int = 5000
    batch_size: int = 64
    momentum: float = 0.0
    seed: int = 0
    out: str = "out"
    loss: str = "softmax+sml"
    per_class_train: int = 200
    kappa: float = 1.0

    def validate(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ValueError("patch_size must be odd")
        if self.per_class_train < 1:
            raise ValueError("per_class_train must be >= 1")
        parse_layers(self.layers)
        self.weights()
        self.sgd()
        return self

    def weights(self):
        return LossWeights(self.alpha, self.beta, self.lam, self.mu)

    def sgd(self):
        return SgdConfig(self.learning_rate, self.iterations, self.batch_size, self.momentum)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}
_CASTS = {"int": int, "float": float, "str": str, int: int, float: float, str: str}


def coerce(key, value):
    if key not in FIELD_TYPES:
        raise KeyError(f"unknown config key {key!r}")
    return _CASTS[FIELD_TYPES[key]](value)


def parse_config_text(text):
    """Flat ``key=value`` lines; ``#`` comments; unknown keys are errors."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key = key.strip()
        try:
            values[key] = coerce(key, value.strip())
        except KeyError:
            raise ValueError(f"line {lineno}: unknown config key {key!r}") from None
    return values


def format_config(cfg):
    return "".join(f"{k}={getattr(cfg, k)}\n" for k in FIELD_TYPES)


@dataclass
class RunOutcome:
    net: object
    history: dict
    sml_skipped: int
    train_coords: np.ndarray
    test_coords: np.ndarray
    test_pred: np.ndarray
    test_true: np.ndarray
    oa: float
    aa: float
    kappa: float
    per_class: np.ndarray
    fisher: float

    def report(self, cfg, seed):
        items = {"seed": seed, "loss": cfg.loss, "per_class_train": cfg.per_class_train,
                 "iterations": cfg.iterations, "oa": self.oa, "aa": self.aa,
                 "kappa": self.kappa, "fisher_ratio": self.fisher,
                 "sml_skipped": self.sml_skipped,
                 "final_ce": float(self.history["ce"][-1])}
        for k, acc in enumerate(self.per_class, 1):
            items[f"class{k}_acc"] = float(acc)
        return items


def run_once(cube, cfg, seed=None):
    """Split, train and evaluate on the held-out pixels of ``cube``."""
    seed = cfg.seed if seed is None else seed
    streams = spawn_rngs(seed, ["split", "init", "batch"])
    train_c, test_c = stratified_split(cube, SplitSpec(cfg.per_class_train, seed), streams["split"])
    p = cfg.patch_size
    tr = extract_patches(cube, train_c, p)
    te_labels = cube.labels[test_c[:, 0], test_c[:, 1]] - 1
    net = init_weights((p, p, cube.bands), parse_layers(cfg.layers), cube.num_classes,
                       streams["init"])
    sgd = cfg.sgd()
    sgd.check_classes(cube.num_classes)
    result = train(net, tr.patches, tr.labels, cfg.weights(), sgd, streams["batch"],
                   loss=cfg.loss, kappa=cfg.kappa)
    pred, feats = predict_coords(net, cube, test_c, p)
    m = metrics(confusion_matrix(te_labels, pred, cube.num_classes))
    return RunOutcome(net, result.history, result.sml_skipped, train_c, test_c, pred,
                      te_labels, m.oa, m.aa, m.kappa, m.per_class,
                      fisher_ratio(feats, te_labels))


METRIC_KEYS = ("oa", "aa", "kappa", "fisher")


def multi_run(cube, cfg, seeds):
    """Per-metric (mean, sample std) over seeds, plus the individual outcomes."""
    if len(seeds) < 2:
        raise ValueError("multi_run needs at least two seeds")
    outcomes = [run_once(cube, cfg, s) for s in seeds]
    summary = {k: mean_std([getattr(o, k) for o in outcomes]) for k in METRIC_KEYS}
    return summary, outcomes


SWEEP_METHODS = ("softmax", "softmax+sml")
SWEEP_COLUMNS = ("size", "method", "runs", "oa_mean", "oa_std", "aa_mean", "aa_std",
                 "kappa_mean", "kappa_std", "fisher_mean", "fisher_std")


def sample_size_sweep(cube, cfg, sizes, seeds, methods=SWEEP_METHODS):
    """OA and friends vs. training pixels per class, for each method.

    Returns ``(rows, skipped, outcomes)``: one row dict per feasible
    (size, method), a list of ``(size, reason)`` for infeasible sizes, and
    ``outcomes[(size, method)]`` holding the per-seed ``RunOutcome`` list.
    """
    smallest = min(int((cube.labels == k).sum()) for k in range(1, cube.num_classes + 1))
    rows, skipped, outcomes = [], [], {}
    for size in sizes:
        if size >= smallest:
            reason = f"smallest class has {smallest} pixels; needs more than {size}"
            log.warning("skipping size %d: %s", size, reason)
            skipped.append((size, reason))
            continue
        for method in methods:
            run_cfg = cfg.replace(per_class_train=size, loss=method)
            runs = [run_once(cube, run_cfg, s) for s in seeds]
            outcomes[(size, method)] = runs
            row = {"size": size, "method": method, "runs": len(runs)}
            for key in METRIC_KEYS:
                vals = np.array([getattr(o, key) for o in runs])
                row[f"{key}_mean"] = float(vals.mean())
                row[f"{key}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            rows.append(row)
            log.info("size %d %s: oa %.4f +- %.4f", size, method, row["oa_mean"], row["oa_std"])
    return rows, skipped, outcomes


def write_sweep_csv(path, rows):
    with open(path, "w") as fh:
        fh.write(",".join(SWEEP_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                              for c in SWEEP_COLUMNS) + "\n")
