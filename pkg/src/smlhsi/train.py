"""Mini-batch SGD on cross-entropy plus a weighted metric loss.

Per step the objective is ``CE + mu * metric`` where ``metric`` is the SML
total (alpha/beta/lambda weighted), a contrastive or a triplet loss, or
nothing for plain softmax training. SML terms are computed and logged on
every step regardless of whether they are back-propagated.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import baselines
from .numerics import sgd_step
from .sml import FeatureBatch, SingleClassError, class_stats, l_intra, sml_forward_backward

log = logging.getLogger(__name__)

LOSSES = ("softmax", "softmax+sml", "softmax+contrastive", "softmax+triplet")
HISTORY_COLUMNS = ("step", "ce", "l_intra", "l_inter", "l_diversity", "l_sml",
                   "l_metric", "total")


@dataclass
class TrainResult:
    history: dict                           # column -> np.ndarray
    sml_skipped: int = 0                    # steps whose batch held < 2 classes
    mining_skipped: int = 0


def stratified_batches(labels, batch_size, rng):
    """Yield index arrays forever: ceil(batch_size / K) draws per class
    (with replacement only when a class is smaller than that), shuffled,
    then truncated to ``batch_size``."""
    classes = np.unique(labels)
    members = [np.flatnonzero(labels == k) for k in classes]
    per_class = math.ceil(batch_size / len(classes))
    while True:
        picks = [m[rng.choice(len(m), size=per_class, replace=len(m) < per_class)]
                 for m in members]
        idx = np.concatenate(picks)
        yield idx[rng.permutation(len(idx))[:batch_size]]


def train(net, patches, labels, weights, cfg, rng, loss="softmax+sml", kappa=1.0,
          log_every=0):
    """Train ``net`` in place. ``rng`` drives batching and pair/triplet mining."""
    if loss not in LOSSES:
        raise ValueError(f"loss must be one of {LOSSES}, got {loss!r}")
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("training needs at least two classes")

    steps = cfg.iterations
    hist = {c: np.zeros(steps) for c in HISTORY_COLUMNS}
    hist["step"] = np.arange(steps, dtype=np.float64)
    sml_skipped = 0
    mining_skipped = 0
    velocity = [np.zeros_like(p) for p in net.params] if cfg.momentum else None
    batches = stratified_batches(labels, cfg.batch_size, rng)

    for step in range(steps):
        idx = next(batches)
        yb = labels[idx]
        feats, logits, cache = net.forward(patches[idx])
        ce, d_logits = baselines.softmax_ce(logits, yb)
        fb = FeatureBatch(feats, yb)

        d_metric = None
        metric = 0.0
        try:
            out = sml_forward_backward(fb, weights)
            hist["l_intra"][step] = out.l_intra
            hist["l_inter"][step] = out.l_inter
            hist["l_diversity"][step] = out.l_diversity
            hist["l_sml"][step] = out.l_total
            if loss == "softmax+sml":
                metric, d_metric = out.l_total, out.d_features
        except SingleClassError:
            sml_skipped += 1
            hist["l_intra"][step] = l_intra(class_stats(fb))
            hist["l_inter"][step] = hist["l_diversity"][step] = hist["l_sml"][step] = np.nan

        if loss == "softmax+contrastive":
            pairs = baselines.mine_pairs(fb, rng, cfg.batch_size)
            mining_skipped += pairs.skipped
            metric, d_metric = baselines.contrastive(fb, pairs, kappa)
        elif loss == "softmax+triplet":
            trips = baselines.mine_triplets(fb, rng, cfg.batch_size)
            mining_skipped += trips.skipped
            metric, d_metric = baselines.triplet(fb, trips, kappa)

        if d_metric is None:
            d_features = np.zeros_like(feats)
        else:
            d_features = weights.mu * d_metric
        hist["ce"][step] = ce
        hist["l_metric"][step] = metric
        hist["total"][step] = ce + weights.mu * metric

        grads = net.backward(cache, d_features, d_logits)
        if velocity is None:
            new = [sgd_step(p, g, cfg) for p, g in zip(net.params, grads)]
        else:
            for v, g in zip(velocity, grads):
                v *= cfg.momentum
                v -= cfg.learning_rate * g
            new = [p + v for p, v in zip(net.params, velocity)]
        net.set_params(new)

        if log_every and step % log_every == 0:
            log.info("step %d ce %.5f sml %.5f", step, ce, hist["l_sml"][step])

    if sml_skipped:
        log.warning("SML term skipped on %d of %d steps (batch held < 2 classes)",
                    sml_skipped, steps)
    return TrainResult(hist, sml_skipped, mining_skipped)


def write_history(path, history):
    cols = HISTORY_COLUMNS
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for i in range(len(history["step"])):
            row = [str(int(history["step"][i]))]
            row += [repr(float(history[c][i])) for c in cols[1:]]
            fh.write(",".join(row) + "\n")
