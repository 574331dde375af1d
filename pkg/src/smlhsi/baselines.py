"""Softmax cross-entropy and the pair/triplet metric-learning baselines.

Contrastive and triplet losses use the (non-squared) Euclidean distance and
are hinged at zero. Where the distance is zero or a hinge sits exactly at
its kink the subgradient is taken as 0.
"""
from dataclasses import dataclass

import numpy as np


def softmax_ce(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match {n} logit rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted - log_norm[:, None]
    rows = np.arange(n)
    loss = float(-log_p[rows, labels].mean())
    d_logits = np.exp(log_p)
    d_logits[rows, labels] -= 1.0
    d_logits /= n
    return loss, d_logits


@dataclass
class PairSet:
    pairs: list                     # (a, b, is_positive)
    skipped: int = 0                # requested pairs that could not be formed


@dataclass
class TripletSet:
    triplets: list                  # (anchor, positive, negative)
    skipped: int = 0


def _distance_grad(za, zb):
    diff = za - zb
    dist = float(np.sqrt(diff @ diff))
    if dist == 0.0:
        return 0.0, np.zeros_like(diff)
    return dist, diff / dist


def contrastive(batch, pairs, kappa=1.0):
    if kappa <= 0:
        raise ValueError("margin kappa must be > 0")
    z = batch.features
    grad = np.zeros_like(z)
    loss = 0.0
    for a, b, positive in pairs.pairs:
        dist, g = _distance_grad(z[a], z[b])
        if positive:
            loss += dist
            grad[a] += g
            grad[b] -= g
        elif kappa - dist > 0:
            loss += kappa - dist
            grad[a] -= g
            grad[b] += g
    return loss, grad


def triplet(batch, triplets, kappa=1.0):
    if kappa <= 0:
        raise ValueError("margin kappa must be > 0")
    z = batch.features
    grad = np.zeros_like(z)
    loss = 0.0
    for a, p, n in triplets.triplets:
        d_ap, g_ap = _distance_grad(z[a], z[p])
        d_an, g_an = _distance_grad(z[a], z[n])
        margin = d_ap + kappa - d_an
        if margin <= 0:
            continue
        loss += margin
        grad[a] += g_ap - g_an
        grad[p] -= g_ap
        grad[n] += g_an
    return loss, grad


def _all_pairs(labels):
    i, j = np.triu_indices(len(labels), 1)
    same = labels[i] == labels[j]
    return (i[same], j[same]), (i[~same], j[~same])


def mine_pairs(batch, rng, count):
    """Uniformly drawn valid pairs, half positive and half negative.

    Pairs are drawn with replacement from the set of all valid pairs. A side
    with no valid pair is skipped and counted in ``skipped``.
    """
    labels = batch.labels
    if len(np.unique(labels)) < 2:
        raise ValueError("pair mining needs at least two classes")
    (pi, pj), (ni, nj) = _all_pairs(labels)
    n_pos = (count + 1) // 2
    n_neg = count - n_pos
    pairs = []
    skipped = 0
    if len(pi):
        for t in rng.integers(0, len(pi), n_pos):
            pairs.append((int(pi[t]), int(pj[t]), True))
    else:
        skipped += n_pos
    for t in rng.integers(0, len(ni), n_neg):
        pairs.append((int(ni[t]), int(nj[t]), False))
    return PairSet(pairs, skipped)


def mine_triplets(batch, rng, count):
    """Triplets drawn uniformly from all valid (anchor, positive, negative)."""
    labels = batch.labels
    classes, member, counts = np.unique(labels, return_inverse=True, return_counts=True)
    if len(classes) < 2:
        raise ValueError("triplet mining needs at least two classes")
    n = len(labels)
    per_anchor = (counts[member] - 1) * (n - counts[member])
    total = per_anchor.sum()
    if total == 0:
        return TripletSet([], count)
    triplets = []
    anchors = rng.choice(n, size=count, p=per_anchor / total)
    for a in anchors:
        same = np.flatnonzero((labels == labels[a]) & (np.arange(n) != a))
        other = np.flatnonzero(labels != labels[a])
        triplets.append((int(a), int(same[rng.integers(len(same))]), int(other[rng.integers(len(other))])))
    return TripletSet(triplets)
