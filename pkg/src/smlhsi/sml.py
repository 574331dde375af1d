"""Statistical metric learning loss on a batch of embeddings.

Each class present in the batch is summarised by its mean feature and the
mean squared distance of its members to that mean. The loss

    total = alpha * intra - beta * inter - lambda * diversity

pulls members toward their class mean (intra), pushes class means apart
(inter, over unordered pairs) and spreads the means around their common
center (diversity). All counts of classes refer to the classes present in
the batch.
"""
from dataclasses import dataclass, field

import numpy as np


class SingleClassError(ValueError):
    """Raised when a between-class term is requested for fewer than 2 classes."""


@dataclass(frozen=True)
class FeatureBatch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2:
            raise ValueError(f"features must be N x d, got shape {feats.shape}")
        if labels.shape != (feats.shape[0],):
            raise ValueError(f"labels shape {labels.shape} does not match {feats.shape[0]} rows")
        if feats.shape[0] < 1:
            raise ValueError("a feature batch needs at least one row")
        if labels.min() < 0:
            raise ValueError("labels must be non-negative class ids")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]


@dataclass(frozen=True)
class ClassStats:
    present_classes: np.ndarray   # sorted class ids with n_k >= 1
    counts: np.ndarray            # n_k
    means: np.ndarray             # (K, d)
    variances: np.ndarray         # I_k, (K,)
    center: np.ndarray            # C0, (d,)
    member: np.ndarray            # row -> position in present_classes

    @property
    def num_classes(self):
        return len(self.present_classes)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.01
    lam: float = 0.001
    mu: float = 0.0002

    def __post_init__(self):
        for name in ("alpha", "beta", "lam", "mu"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


@dataclass(frozen=True)
class SmlOutput:
    l_intra: float
    l_inter: float
    l_diversity: float
    l_total: float
    d_features: np.ndarray = field(repr=False)


def class_stats(batch):
    z = batch.features
    present, member, counts = np.unique(batch.labels, return_inverse=True, return_counts=True)
    k = len(present)
    sums = np.zeros((k, z.shape[1]))
    np.add.at(sums, member, z)
    means = sums / counts[:, None]
    sq = np.einsum("ij,ij->i", z - means[member], z - means[member])
    variances = np.zeros(k)
    np.add.at(variances, member, sq)
    variances /= counts
    # left-to-right over classes
    center = means[0].copy()
    for m in means[1:]:
        center += m
    center /= k
    return ClassStats(present, counts, means, variances, center, member)


def l_intra(stats):
    return float(stats.variances.sum() / stats.num_classes)


def _require_two(stats):
    if stats.num_classes < 2:
        raise SingleClassError("inter-class term undefined for a single class")


def l_inter(stats):
    _require_two(stats)
    k = stats.num_classes
    diff = stats.means[:, None, :] - stats.means[None, :, :]
    sq = np.einsum("ijd,ijd->ij", diff, diff)
    upper = sq[np.triu_indices(k, 1)]
    return float(2.0 / k**2 * upper.sum())


def l_diversity(stats):
    _require_two(stats)
    dev = stats.means - stats.center
    return float(np.einsum("kd,kd->", dev, dev) / stats.num_classes)


def sml_loss(batch, weights):
    """Scalar total loss only (used by finite-difference checks)."""
    stats = class_stats(batch)
    return (weights.alpha * l_intra(stats) - weights.beta * l_inter(stats)
            - weights.lam * l_diversity(stats))


def sml_forward_backward(batch, weights):
    stats = class_stats(batch)
    _require_two(stats)
    intra = l_intra(stats)
    inter = l_inter(stats)
    div = l_diversity(stats)
    total = weights.alpha * intra - weights.beta * inter - weights.lam * div

    k = stats.num_classes
    z = batch.features
    m = stats.means[stats.member]
    inv_n = (1.0 / stats.counts[stats.member])[:, None]
    # sum_{l != k} (C_k - C_l) == k * (C_k - C0)
    pair_sum = k * (stats.means - stats.center)
    d_intra = (2.0 / k) * inv_n * (z - m)
    d_inter = (4.0 / k**2) * inv_n * pair_sum[stats.member]
    d_div = (2.0 / k) * inv_n * (stats.means - stats.center)[stats.member]
    grad = weights.alpha * d_intra - weights.beta * d_inter - weights.lam * d_div
    return SmlOutput(intra, inter, div, total, grad)


def relative_error(analytic, numeric, floor=1e-5):
    """|a - n| / max(|a|, |n|, floor).

    Below ``floor`` the comparison turns absolute: with rtol 1e-5 and the
    default floor, near-zero gradients must agree to 1e-10.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.abs(a - n) / scale


@dataclass
class GradCheckReport:
    coords: list            # (row, col)
    analytic: np.ndarray
    numeric: np.ndarray
    rel_errors: np.ndarray

    @property
    def max_rel_error(self):
        return float(self.rel_errors.max()) if len(self.rel_errors) else 0.0

    @property
    def worst(self):
        i = int(np.argmax(self.rel_errors))
        return self.coords[i], float(self.analytic[i]), float(self.numeric[i]), float(self.rel_errors[i])

    def table(self):
        return [(r, c, float(a), float(n), float(e)) for (r, c), a, n, e
                in zip(self.coords, self.analytic, self.numeric, self.rel_errors)]


def finite_difference_check(batch, weights, h=1e-5, coords=None, analytic=None, floor=1e-5):
    """Compare analytic ``d_features`` with central differences of the total.

    ``coords`` defaults to every (row, col). ``analytic`` may be supplied to
    check a gradient produced elsewhere.
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    if analytic is None:
        analytic = sml_forward_backward(batch, weights).d_features
    if coords is None:
        coords = [(i, j) for i in range(batch.n) for j in range(batch.dim)]
    coords = [(int(i), int(j)) for i, j in coords]
    z = batch.features.copy()
    numeric = np.empty(len(coords))
    for t, (i, j) in enumerate(coords):
        orig = z[i, j]
        z[i, j] = orig + h
        plus = sml_loss(FeatureBatch(z, batch.labels), weights)
        z[i, j] = orig - h
        minus = sml_loss(FeatureBatch(z, batch.labels), weights)
        z[i, j] = orig
        numeric[t] = (plus - minus) / (2 * h)
    a = np.array([analytic[i, j] for i, j in coords])
    return GradCheckReport(coords, a, numeric, relative_error(a, numeric, floor))


def random_feature_batch(rng, n, dim, num_classes):
    """Random batch in which each of ``num_classes`` classes appears at least once."""
    if n < num_classes:
        raise ValueError("need at least one row per class")
    labels = np.concatenate([np.arange(num_classes), rng.integers(0, num_classes, n - num_classes)])
    rng.shuffle(labels)
    return FeatureBatch(rng.standard_normal((n, dim)), labels)
