import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smlhsi.sml import (FeatureBatch, LossWeights, SingleClassError, class_stats,
                        finite_difference_check, l_diversity, l_inter, l_intra,
                        random_feature_batch, relative_error, sml_forward_backward)

DEFAULTS = LossWeights()


def batch_1d(groups):
    feats, labels = [], []
    for label, values in groups.items():
        feats += [[v] for v in values]
        labels += [label] * len(values)
    return FeatureBatch(np.array(feats, dtype=float), np.array(labels))


def oracle_stats(features, labels):
    """Two-pass per-class mean and variance with plain Python loops."""
    out = {}
    for k in sorted(set(int(v) for v in labels)):
        rows = [features[i] for i in range(len(labels)) if labels[i] == k]
        d = len(rows[0])
        mean = [math.fsum(r[j] for r in rows) / len(rows) for j in range(d)]
        var = math.fsum(math.fsum((mean[j] - r[j]) ** 2 for j in range(d)) for r in rows) / len(rows)
        out[k] = (len(rows), mean, var)
    return out


def oracle_terms(features, labels):
    stats = oracle_stats(features, labels)
    ks = sorted(stats)
    lam = len(ks)
    d = len(features[0])
    means = [stats[k][1] for k in ks]
    intra = math.fsum(stats[k][2] for k in ks) / lam
    inter = 2.0 / lam**2 * math.fsum(
        math.fsum((means[a][j] - means[b][j]) ** 2 for j in range(d))
        for a in range(lam) for b in range(a + 1, lam))
    c0 = [math.fsum(m[j] for m in means) / lam for j in range(d)]
    div = math.fsum(math.fsum((c0[j] - m[j]) ** 2 for j in range(d)) for m in means) / lam
    return intra, inter, div


def rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


# --- class statistics -------------------------------------------------------

def test_two_point_class():
    st_ = class_stats(FeatureBatch([[0.0, 0.0], [2.0, 2.0]], [0, 0]))
    assert st_.means.tolist() == [[1.0, 1.0]]
    assert st_.variances[0] == pytest.approx(2.0, abs=1e-15)
    assert st_.center.tolist() == [1.0, 1.0]


def test_identical_samples_have_zero_variance():
    z = np.tile([1.5, -2.0, 3.0], (6, 1))
    st_ = class_stats(FeatureBatch(z, [0, 1, 2, 0, 1, 2]))
    assert (st_.variances == 0).all()


def test_singleton_class_zero_variance():
    st_ = class_stats(FeatureBatch([[1.0], [5.0], [7.0]], [0, 1, 1]))
    assert st_.variances[0] == 0.0
    assert st_.counts.sum() == 3


@pytest.mark.parametrize("seed", range(5))
def test_class_stats_vs_two_pass_oracle(seed):
    rng = np.random.default_rng(seed)
    b = random_feature_batch(rng, 30, 7, 4)
    st_ = class_stats(b)
    ref = oracle_stats(b.features.tolist(), b.labels.tolist())
    for pos, k in enumerate(st_.present_classes):
        n, mean, var = ref[int(k)]
        assert st_.counts[pos] == n
        np.testing.assert_allclose(st_.means[pos], mean, rtol=1e-12)
        assert rel(st_.variances[pos], var) <= 1e-12


def test_center_is_fixed_order_mean_of_means():
    rng = np.random.default_rng(0)
    st_ = class_stats(random_feature_batch(rng, 20, 3, 5))
    acc = st_.means[0].copy()
    for m in st_.means[1:]:
        acc = acc + m
    assert np.array_equal(st_.center, acc / 5)


# --- individual terms -------------------------------------------------------

def test_intra_single_class():
    assert l_intra(class_stats(batch_1d({0: [-1.0, 1.0]}))) == 1.0


def test_intra_collapsed_classes():
    assert l_intra(class_stats(batch_1d({0: [3.0, 3.0], 1: [-2.0, -2.0]}))) == 0.0


def test_worked_example_terms():
    st_ = class_stats(batch_1d({0: [0.0, 2.0], 1: [4.0, 6.0]}))
    assert l_intra(st_) == pytest.approx(1.0, abs=1e-12)
    assert l_inter(st_) == pytest.approx(8.0, abs=1e-12)
    assert l_diversity(st_) == pytest.approx(4.0, abs=1e-12)


def test_inter_coincident_means():
    assert l_inter(class_stats(batch_1d({0: [1.0, 3.0], 1: [2.0, 2.0]}))) == 0.0
    assert l_inter(class_stats(batch_1d({0: [1.0], 1: [1.0], 2: [0.0, 2.0]}))) == 0.0


def test_inter_and_diversity_need_two_classes():
    st_ = class_stats(batch_1d({0: [0.0, 1.0]}))
    with pytest.raises(SingleClassError, match="single class"):
        l_inter(st_)
    with pytest.raises(SingleClassError):
        l_diversity(st_)
    with pytest.raises(SingleClassError):
        sml_forward_backward(batch_1d({3: [0.0, 1.0]}), DEFAULTS)


def test_diversity_examples():
    assert l_diversity(class_stats(batch_1d({0: [1.0], 1: [5.0]}))) == 4.0
    assert l_diversity(class_stats(batch_1d({0: [2.0], 1: [2.0, 2.0]}))) == 0.0
    m = np.array([0.5, -1.5, 2.0])
    st_ = class_stats(FeatureBatch(np.stack([-m, m]), [0, 1]))
    assert l_diversity(st_) == pytest.approx(float(m @ m), rel=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_terms_vs_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    b = random_feature_batch(rng, 25, 5, 4)
    st_ = class_stats(b)
    intra, inter, div = oracle_terms(b.features.tolist(), b.labels.tolist())
    assert rel(l_intra(st_), intra) <= 1e-12
    assert rel(l_inter(st_), inter) <= 1e-12
    assert rel(l_diversity(st_), div) <= 1e-12


# --- combined loss and gradient ----------------------------------------------

def test_worked_example_total():
    out = sml_forward_backward(batch_1d({0: [0.0, 2.0], 1: [4.0, 6.0]}), DEFAULTS)
    assert out.l_total == pytest.approx(0.916, abs=1e-12)


def test_total_matches_combination():
    rng = np.random.default_rng(1)
    w = LossWeights(0.7, 0.3, 0.2)
    out = sml_forward_backward(random_feature_batch(rng, 20, 4, 3), w)
    assert out.l_total == 0.7 * out.l_intra - 0.3 * out.l_inter - 0.2 * out.l_diversity


def test_zero_weights():
    rng = np.random.default_rng(2)
    out = sml_forward_backward(random_feature_batch(rng, 10, 3, 3), LossWeights(0, 0, 0, 0))
    assert out.l_total == 0.0
    assert not out.d_features.any()


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(alpha=-1)


@pytest.mark.parametrize("seed", range(4))
def test_every_coordinate_vs_finite_differences(seed):
    rng = np.random.default_rng(seed)
    b = random_feature_batch(rng, 16, 5, 4)
    report = finite_difference_check(b, DEFAULTS, h=1e-5)
    assert len(report.coords) == 16 * 5
    assert report.max_rel_error <= 1e-5


@pytest.mark.parametrize("weights", [LossWeights(1, 0, 0), LossWeights(0, 1, 0), LossWeights(0, 0, 1)])
def test_each_term_gradient(weights):
    b = random_feature_batch(np.random.default_rng(9), 12, 3, 3)
    assert finite_difference_check(b, weights, h=1e-5).max_rel_error <= 1e-5


def test_quadratic_difference_is_exact_to_rounding():
    b = random_feature_batch(np.random.default_rng(4), 6, 2, 2)
    report = finite_difference_check(b, LossWeights(1.0, 0.5, 0.25), h=1e-2)
    assert report.max_rel_error <= 1e-9


def test_zero_gradient_point():
    b = FeatureBatch(np.tile([0.3, -0.7], (6, 1)), [0, 1, 2, 0, 1, 2])
    report = finite_difference_check(b, DEFAULTS, h=1e-5)
    assert np.abs(report.analytic).max() < 1e-10
    assert np.abs(report.analytic - report.numeric).max() <= 1e-10
    assert report.max_rel_error <= 1e-5


def test_report_determinism():
    coords = [(0, 0), (3, 1), (7, 2)]
    r1 = finite_difference_check(random_feature_batch(np.random.default_rng(5), 8, 3, 2), DEFAULTS, coords=coords)
    r2 = finite_difference_check(random_feature_batch(np.random.default_rng(5), 8, 3, 2), DEFAULTS, coords=coords)
    assert r1.table() == r2.table()
    assert r1.worst == r2.worst


def test_perturbed_gradient_is_caught():
    b = random_feature_batch(np.random.default_rng(6), 10, 3, 3)
    g = sml_forward_backward(b, DEFAULTS).d_features + 1e-3
    assert finite_difference_check(b, DEFAULTS, analytic=g).max_rel_error > 1e-5


def test_relative_error_floor():
    assert relative_error(0.0, 5e-11) == pytest.approx(5e-6)
    assert relative_error(1.0, 1.0 + 1e-6) == pytest.approx(1e-6, rel=1e-5)


def test_stratified_batch_validation():
    with pytest.raises(ValueError):
        FeatureBatch(np.zeros((3, 2)), [0, 1])
    with pytest.raises(ValueError):
        FeatureBatch(np.zeros((2, 2)), [0, -1])


# --- invariants (property-based) ----------------------------------------------

instances = st.tuples(st.integers(0, 2**32 - 1), st.integers(2, 40), st.integers(1, 12),
                      st.integers(2, 6))


def make(params):
    seed, n, d, k = params
    rng = np.random.default_rng(seed)
    return random_feature_batch(rng, max(n, k), d, k), rng


def terms(b):
    s = class_stats(b)
    return l_intra(s), l_inter(s), l_diversity(s)


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol * max(abs(a), abs(b), 1e-12)


@settings(max_examples=100, deadline=None)
@given(instances)
def test_intra_invariant_to_per_class_shift(params):
    b, rng = make(params)
    z = b.features.copy()
    k = b.labels[0]
    z[b.labels == k] += rng.normal(size=b.dim) * 3
    assert close(terms(b)[0], terms(FeatureBatch(z, b.labels))[0])


@settings(max_examples=100, deadline=None)
@given(instances)
def test_global_translation_invariance(params):
    b, rng = make(params)
    moved = FeatureBatch(b.features + rng.normal(size=b.dim) * 3, b.labels)
    for before, after in zip(terms(b), terms(moved)):
        assert close(before, after)


@settings(max_examples=100, deadline=None)
@given(instances, st.floats(0.1, 10.0))
def test_quadratic_scaling(params, s):
    b, _ = make(params)
    scaled = FeatureBatch(b.features * s, b.labels)
    for before, after in zip(terms(b), terms(scaled)):
        assert close(after, s * s * before)


@settings(max_examples=100, deadline=None)
@given(instances)
def test_duplicating_a_class_changes_nothing(params):
    b, rng = make(params)
    k = rng.choice(np.unique(b.labels))
    extra = b.labels == k
    dup = FeatureBatch(np.vstack([b.features, b.features[extra]]),
                       np.concatenate([b.labels, b.labels[extra]]))
    for before, after in zip(terms(b), terms(dup)):
        assert close(before, after)


@settings(max_examples=100, deadline=None)
@given(instances)
def test_intra_gradient_sums_to_zero_per_class(params):
    b, _ = make(params)
    g = sml_forward_backward(b, LossWeights(1, 0, 0)).d_features
    for k in np.unique(b.labels):
        rows = g[b.labels == k]
        assert np.abs(rows.sum(axis=0)).max() <= 1e-9 * max(np.abs(rows).sum(), 1e-12)


@settings(max_examples=100, deadline=None)
@given(instances)
def test_permutation_invariance(params):
    b, rng = make(params)
    perm = rng.permutation(b.n)
    a = sml_forward_backward(b, DEFAULTS)
    p = sml_forward_backward(FeatureBatch(b.features[perm], b.labels[perm]), DEFAULTS)
    for x, y in [(a.l_intra, p.l_intra), (a.l_inter, p.l_inter), (a.l_diversity, p.l_diversity)]:
        assert close(x, y)
    np.testing.assert_allclose(p.d_features, a.d_features[perm], rtol=1e-9, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(instances)
def test_inter_is_twice_diversity(params):
    # unordered-pair sum of squared mean distances = K * sum of squared deviations from C0
    b, _ = make(params)
    _, inter, div = terms(b)
    assert close(inter, 2 * div)
