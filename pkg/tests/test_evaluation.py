import numpy as np
import pytest

from smlhsi.data import HyperspectralCube, extract_patches
from smlhsi.evaluation import (DEFAULT_PALETTE, classify_cube, confusion_matrix, decode_ppm,
                               encode_ppm, fisher_ratio, image_to_labels, mean_std, metrics,
                               read_kv, render_map, write_kv)
from smlhsi.network import LayerSpec, init_weights


def direct_metrics(cm):
    """Textbook formulas with explicit loops."""
    k = len(cm)
    total = sum(cm[i][j] for i in range(k) for j in range(k))
    agree = sum(cm[i][i] for i in range(k))
    oa = agree / total
    accs = []
    for i in range(k):
        row = sum(cm[i])
        if row:
            accs.append(cm[i][i] / row)
    aa = sum(accs) / len(accs)
    pe = sum(sum(cm[i]) * sum(cm[r][i] for r in range(k)) for i in range(k)) / total**2
    return oa, aa, (oa - pe) / (1 - pe)


def test_diagonal_is_perfect():
    m = metrics(np.diag([5, 3, 9]))
    assert (m.oa, m.aa, m.kappa) == (1.0, 1.0, 1.0)


def test_chance_agreement():
    m = metrics([[25, 25], [25, 25]])
    assert m.oa == 0.5 and m.kappa == 0.0


@pytest.mark.parametrize("seed", range(20))
def test_random_matrices_vs_direct_formula(seed):
    cm = np.random.default_rng(seed).integers(0, 50, (4, 4))
    m = metrics(cm)
    oa, aa, kappa = direct_metrics(cm.tolist())
    for got, want in [(m.oa, oa), (m.aa, aa), (m.kappa, kappa)]:
        assert abs(got - want) <= 1e-12 * max(abs(want), 1e-300)


def test_empty_row_is_flagged():
    m = metrics([[4, 1, 0], [0, 0, 0], [1, 0, 3]])
    assert m.unsupported == [1]
    assert np.isnan(m.per_class[1])
    assert m.aa == pytest.approx((0.8 + 0.75) / 2)


def test_empty_matrix_rejected():
    with pytest.raises(ValueError):
        metrics(np.zeros((2, 2)))


def test_permutation_invariance():
    rng = np.random.default_rng(3)
    cm = rng.integers(0, 30, (5, 5))
    perm = rng.permutation(5)
    a, b = metrics(cm), metrics(cm[np.ix_(perm, perm)])
    assert a.oa == pytest.approx(b.oa, rel=1e-14)
    assert a.aa == pytest.approx(b.aa, rel=1e-14)
    assert a.kappa == pytest.approx(b.kappa, rel=1e-14)


def test_kappa_zero_when_oa_equals_chance():
    m = metrics([[10, 10], [10, 10]])
    assert m.kappa == 0.0
    m = metrics([[1, 0], [0, 1]])
    assert m.kappa == 1.0


def test_confusion_matrix_counts():
    cm = confusion_matrix([0, 0, 1, 2, 2, 2], [0, 1, 1, 2, 0, 2], 3)
    assert cm.tolist() == [[1, 1, 0], [0, 1, 0], [1, 0, 2]]
    assert cm.sum() == 6


def test_fisher_ratio_separated_vs_mixed():
    rng = np.random.default_rng(0)
    labels = np.repeat([0, 1], 50)
    tight = rng.normal(size=(100, 2)) * 0.1 + labels[:, None] * 5
    loose = rng.normal(size=(100, 2)) * 3 + labels[:, None] * 5
    assert fisher_ratio(tight, labels) > fisher_ratio(loose, labels)
    assert fisher_ratio(tight * 7, labels) == pytest.approx(fisher_ratio(tight, labels), rel=1e-12)


# --- classification maps ----------------------------------------------------

def tiny_cube():
    rng = np.random.default_rng(1)
    labels = np.array([[1, 2, 0], [2, 1, 1], [0, 2, 2], [1, 1, 2]])
    return HyperspectralCube(rng.normal(size=(4, 3, 2)), labels)


def constant_net(bands, favour=0):
    net = init_weights((3, 3, bands), [LayerSpec.flatten(), LayerSpec.dense(2)], 2,
                       np.random.default_rng(0))
    params = [np.zeros_like(p) for p in net.params]
    params[-1][favour] = 1.0
    net.set_params(params)
    return net


def test_constant_classifier_uniform_map():
    cube = tiny_cube()
    out = classify_cube(constant_net(2, 0), cube, p=3)
    assert (out[cube.labels > 0] == 1).all()
    assert (out[cube.labels == 0] == 0).all()


def test_ties_go_to_lower_class():
    net = constant_net(2)
    net.set_params([np.zeros_like(p) for p in net.params])
    assert (net.predict(np.zeros((3, 3, 3, 2))) == 0).all()


def test_map_matches_direct_forward():
    cube = tiny_cube()
    net = init_weights((3, 3, 2), [LayerSpec.conv2d(3, 2), LayerSpec.relu(), LayerSpec.flatten(),
                                   LayerSpec.dense(4)], 2, np.random.default_rng(5))
    out = classify_cube(net, cube, p=3)
    for r, c in np.argwhere(cube.labels > 0):
        _, logits, _ = net.forward(extract_patches(cube, [(r, c)], 3).patches)
        assert out[r, c] == np.argmax(logits[0]) + 1


def test_map_band_mismatch():
    with pytest.raises(ValueError):
        classify_cube(constant_net(5), tiny_cube(), p=3)


def test_map_accuracy_equals_metrics_oa():
    cube = tiny_cube()
    net = init_weights((3, 3, 2), [LayerSpec.flatten(), LayerSpec.dense(3)], 2, np.random.default_rng(8))
    out = classify_cube(net, cube, p=3)
    coords = np.argwhere(cube.labels > 0)
    truth = cube.labels[coords[:, 0], coords[:, 1]]
    map_acc = float((out[coords[:, 0], coords[:, 1]] == truth).mean())
    pred = net.predict(extract_patches(cube, coords, 3).patches)
    assert map_acc == metrics(confusion_matrix(truth - 1, pred, 2)).oa


def test_single_pixel_ppm():
    raw = encode_ppm(np.array([[1]]))
    assert raw == b"P6\n1 1\n255\n" + bytes(DEFAULT_PALETTE[1])


def test_ppm_round_trip(tmp_path):
    labels = np.random.default_rng(2).integers(0, 7, (9, 13))
    render_map(labels, tmp_path / "m.ppm")
    raw = (tmp_path / "m.ppm").read_bytes()
    img = decode_ppm(raw)
    assert img.shape == (9, 13, 3)
    assert np.array_equal(image_to_labels(img), labels)
    render_map(labels, tmp_path / "m2.ppm")
    assert (tmp_path / "m2.ppm").read_bytes() == raw


def test_ppm_missing_palette_entry():
    with pytest.raises(ValueError):
        encode_ppm(np.array([[3]]), palette=[(0, 0, 0), (1, 1, 1)])


# --- multi-run statistics ---------------------------------------------------

def test_mean_std_two_points():
    mean, std = mean_std([0.98, 1.00])
    assert mean == pytest.approx(0.99)
    assert std == pytest.approx(0.014142135623730963, rel=1e-9)


def test_mean_std_identical():
    assert mean_std([0.5, 0.5, 0.5])[1] == 0.0


def test_mean_std_needs_two():
    with pytest.raises(ValueError):
        mean_std([1.0])


def test_kv_round_trip(tmp_path):
    items = {"oa": 0.1 + 0.2, "seed": 4, "loss": "softmax+sml"}
    write_kv(tmp_path / "r.txt", items)
    back = read_kv(tmp_path / "r.txt")
    assert float(back["oa"]) == 0.1 + 0.2
    assert back["loss"] == "softmax+sml"
