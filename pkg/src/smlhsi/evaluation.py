"""Accuracy metrics, classification maps and multi-run statistics."""
from dataclasses import dataclass, field

import numpy as np

from .data import extract_patches


def confusion_matrix(true, pred, num_classes):
    """Rows are true classes, columns predicted (both dense 0-based)."""
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


@dataclass
class Metrics:
    oa: float
    aa: float
    kappa: float
    per_class: np.ndarray               # nan where a class has no support
    unsupported: list = field(default_factory=list)


def metrics(cm):
    """Overall accuracy, average per-class accuracy and Cohen's kappa.

    Classes with an empty row are left out of AA and listed in
    ``unsupported``.
    """
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    rows = cm.sum(axis=1)
    cols = cm.sum(axis=0)
    diag = np.diag(cm)
    oa = diag.sum() / total
    supported = rows > 0
    per_class = np.full(len(cm), np.nan)
    per_class[supported] = diag[supported] / rows[supported]
    aa = per_class[supported].mean()
    p_e = (rows * cols).sum() / total**2
    kappa = (oa - p_e) / (1.0 - p_e) if p_e < 1.0 else (1.0 if oa == 1.0 else 0.0)
    return Metrics(float(oa), float(aa), float(kappa), per_class,
                   [int(k) for k in np.flatnonzero(~supported)])


def fisher_ratio(features, labels):
    """trace(between-class scatter) / trace(within-class scatter)."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    overall = features.mean(axis=0)
    between = 0.0
    within = 0.0
    for k in np.unique(labels):
        fk = features[labels == k]
        mk = fk.mean(axis=0)
        between += len(fk) * float((mk - overall) @ (mk - overall))
        within += float(((fk - mk) ** 2).sum())
    return between / within


def classify_cube(net, cube, p=5, chunk=1024):
    """Predicted cube-space label map (1-based) over labeled pixels; 0 elsewhere."""
    if net.input_shape != (p, p, cube.bands):
        raise ValueError(f"network expects patches {net.input_shape}, cube gives {(p, p, cube.bands)}")
    coords = cube.labeled_coords()
    out = np.zeros(cube.labels.shape, dtype=np.int64)
    for start in range(0, len(coords), chunk):
        part = coords[start:start + chunk]
        pred = net.predict(extract_patches(cube, part, p).patches)
        out[part[:, 0], part[:, 1]] = pred + 1
    return out


def predict_coords(net, cube, coords, p=5, chunk=1024):
    """(0-based predictions, embeddings) at ``coords``, in chunks of fixed size
    so training-time and reloaded evaluations run identical arithmetic."""
    feats, preds = [], []
    for start in range(0, len(coords), chunk):
        x = extract_patches(cube, coords[start:start + chunk], p).patches
        f, logits, _ = net.forward(x)
        feats.append(f)
        preds.append(np.argmax(logits, axis=1))
    if not feats:
        return np.empty(0, dtype=np.int64), np.empty((0, net.embedding_dim))
    return np.concatenate(preds), np.concatenate(feats)


# --- portable pixmap maps ---------------------------------------------------

DEFAULT_PALETTE = [
    (0, 0, 0),
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
    (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
]


def encode_ppm(label_map, palette=DEFAULT_PALETTE):
    """Binary P6 pixmap; label 0 (background) maps to palette[0]."""
    label_map = np.asarray(label_map, dtype=np.int64)
    top = int(label_map.max()) if label_map.size else 0
    if top >= len(palette) or label_map.min() < 0:
        raise ValueError(f"palette has {len(palette)} colours, map needs index {top}")
    colours = np.asarray(palette, dtype=np.uint8)
    h, w = label_map.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + colours[label_map].tobytes()


def render_map(label_map, path, palette=DEFAULT_PALETTE):
    with open(path, "wb") as fh:
        fh.write(encode_ppm(label_map, palette))


def decode_ppm(raw):
    """Return an (H, W, 3) uint8 image from P6 bytes."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError("not an 8-bit P6 pixmap")
    w, h = int(tokens[1]), int(tokens[2])
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return pixels.reshape(h, w, 3)


def image_to_labels(image, palette=DEFAULT_PALETTE):
    colours = np.asarray(palette, dtype=np.uint8)
    match = (image[:, :, None, :] == colours[None, None]).all(axis=-1)
    if not match.any(axis=-1).all():
        raise ValueError("image holds colours outside the palette")
    return np.argmax(match, axis=-1)


# --- multi-run statistics ----------------------------------------------------

def mean_std(values):
    """Sample mean and standard deviation (n - 1 denominator)."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2:
        raise ValueError("need at least two runs")
    return float(values.mean()), float(values.std(ddof=1))


def write_kv(path, items):
    """Flat ``key=value`` report; floats written with repr for exact reload."""
    with open(path, "w") as fh:
        for key, value in items.items():
            if isinstance(value, (float, np.floating)):
                value = repr(float(value))
            fh.write(f"{key}={value}\n")


def read_kv(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                key, _, value = line.partition("=")
                out[key.strip()] = value.strip()
    return out
