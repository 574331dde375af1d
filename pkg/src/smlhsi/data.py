"""Hyperspectral cubes: synthetic generation, patches, splits and file I/O.

Labels in a cube are 1-based (0 = unlabeled). Everything fed to the
network uses dense 0-based class ids (cube label - 1).
"""
import csv
import struct
from dataclasses import dataclass, field

import numpy as np


@dataclass
class HyperspectralCube:
    radiance: np.ndarray        # (H, W, B) float64
    labels: np.ndarray          # (H, W) int, 0 = unlabeled
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        self.radiance = np.ascontiguousarray(self.radiance, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.radiance.ndim != 3:
            raise ValueError(f"radiance must be H x W x B, got {self.radiance.shape}")
        if self.labels.shape != self.radiance.shape[:2]:
            raise ValueError(f"labels {self.labels.shape} do not match radiance {self.radiance.shape[:2]}")
        if not self.class_names:
            top = int(self.labels.max()) if self.labels.size else 0
            self.class_names = [f"class{k}" for k in range(1, top + 1)]
        if self.labels.min() < 0 or self.labels.max() > self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes}]")
        if not np.isfinite(self.radiance).all():
            raise ValueError("radiance contains non-finite values")

    @property
    def height(self):
        return self.radiance.shape[0]

    @property
    def width(self):
        return self.radiance.shape[1]

    @property
    def bands(self):
        return self.radiance.shape[2]

    @property
    def num_classes(self):
        return len(self.class_names)

    def labeled_coords(self):
        return np.argwhere(self.labels > 0)


@dataclass
class SampleBatch:
    patches: np.ndarray         # (N, p, p, B)
    labels: np.ndarray          # (N,) dense 0-based
    coords: np.ndarray          # (N, 2) row, col

    def __len__(self):
        return len(self.labels)


def _smooth_curve(rng, bands, n_bumps=4):
    """Sum of random gaussian bumps along the band axis."""
    t = np.linspace(0.0, 1.0, bands)
    curve = np.zeros(bands)
    for _ in range(n_bumps):
        centre = rng.uniform(0.0, 1.0)
        width = rng.uniform(0.08, 0.3)
        curve += rng.normal() * np.exp(-0.5 * ((t - centre) / width) ** 2)
    return curve


def _box3(img):
    """3x3 box filter over the two spatial axes, edges reflected."""
    padded = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="reflect") if min(img.shape[:2]) > 1 \
        else np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    h, w = img.shape[:2]
    for di in range(3):
        for dj in range(3):
            out += padded[di:di + h, dj:dj + w]
    return out / 9.0


def class_mean_spectra(rng, bands, num_classes, separation):
    """Smooth per-class spectra whose mean pairwise distance is ``separation``."""
    base = 1.0 + 0.5 * _smooth_curve(rng, bands)
    offsets = np.stack([_smooth_curve(rng, bands) for _ in range(num_classes)])
    offsets -= offsets.mean(axis=0)
    i, j = np.triu_indices(num_classes, 1)
    mean_dist = np.linalg.norm(offsets[i] - offsets[j], axis=1).mean()
    if mean_dist == 0:
        raise ValueError("degenerate class spectra; try another seed")
    return base + offsets * (separation / mean_dist)


def generate_synthetic(rng, height, width, bands, num_classes, region_scale=3,
                       spectral_sep=3.0, noise_std=1.0, unlabeled_fraction=0.0):
    """Voronoi-region label map with noisy class spectra.

    ``region_scale`` sites are placed per class at distinct pixels; each
    pixel takes the class of its nearest site. Class mean spectra are spread
    so that their mean pairwise distance is ``spectral_sep * noise_std``
    (``spectral_sep`` alone when ``noise_std`` is 0). Per-pixel gaussian
    noise is smoothed with a 3x3 box filter before being added, so pixels of
    one class share one spectrum exactly when ``noise_std`` is 0.
    """
    if min(height, width, bands) < 1:
        raise ValueError("height, width and bands must be >= 1")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if region_scale < 1:
        raise ValueError("region_scale must be >= 1")
    if noise_std < 0 or spectral_sep < 0:
        raise ValueError("noise_std and spectral_sep must be >= 0")
    n_sites = num_classes * region_scale
    if n_sites > height * width:
        raise ValueError(f"{n_sites} Voronoi sites do not fit in a {height}x{width} image")

    flat = rng.choice(height * width, size=n_sites, replace=False)
    sites = np.stack(np.unravel_index(flat, (height, width)), axis=1)
    site_class = np.arange(n_sites) % num_classes + 1
    rr, cc = np.mgrid[0:height, 0:width]
    d2 = (rr[..., None] - sites[:, 0]) ** 2 + (cc[..., None] - sites[:, 1]) ** 2
    labels = site_class[np.argmin(d2, axis=-1)]

    scale = spectral_sep * noise_std if noise_std > 0 else spectral_sep
    means = class_mean_spectra(rng, bands, num_classes, scale)
    noise = rng.standard_normal((height, width, bands)) * noise_std
    radiance = means[labels - 1] + _box3(noise)

    if unlabeled_fraction > 0:
        blank = rng.random((height, width)) < unlabeled_fraction
        # keep every site pixel labeled so each class survives
        blank[sites[:, 0], sites[:, 1]] = False
        labels = np.where(blank, 0, labels)
    names = [f"class{k}" for k in range(1, num_classes + 1)]
    return HyperspectralCube(radiance, labels, names)


def _reflect(idx, n):
    # mirror without repeating the edge: -1 -> 1, n -> n-2
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def extract_patches(cube, coords, p=5):
    if p < 1 or p % 2 == 0:
        raise ValueError(f"patch size must be odd and positive, got {p}")
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    h, w = cube.height, cube.width
    bad = (coords[:, 0] < 0) | (coords[:, 0] >= h) | (coords[:, 1] < 0) | (coords[:, 1] >= w)
    if bad.any():
        r, c = coords[np.argmax(bad)]
        raise IndexError(f"coordinate ({r}, {c}) outside {h}x{w} cube")
    half = p // 2
    offs = np.arange(-half, half + 1)
    rows = _reflect(coords[:, 0:1] + offs, h)         # (N, p)
    cols = _reflect(coords[:, 1:2] + offs, w)
    patches = cube.radiance[rows[:, :, None], cols[:, None, :]]
    labels = cube.labels[coords[:, 0], coords[:, 1]] - 1
    return SampleBatch(np.ascontiguousarray(patches), labels, coords)


@dataclass(frozen=True)
class SplitSpec:
    per_class_train: int = 200
    seed: int = 0


def stratified_split(cube, spec, rng=None):
    """Exactly ``per_class_train`` random pixels per class for training, the
    rest of the labeled pixels for testing. Coordinates come back sorted."""
    if rng is None:
        from .numerics import make_rng
        rng = make_rng(spec.seed)
    train, test = [], []
    for k in range(1, cube.num_classes + 1):
        coords = np.argwhere(cube.labels == k)
        if len(coords) <= spec.per_class_train:
            raise ValueError(
                f"class {k} ({cube.class_names[k - 1]}) has {len(coords)} labeled pixels, "
                f"need more than {spec.per_class_train}")
        pick = rng.permutation(len(coords))
        train.append(coords[pick[:spec.per_class_train]])
        test.append(coords[pick[spec.per_class_train:]])
    return _sorted_coords(np.concatenate(train)), _sorted_coords(np.concatenate(test))


def _sorted_coords(c):
    return c[np.lexsort((c[:, 1], c[:, 0]))]


# --- HSC1 cube file --------------------------------------------------------

CUBE_MAGIC = b"HSC1"


class CubeFormatError(ValueError):
    """Malformed cube file. ``code`` is one of: bad_magic, truncated,
    label_out_of_range, bad_name, trailing_bytes."""

    def __init__(self, code, message):
        super().__init__(f"{message} [{code}]")
        self.code = code


def encode_cube(cube):
    """b"HSC1", u32 H, W, B, n_classes, then per class a u32 byte length and
    UTF-8 name, then f64 radiance (H, W, B order) and u16 labels, all
    little-endian."""
    h, w, b = cube.radiance.shape
    parts = [CUBE_MAGIC, struct.pack("<4I", h, w, b, cube.num_classes)]
    for name in cube.class_names:
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw]
    parts.append(cube.radiance.astype("<f8").tobytes())
    parts.append(cube.labels.astype("<u2").tobytes())
    return b"".join(parts)


def decode_cube(raw):
    if raw[:4] != CUBE_MAGIC:
        raise CubeFormatError("bad_magic", "bad magic")
    if len(raw) < 20:
        raise CubeFormatError("truncated", "truncated header")
    h, w, b, n_classes = struct.unpack_from("<4I", raw, 4)
    off = 20
    names = []
    for _ in range(n_classes):
        if off + 4 > len(raw):
            raise CubeFormatError("truncated", "truncated class-name table")
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        if off + n > len(raw):
            raise CubeFormatError("truncated", "truncated class name")
        try:
            names.append(raw[off:off + n].decode("utf-8"))
        except UnicodeDecodeError:
            raise CubeFormatError("bad_name", "class name is not valid UTF-8") from None
        off += n
    n_rad = h * w * b
    need = off + 8 * n_rad + 2 * h * w
    if len(raw) < need:
        raise CubeFormatError("truncated", f"payload has {len(raw)} bytes, expected {need}")
    if len(raw) > need:
        raise CubeFormatError("trailing_bytes", f"{len(raw) - need} trailing bytes")
    radiance = np.frombuffer(raw, dtype="<f8", count=n_rad, offset=off).reshape(h, w, b)
    labels = np.frombuffer(raw, dtype="<u2", count=h * w, offset=off + 8 * n_rad).reshape(h, w)
    if labels.size and labels.max() > n_classes:
        raise CubeFormatError("label_out_of_range",
                              f"label {labels.max()} exceeds class count {n_classes}")
    return HyperspectralCube(radiance.astype(np.float64), labels.astype(np.int64), names)


def write_cube(cube, path):
    with open(path, "wb") as fh:
        fh.write(encode_cube(cube))


def read_cube(path):
    with open(path, "rb") as fh:
        return decode_cube(fh.read())


def write_split(path, coords, cube):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["row", "col", "class"])
        for r, c in coords:
            out.writerow([int(r), int(c), int(cube.labels[r, c])])


def read_split(path):
    """Returns (coords, classes) with cube-space (1-based) classes."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["row", "col", "class"]:
            raise ValueError(f"{path}: expected header row,col,class, got {header}")
        rows = [(int(r), int(c), int(k)) for r, c, k in reader]
    arr = np.array(rows, dtype=np.int64).reshape(-1, 3)
    return arr[:, :2], arr[:, 2]
