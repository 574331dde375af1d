"""Patch CNN feature extractor with a linear classifier head.

The trunk is an ordered list of layers (valid conv2d, relu, flatten, dense)
ending in a dense layer whose output is the embedding. A separate dense
head maps the embedding to class logits. Gradients can enter at both the
embedding (metric losses) and the logits (cross-entropy).

Activations are channels-last: a patch batch is (N, p, p, bands).
"""
import struct
from dataclasses import dataclass

import numpy as np

from .kernels import conv2d_backward, conv2d_forward

KINDS = ("conv2d", "relu", "flatten", "dense")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out: int = 0          # conv2d out_channels / dense out_features
    kh: int = 0
    kw: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d" and min(self.out, self.kh, self.kw) < 1:
            raise ValueError("conv2d needs positive out_channels and kernel extents")
        if self.kind == "dense" and self.out < 1:
            raise ValueError("dense needs positive out_features")

    @classmethod
    def conv2d(cls, out_channels, kh, kw=None):
        return cls("conv2d", out_channels, kh, kh if kw is None else kw)

    @classmethod
    def relu(cls):
        return cls("relu")

    @classmethod
    def flatten(cls):
        return cls("flatten")

    @classmethod
    def dense(cls, out_features):
        return cls("dense", out_features)

    def __str__(self):
        if self.kind == "conv2d":
            return f"conv{self.kh}x{self.kw}@{self.out}"
        if self.kind == "dense":
            return f"dense{self.out}"
        return self.kind


def default_layers(embedding_dim=64):
    return [
        LayerSpec.conv2d(32, 3), LayerSpec.relu(),
        LayerSpec.conv2d(64, 3), LayerSpec.relu(),
        LayerSpec.flatten(),
        LayerSpec.dense(embedding_dim),
    ]


def parse_layers(text):
    """Parse ``"conv3x3@32,relu,conv3x3@64,relu,flatten,dense64"``."""
    layers = []
    for tok in (t.strip() for t in text.split(",") if t.strip()):
        if tok.startswith("conv"):
            kernel, _, out = tok[4:].partition("@")
            kh, _, kw = kernel.partition("x")
            layers.append(LayerSpec.conv2d(int(out), int(kh), int(kw or kh)))
        elif tok.startswith("dense"):
            layers.append(LayerSpec.dense(int(tok[5:])))
        elif tok in ("relu", "flatten"):
            layers.append(LayerSpec(tok))
        else:
            raise ValueError(f"cannot parse layer token {tok!r}")
    return layers


def format_layers(layers):
    return ",".join(str(s) for s in layers)


def shape_chain(input_shape, layers):
    """Per-layer output shapes; raises naming the first offending layer."""
    shape = tuple(input_shape)
    shapes = []
    for idx, spec in enumerate(layers):
        where = f"layer {idx} ({spec})"
        if spec.kind == "conv2d":
            if len(shape) != 3:
                raise ValueError(f"{where}: expects (h, w, c) input, got {shape}")
            h, w, c = shape
            if spec.kh > h or spec.kw > w:
                raise ValueError(f"{where}: kernel {spec.kh}x{spec.kw} exceeds input {h}x{w}")
            shape = (h - spec.kh + 1, w - spec.kw + 1, spec.out)
        elif spec.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif spec.kind == "dense":
            if len(shape) != 1:
                raise ValueError(f"{where}: expects flat input, got {shape}; add a flatten layer")
            shape = (spec.out,)
        shapes.append(shape)
    if not layers or layers[-1].kind != "dense":
        raise ValueError("the last trunk layer must be dense (it defines the embedding)")
    return shapes


def _fan_in(spec, in_shape):
    if spec.kind == "conv2d":
        return spec.kh * spec.kw * in_shape[-1]
    return in_shape[0]


class Cache:
    __slots__ = ("inputs", "features", "token")

    def __init__(self, inputs, features, token):
        self.inputs = inputs
        self.features = features
        self.token = token


class Network:
    """Trunk + head. ``params`` is a flat list of arrays in layer order
    (weight then bias for each conv/dense layer, then the head)."""

    def __init__(self, input_shape, layers, num_classes, params):
        self.input_shape = tuple(int(v) for v in input_shape)
        self.layers = list(layers)
        self.num_classes = int(num_classes)
        self.shapes = shape_chain(self.input_shape, self.layers)
        expected = self.param_shapes()
        if len(params) != len(expected):
            raise ValueError(f"expected {len(expected)} parameter arrays, got {len(params)}")
        for i, (p, s) in enumerate(zip(params, expected)):
            if p.shape != s:
                raise ValueError(f"parameter {i} has shape {p.shape}, expected {s}")
        self.params = [np.ascontiguousarray(p, dtype=np.float64) for p in params]
        self._version = 0

    @property
    def embedding_dim(self):
        return self.shapes[-1][0]

    def param_shapes(self):
        shapes = []
        in_shape = self.input_shape
        for spec, out_shape in zip(self.layers, self.shapes):
            if spec.kind == "conv2d":
                shapes += [(spec.out, spec.kh, spec.kw, in_shape[-1]), (spec.out,)]
            elif spec.kind == "dense":
                shapes += [(spec.out, in_shape[0]), (spec.out,)]
            in_shape = out_shape
        d = self.shapes[-1][0]
        shapes += [(self.num_classes, d), (self.num_classes,)]
        return shapes

    def set_params(self, params):
        for dst, src in zip(self.params, params):
            dst[...] = src
        self._version += 1

    def _token(self):
        return (id(self), self._version)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"input patches have shape {x.shape[1:]}, network expects {self.input_shape}")
        inputs = []
        k = 0
        for spec in self.layers:
            inputs.append(x)
            if spec.kind == "conv2d":
                x = conv2d_forward(x, self.params[k], self.params[k + 1])
                k += 2
            elif spec.kind == "relu":
                x = np.maximum(x, 0.0)
            elif spec.kind == "flatten":
                x = x.reshape(x.shape[0], -1)
            else:
                x = x @ self.params[k].T + self.params[k + 1]
                k += 2
        features = x
        logits = features @ self.params[k].T + self.params[k + 1]
        return features, logits, Cache(inputs, features, self._token())

    def backward(self, cache, d_features, d_logits):
        """Gradients for every parameter, in ``params`` order. Never mutates weights."""
        if cache is None or cache.token != self._token():
            raise ValueError("stale or missing forward cache; run forward again")
        n = cache.features.shape[0]
        d = self.embedding_dim
        d_logits = np.asarray(d_logits, dtype=np.float64)
        if d_logits.shape != (n, self.num_classes):
            raise ValueError(f"d_logits shape {d_logits.shape}, expected {(n, self.num_classes)}")
        if d_features is None:
            d_features = np.zeros((n, d))
        d_features = np.asarray(d_features, dtype=np.float64)
        if d_features.shape != (n, d):
            raise ValueError(f"d_features shape {d_features.shape}, expected {(n, d)}")

        grads = [None] * len(self.params)
        k = len(self.params) - 2
        w_head = self.params[k]
        grads[k] = d_logits.T @ cache.features
        grads[k + 1] = d_logits.sum(axis=0)
        g = d_logits @ w_head + d_features

        for spec, x in zip(reversed(self.layers), reversed(cache.inputs)):
            if spec.kind == "dense":
                k -= 2
                grads[k] = g.T @ x
                grads[k + 1] = g.sum(axis=0)
                g = g @ self.params[k]
            elif spec.kind == "conv2d":
                k -= 2
                g, grads[k], grads[k + 1] = conv2d_backward(x, self.params[k], g)
            elif spec.kind == "relu":
                g = g * (x > 0)
            else:
                g = g.reshape(x.shape)
        return grads

    def predict(self, x, chunk=1024):
        """Argmax class per patch; ties go to the lower class id."""
        out = np.empty(len(x), dtype=np.int64)
        for start in range(0, len(x), chunk):
            _, logits, _ = self.forward(x[start:start + chunk])
            out[start:start + chunk] = np.argmax(logits, axis=1)
        return out

    def embed(self, x, chunk=1024):
        feats = [self.forward(x[s:s + chunk])[0] for s in range(0, len(x), chunk)]
        return np.concatenate(feats) if feats else np.empty((0, self.embedding_dim))


def init_weights(input_shape, layers, num_classes, rng):
    """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
    shapes = shape_chain(input_shape, layers)
    params = []
    in_shape = tuple(input_shape)
    for spec, out_shape in zip(layers, shapes):
        if spec.kind in ("conv2d", "dense"):
            fan_in = _fan_in(spec, in_shape)
            if spec.kind == "conv2d":
                wshape = (spec.out, spec.kh, spec.kw, in_shape[-1])
            else:
                wshape = (spec.out, in_shape[0])
            params.append(rng.standard_normal(wshape) * np.sqrt(2.0 / fan_in))
            params.append(np.zeros(spec.out))
        in_shape = out_shape
    d = shapes[-1][0]
    params.append(rng.standard_normal((num_classes, d)) * np.sqrt(2.0 / d))
    params.append(np.zeros(num_classes))
    return Network(input_shape, layers, num_classes, params)


# --- checkpoint file -------------------------------------------------------

MAGIC = b"SMLN"
FORMAT_VERSION = 1
_KIND_CODE = {k: i for i, k in enumerate(KINDS)}


class CheckpointError(ValueError):
    pass


def save_checkpoint(net, path):
    """Layout (little-endian): b"SMLN", u16 version, u32 in_h, in_w, in_c,
    u32 num_classes, u32 n_layers, n_layers x (u8 kind, u32 out, u32 kh,
    u32 kw), then every parameter array as raw f64 in ``params`` order."""
    parts = [MAGIC, struct.pack("<H", FORMAT_VERSION),
             struct.pack("<4I", *net.input_shape, net.num_classes),
             struct.pack("<I", len(net.layers))]
    for spec in net.layers:
        parts.append(struct.pack("<B3I", _KIND_CODE[spec.kind], spec.out, spec.kh, spec.kw))
    for p in net.params:
        parts.append(p.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    return decode_checkpoint(raw)


def decode_checkpoint(raw):
    if raw[:4] != MAGIC:
        raise CheckpointError("bad magic")
    try:
        (version,) = struct.unpack_from("<H", raw, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        in_h, in_w, in_c, num_classes = struct.unpack_from("<4I", raw, 6)
        (n_layers,) = struct.unpack_from("<I", raw, 22)
        off = 26
        layers = []
        for _ in range(n_layers):
            code, out, kh, kw = struct.unpack_from("<B3I", raw, off)
            off += 13
            if code >= len(KINDS):
                raise CheckpointError(f"unknown layer code {code}")
            layers.append(LayerSpec(KINDS[code], out, kh, kw))
    except struct.error:
        raise CheckpointError("truncated header") from None
    skeleton = Network.__new__(Network)
    skeleton.input_shape = (in_h, in_w, in_c)
    skeleton.layers = layers
    skeleton.num_classes = num_classes
    skeleton.shapes = shape_chain(skeleton.input_shape, layers)
    params = []
    for shape in skeleton.param_shapes():
        size = int(np.prod(shape))
        end = off + 8 * size
        if end > len(raw):
            raise CheckpointError("truncated payload")
        params.append(np.frombuffer(raw, dtype="<f8", count=size, offset=off).astype(np.float64).reshape(shape))
        off = end
    if off != len(raw):
        raise CheckpointError(f"{len(raw) - off} trailing bytes after payload")
    return Network((in_h, in_w, in_c), layers, num_classes, params)
