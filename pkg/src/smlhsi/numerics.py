"""Dense float64 arrays, seeded randomness and the plain SGD update.

Tensors are ``numpy.ndarray`` of dtype float64 in C (row-major) order.
Randomness comes from numpy's ``Generator`` over the PCG64 bit generator,
seeded with a 64-bit integer; the same seed gives the same stream on every
platform numpy supports.
"""
from dataclasses import dataclass

import numpy as np

_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def as_tensor(values):
    """Copy-free conversion to a C-ordered float64 array when possible."""
    return np.ascontiguousarray(values, dtype=np.float64)


def tensor_elementwise(a, b, op):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}; expected one of {sorted(_OPS)}") from None
    return fn(a, b)


def make_rng(seed):
    """Seeded PCG64 generator. ``seed`` must fit in 64 bits."""
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed, names):
    """Independent named child streams derived from one seed.

    Streams are keyed by position in ``names`` so adding a consumer at the
    end never perturbs the earlier ones.
    """
    children = np.random.SeedSequence(int(seed)).spawn(len(names))
    return {name: np.random.Generator(np.random.PCG64(child))
            for name, child in zip(names, children)}


def rng_normal(rng, shape, mean=0.0, std=1.0):
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    return mean + std * rng.standard_normal(shape)


@dataclass(frozen=True)
class SgdConfig:
    """Plain SGD. ``momentum`` defaults to 0 (the published setup names only
    the learning rate and iteration budget)."""

    learning_rate: float = 0.001
    iterations: int = 5000
    batch_size: int = 64
    momentum: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")

    def check_classes(self, num_classes):
        if self.batch_size < 2 * num_classes:
            raise ValueError(
                f"batch_size {self.batch_size} < 2 x {num_classes} classes; "
                "stratified batches could not hold two samples per class")


def sgd_step(params, grads, cfg):
    params = as_tensor(params)
    grads = as_tensor(grads)
    if params.shape != grads.shape:
        raise ValueError(f"shape mismatch: params {params.shape} vs grads {grads.shape}")
    return params - cfg.learning_rate * grads
