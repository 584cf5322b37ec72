"""Dense 2-D float kernels and seeded randomness for the hand-written network stack.

Everything operates on plain numpy arrays in row-major layout with the batch
dimension on rows. Training runs at float32; float64 exists for gradient
checking, where float32 rounding would swamp a finite-difference comparison.
"""
from __future__ import annotations

import math

import numpy as np

PRECISIONS = {32: np.float32, 64: np.float64}


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def resolve_dtype(precision: int):
    if precision not in PRECISIONS:
        raise ValueError(f"precision must be one of {sorted(PRECISIONS)}, got {precision}")
    return PRECISIONS[precision]


class Rng:
    """Counter-based random stream (Philox) owned explicitly by the caller.

    A stream is fully determined by ``(seed, path)``, where ``path`` is the
    tuple of ``child`` tags used to derive it. Independent consumers
    (parameter init, dropout masks, batch shuffling) hold their own child
    streams, so adding a consumer never shifts another one's draws. There is
    no global RNG anywhere in the package.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(int(t) for t in _path)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, tag: int) -> "Rng":
        """Derive an independent stream; the same (seed, tag path) always yields it."""
        return Rng(self.seed, self.path + (int(tag),))

    def normal(self, loc=0.0, scale=1.0, size=None, dtype=np.float32):
        out = self._gen.normal(loc, scale, size)
        return np.asarray(out).astype(dtype, copy=False)

    def random(self, size=None):
        return self._gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of two 2-D arrays, with explicit shape errors."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}: inner dimensions differ")
    return a @ b


def xavier_normal_init(rows: int, cols: int, rng: Rng, dtype=np.float32) -> np.ndarray:
    """Weight matrix drawn from N(0, 2/(rows+cols)), i.e. unit-gain xavier normal."""
    if rows < 1 or cols < 1:
        raise ValueError(f"init shape must be positive, got ({rows}, {cols})")
    std = math.sqrt(2.0 / (rows + cols))
    return rng.normal(0.0, std, size=(rows, cols), dtype=dtype)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Pass upstream where x > 0, zero elsewhere; the subgradient at 0 is 0."""
    if x.shape != upstream.shape:
        raise ShapeError(f"relu_backward shapes differ: {x.shape} vs {upstream.shape}")
    return upstream * (x > 0)
