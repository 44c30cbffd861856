"""Dense float64 matrix helpers and seeded randomness.

Matrices are plain 2-D ``numpy.ndarray`` objects in C (row-major) order,
double precision throughout. The helpers here add the shape checking the
rest of the package relies on; numerics are delegated to numpy.

Randomness: :class:`Rng` wraps ``numpy.random.Generator`` seeded from a
PCG64 bit generator. Normal deviates come from numpy's ziggurat sampler on
that stream, so a fixed seed reproduces the same matrices on every run.
Named substreams are derived with ``SeedSequence(seed, spawn_key=(k,))``,
which keeps independent concerns (init, data order, task shuffling) from
perturbing each other's streams.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError, ShapeError

Matrix = np.ndarray


def as_matrix(data) -> Matrix:
    """Coerce nested lists / arrays to a 2-D float64 row-major matrix."""
    m = np.array(data, dtype=np.float64, order="C")
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"expected a 2-D matrix, got array of shape {m.shape}")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product a @ b with an explicit inner-dimension check."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def flat_dot(a: Matrix, b: Matrix) -> float:
    """Inner product over flattened entries; operands must share a shape."""
    if a.shape != b.shape:
        raise ShapeError(f"flat_dot: shapes {a.shape} and {b.shape} differ")
    return float(np.dot(a.ravel(), b.ravel()))


def frob_norm(a: Matrix) -> float:
    """Frobenius norm, sqrt of the self flat_dot."""
    return float(np.linalg.norm(a.ravel()))


class Rng:
    """Deterministic random source: PCG64 stream behind numpy's Generator.

    The same (seed, spawn_key) pair yields the same sequence of draws; all
    sampling in the package goes through this class so that experiment seeds
    fully determine every output.
    """

    def __init__(self, seed: int, _spawn_key: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ParameterError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.spawn_key = _spawn_key
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=_spawn_key))
        )

    def child(self, stream: int) -> "Rng":
        """Independent named substream; `stream` indices are fixed per use site."""
        return Rng(self.seed, self.spawn_key + (int(stream),))

    def normal(self, rows: int, cols: int, sigma: float = 1.0) -> Matrix:
        return gaussian_matrix(rows, cols, sigma, self)

    def permutation(self, n: int) -> list[int]:
        return [int(i) for i in self._gen.permutation(n)]

    def integers(self, low: int, high: int, size: int | None = None):
        return self._gen.integers(low, high, size=size)

    def standard_normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)


def gaussian_matrix(rows: int, cols: int, sigma: float, rng: Rng) -> Matrix:
    """rows x cols matrix of i.i.d. N(0, sigma^2) entries drawn from rng."""
    if rows < 1 or cols < 1:
        raise ParameterError(f"gaussian_matrix: dimensions must be >= 1, got {rows}x{cols}")
    if not sigma > 0:
        raise ParameterError(f"gaussian_matrix: sigma must be > 0, got {sigma}")
    return rng.standard_normal((rows, cols)) * sigma
