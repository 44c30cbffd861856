"""Low-rank adapter pairs and the adapted forward map of one linear layer.

An adapter holds the trainable pair (a, b) next to a frozen base weight w0:
the effective weight is ``w0 + (alpha / rank) * b @ a``. A fresh adapter has
b identically zero, so a freshly adapted layer computes exactly what the
frozen layer computes. Setting alpha equal to rank removes the scale factor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dense import Matrix, Rng, as_matrix, gaussian_matrix, matmul
from .errors import ParameterError, ShapeError

ADAPTER_FORMAT = "ortho-lora-adapter"
ADAPTER_FORMAT_VERSION = 1


@dataclass
class LoraAdapter:
    """Trainable pair: a is rank x k, b is d x rank, update scaled by alpha/rank."""

    a: Matrix
    b: Matrix
    rank: int
    alpha: float

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def d(self) -> int:
        return self.b.shape[0]

    @property
    def k(self) -> int:
        return self.a.shape[1]

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.a.copy(), self.b.copy(), self.rank, self.alpha)


@dataclass
class FrozenLayer:
    """Frozen base weight w0 (d x k) plus its trainable adapter."""

    w0: Matrix
    adapter: LoraAdapter

    def copy(self) -> "FrozenLayer":
        return FrozenLayer(self.w0.copy(), self.adapter.copy())


def init_adapter(d: int, k: int, rank: int, sigma: float, alpha: float, rng: Rng) -> LoraAdapter:
    """Gaussian a ~ N(0, sigma^2), zero b; rank must fit inside min(d, k)."""
    if not 1 <= rank <= min(d, k):
        raise ParameterError(
            f"init_adapter: rank {rank} outside [1, min(d={d}, k={k})={min(d, k)}]"
        )
    a = gaussian_matrix(rank, k, sigma, rng)
    b = np.zeros((d, rank), dtype=np.float64)
    return LoraAdapter(a=a, b=b, rank=rank, alpha=float(alpha))


def delta_weight(adapter: LoraAdapter) -> Matrix:
    """The d x k low-rank weight update (alpha / rank) * b @ a."""
    return adapter.scale * matmul(adapter.b, adapter.a)


def adapted_forward(layer: FrozenLayer, x: Matrix) -> Matrix:
    """w0 @ x plus the adapter contribution, computed on the cheap b(a x) route."""
    if x.ndim != 2 or x.shape[0] != layer.w0.shape[1]:
        raise ShapeError(
            f"adapted_forward: input {x.shape} does not match layer w0 {layer.w0.shape}"
        )
    ad = layer.adapter
    return matmul(layer.w0, x) + ad.scale * matmul(ad.b, matmul(ad.a, x))


def save_adapter(adapter: LoraAdapter, path: str | Path) -> None:
    """Versioned JSON dump; floats round-trip exactly via repr serialization."""
    payload = {
        "format": ADAPTER_FORMAT,
        "version": ADAPTER_FORMAT_VERSION,
        "d": adapter.d,
        "k": adapter.k,
        "rank": adapter.rank,
        "alpha": adapter.alpha,
        "a": adapter.a.tolist(),
        "b": adapter.b.tolist(),
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_adapter(path: str | Path) -> LoraAdapter:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != ADAPTER_FORMAT:
        raise ParameterError(f"{path}: not an adapter dump (format={payload.get('format')!r})")
    if payload.get("version") != ADAPTER_FORMAT_VERSION:
        raise ParameterError(f"{path}: unsupported adapter format version {payload.get('version')!r}")
    a = as_matrix(payload["a"])
    b = as_matrix(payload["b"])
    rank = int(payload["rank"])
    if a.shape != (rank, int(payload["k"])) or b.shape != (int(payload["d"]), rank):
        raise ShapeError(
            f"{path}: stored shapes a={a.shape}, b={b.shape} disagree with header "
            f"(d={payload['d']}, k={payload['k']}, rank={rank})"
        )
    return LoraAdapter(a=a, b=b, rank=rank, alpha=float(payload["alpha"]))
