"""Sparsifying compression of transmitted update deltas.

Two coordinate selectors: keep the K largest-magnitude coordinates, or K
uniformly random coordinates scaled by d/K so the operator is unbiased in
expectation. Payloads carry the kept coordinates only; `densify` restores a
full-length vector for server-side aggregation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

TOP_K = "top_k"
RAND_K = "rand_k"


@dataclass(frozen=True)
class SparseDelta:
    """K stored coordinates of a length-`dim` vector, indices strictly increasing."""

    indices: np.ndarray
    values: np.ndarray
    dim: int
    scaling: float = 1.0

    def __post_init__(self) -> None:
        if self.indices.shape != self.values.shape:
            raise ConfigurationError("indices and values must have equal length")
        if len(self.indices) > 0 and np.any(np.diff(self.indices) <= 0):
            raise ConfigurationError("indices must be strictly increasing")

    def densify(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.values * self.scaling
        return out


def _check_k(k: int, dim: int) -> None:
    if not 1 <= k <= dim:
        raise ConfigurationError(f"K={k} out of range for dimension {dim}")


def top_k(delta: np.ndarray, k: int) -> SparseDelta:
    """Keep the K largest-|value| coordinates, ties broken by lower index."""
    dim = delta.shape[0]
    _check_k(k, dim)
    # Stable sort on -|v| keeps the lower index first among equal magnitudes.
    order = np.argsort(-np.abs(delta), kind="stable")[:k]
    indices = np.sort(order)
    return SparseDelta(indices=indices, values=delta[indices], dim=dim, scaling=1.0)


def rand_k(delta: np.ndarray, k: int, rng: np.random.Generator) -> SparseDelta:
    """Keep K uniformly drawn coordinates, scaled by d/K for unbiasedness."""
    dim = delta.shape[0]
    _check_k(k, dim)
    indices = np.sort(rng.choice(dim, size=k, replace=False))
    return SparseDelta(indices=indices, values=delta[indices], dim=dim, scaling=dim / k)


@dataclass(frozen=True)
class Compressor:
    """Config-level sparsifier: K is expressed as a fraction of the dimension."""

    kind: str
    fraction: float

    def __post_init__(self) -> None:
        if self.kind not in (TOP_K, RAND_K):
            raise ConfigurationError(f"unknown compressor kind: {self.kind!r}")
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigurationError("compression fraction must lie in (0, 1]")

    def k_for(self, dim: int) -> int:
        return min(dim, max(1, int(np.floor(self.fraction * dim + 0.5))))

    def apply(self, delta: np.ndarray, rng: np.random.Generator) -> SparseDelta:
        k = self.k_for(delta.shape[0])
        if self.kind == TOP_K:
            return top_k(delta, k)
        return rand_k(delta, k, rng)
