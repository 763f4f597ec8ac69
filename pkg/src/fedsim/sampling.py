"""Client-sampling strategies behind one interface.

A strategy returns a duplicate-free subset of a requested size from the
currently available clients. Three kinds:

- uniform: without replacement, equal probability;
- pow_d: draw a uniform candidate pool of size D, keep the m members with the
  highest last-reported local loss (never-seen clients rank as +inf, which
  forces exploration; ties break on lower client id);
- valuation: weighted without replacement, proportional to fixed per-client
  valuations (dataset sizes by default).

Loss bookkeeping is last-write: `observe_losses` overwrites a client's entry
with its most recent reported training loss.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence

import numpy as np

from .errors import ConfigurationError

UNIFORM = "uniform"
POW_D = "pow_d"
VALUATION = "valuation"


class SamplingStrategy:
    """Base contract: subsets of exactly the requested size, ids unique."""

    kind = "base"

    def __init__(self, num_clients: int, rng: np.random.Generator):
        if num_clients < 1:
            raise ConfigurationError("num_clients must be >= 1")
        self.num_clients = num_clients
        self.rng = rng

    def sample(self, m: int, available: Sequence[int]) -> list[int]:
        raise NotImplementedError

    def observe_losses(self, losses: Mapping[int, float]) -> None:
        """Record the latest local training loss per client. Default: ignore."""

    def _check_request(self, m: int, available: Sequence[int]) -> None:
        if not 1 <= m <= len(available):
            raise ConfigurationError(
                f"cannot sample {m} clients from {len(available)} available"
            )


class UniformSampling(SamplingStrategy):
    kind = UNIFORM

    def sample(self, m: int, available: Sequence[int]) -> list[int]:
        self._check_request(m, available)
        picked = self.rng.choice(np.asarray(available), size=m, replace=False)
        return sorted(int(i) for i in picked)


class PowDSampling(SamplingStrategy):
    kind = POW_D

    def __init__(self, num_clients: int, pool_size: int, rng: np.random.Generator):
        super().__init__(num_clients, rng)
        if not 1 <= pool_size <= num_clients:
            raise ConfigurationError("pool_size must lie in [1, num_clients]")
        self.pool_size = pool_size
        self.losses = np.full(num_clients, np.inf)

    def observe_losses(self, losses: Mapping[int, float]) -> None:
        for cid, value in losses.items():
            self.losses[cid] = value

    def sample(self, m: int, available: Sequence[int]) -> list[int]:
        self._check_request(m, available)
        pool_size = min(self.pool_size, len(available))
        if m > pool_size:
            raise ConfigurationError(
                f"cannot take {m} clients from a candidate pool of {pool_size}"
            )
        pool = self.rng.choice(np.asarray(available), size=pool_size, replace=False)
        ranked = sorted((int(i) for i in pool), key=lambda cid: (-self.losses[cid], cid))
        return sorted(ranked[:m])


class ValuationSampling(SamplingStrategy):
    kind = VALUATION

    def __init__(self, num_clients: int, valuations: np.ndarray, rng: np.random.Generator):
        super().__init__(num_clients, rng)
        v = np.asarray(valuations, dtype=float)
        if v.shape != (num_clients,) or np.any(v <= 0):
            raise ConfigurationError("valuations must be positive, one per client")
        self.valuations = v / v.sum()

    def sample(self, m: int, available: Sequence[int]) -> list[int]:
        self._check_request(m, available)
        ids = np.asarray(available)
        probs = self.valuations[ids]
        probs = probs / probs.sum()
        picked = self.rng.choice(ids, size=m, replace=False, p=probs)
        return sorted(int(i) for i in picked)


def build_strategy(
    config: Mapping, num_clients: int, data_sizes: np.ndarray, rng: np.random.Generator
) -> SamplingStrategy:
    kind = config.get("kind", UNIFORM)
    if kind == UNIFORM:
        return UniformSampling(num_clients, rng)
    if kind == POW_D:
        return PowDSampling(num_clients, int(config["pool_size"]), rng)
    if kind == VALUATION:
        return ValuationSampling(num_clients, np.asarray(data_sizes, dtype=float), rng)
    raise ConfigurationError(f"unknown sampling strategy: {kind!r}")
