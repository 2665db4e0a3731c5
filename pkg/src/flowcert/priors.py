"""Isotropic Gaussian initialization distribution."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PriorSpec:
    """Centered isotropic Gaussian on R^N; ``variance`` defaults to 1/N."""

    N: int
    variance: float | None = None

    def __post_init__(self) -> None:
        if self.N < 1:
            raise ValueError(f"N must be >= 1, got {self.N}")
        if self.variance is None:
            object.__setattr__(self, "variance", 1.0 / self.N)
        if not self.variance > 0:
            raise ValueError(f"variance must be positive, got {self.variance}")

    def sample(self, seed: int | np.random.SeedSequence) -> np.ndarray:
        # PCG64 is pinned explicitly so draws stay replayable across numpy releases
        rng = np.random.Generator(np.random.PCG64(seed))
        return rng.normal(0.0, math.sqrt(self.variance), size=self.N)

    def log_density(self, h: np.ndarray) -> float:
        h = np.asarray(h, dtype=float).ravel()
        if h.size != self.N:
            raise ValueError(f"expected {self.N} parameters, got {h.size}")
        return float(-(h @ h) / (2.0 * self.variance)
                     - 0.5 * self.N * math.log(2.0 * math.pi * self.variance))

    def log_ratio(self, h0: np.ndarray, hT: np.ndarray) -> float:
        """log rho0(h0) - log rho0(hT); the normalizer cancels and is skipped."""
        h0 = np.asarray(h0, dtype=float).ravel()
        hT = np.asarray(hT, dtype=float).ravel()
        if h0.size != self.N or hT.size != self.N:
            raise ValueError(f"expected {self.N} parameters")
        return float((hT @ hT - h0 @ h0) / (2.0 * self.variance))


def sample(spec: PriorSpec, seed: int | np.random.SeedSequence) -> np.ndarray:
    return spec.sample(seed)


def log_density(spec: PriorSpec, h: np.ndarray) -> float:
    return spec.log_density(h)
