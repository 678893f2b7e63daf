"""Fusion output containers shared by both fusion methods and the metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tpmb import PoissonIntensity


@dataclass
class BernoulliComponent:
    """One fused potential object: existence, state mean and covariance."""
    existence: float
    mean: np.ndarray  # (4,)
    cov: np.ndarray   # (4, 4)


@dataclass
class FusionOutput:
    """Multi-Bernoulli density over current object states."""
    components: list[BernoulliComponent] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.components)

    def existences(self) -> np.ndarray:
        return np.array([c.existence for c in self.components])


def extract_estimates(output: FusionOutput,
                      threshold: float) -> list[BernoulliComponent]:
    """Components whose existence probability strictly exceeds `threshold`."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    return [c for c in output.components if c.existence > threshold]


def empty_poisson() -> PoissonIntensity:
    return PoissonIntensity.empty()
