"""Small shared Gaussian/linear-algebra helpers used across the filter,
fusion and metric modules."""

from __future__ import annotations

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))

# Probabilities are floored before taking logs so that impossible events
# stay representable; -log(TINY) ~ 690 dwarfs any real hypothesis cost.
TINY = 1e-300


def symmetrize(P: np.ndarray) -> np.ndarray:
    """Return (P + P^T)/2, bounding floating-point asymmetry drift."""
    return 0.5 * (P + P.T)


def log_gaussian(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """Log density of N(x; mean, cov) via a Cholesky solve."""
    d = x.shape[0]
    chol = np.linalg.cholesky(cov)
    y = np.linalg.solve(chol, x - mean)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return -0.5 * (d * LOG_2PI + logdet + float(y @ y))


def safe_log(w: float) -> float:
    """log with a floor so zero-probability events stay finite."""
    return float(np.log(max(w, TINY)))


def min_eigenvalue(P: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(symmetrize(P))[0])


def is_psd(P: np.ndarray, tol: float = 1e-9) -> bool:
    return min_eigenvalue(P) >= -tol


def moment_match(weights: np.ndarray, means: list[np.ndarray],
                 covs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Collapse a Gaussian mixture to a single moment-matched Gaussian.

    `weights` must sum to 1.
    """
    mean = sum(w * m for w, m in zip(weights, means))
    cov = np.zeros_like(covs[0])
    for w, m, P in zip(weights, means, covs):
        d = m - mean
        cov += w * (P + np.outer(d, d))
    return mean, symmetrize(cov)
