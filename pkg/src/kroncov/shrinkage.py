"""Ledoit-Wolf shrinkage toward a scaled identity.

The shrinkage weight is the Ledoit-Wolf coefficient of the sample covariance.
It is then applied to the structured estimate, with the target scaled by the
structured estimate's own trace. Because the structured estimate has lower
variance than the sample covariance, this weight tends to over-shrink.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .estimator import KronCovModel, _as_samples, shrink_matrix

__all__ = ["ShrinkageResult", "ledoit_wolf_rho", "shrink", "shrink_covariance"]


class ShrinkageResult(NamedTuple):
    rho: float
    target_scale: float
    sigma: np.ndarray


def ledoit_wolf_rho(samples) -> float:
    """Ledoit-Wolf shrinkage intensity from ``(n, d)`` samples.

    With ``S`` the ``1/n`` sample covariance, ``m = tr(S)/d``,
    ``d2 = ||S - mI||^2/d`` and
    ``b2 = min(d2, sum_i ||x_i x_i' - S||^2 / (n^2 d))``, returns ``b2/d2``
    (1 when ``d2 == 0``).
    """
    X = _as_samples(samples)
    n, d = X.shape
    Xc = X - X.mean(axis=0)
    S = Xc.T @ Xc / n
    m = np.trace(S) / d
    d2 = (np.sum(S**2) - 2 * m * np.trace(S) + m * m * d) / d
    if d2 <= 0:
        return 1.0
    # ||x x' - S||^2 = ||x||^4 - 2 x'Sx + ||S||^2
    sq = np.einsum("ij,ij->i", Xc, Xc)
    quad = np.einsum("ij,jk,ik->i", Xc, S, Xc)
    bbar2 = np.sum(sq**2 - 2 * quad + np.sum(S**2)) / (n * n * d)
    b2 = min(max(bbar2, 0.0), d2)
    return float(np.clip(b2 / d2, 0.0, 1.0))


def shrink_covariance(sigma, rho: float) -> ShrinkageResult:
    sigma = np.asarray(sigma, dtype=float)
    m = float(np.trace(sigma) / sigma.shape[0])
    return ShrinkageResult(float(rho), m, shrink_matrix(sigma, rho))


def shrink(model: KronCovModel, rho: float) -> KronCovModel:
    """Return ``model`` with its structured covariance shrunk by ``rho``.

    Replaces any previous shrinkage rather than compounding it, and drops
    any eigenvalue floor; use :func:`ensure_positive_definite` afterwards if
    the input may be indefinite.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    return model.with_(rho=float(rho), eig_floor_applied=False)
