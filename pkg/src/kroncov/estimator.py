"""Diagonally corrected, block-Toeplitz Kronecker PCA covariance fitting.

The low-rank part is fitted in the Toeplitz-collapsed rearranged domain by
soft-impute (iterative singular value thresholding with the masked diagonal
entries filled in from the current iterate). The diagonal correction ``U`` is
then the least-squares fit of ``kron(I, diag(U))`` to the residual diagonal.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import NamedTuple

import numpy as np
import scipy.linalg

from .kron_algebra import (
    DiagMask,
    SpaceTimeDims,
    build_diag_mask,
    derearrange,
    kron_compose,
    rearrange,
    toeplitz_collapse,
    toeplitz_embed,
    toeplitz_from_offsets,
)

log = logging.getLogger(__name__)

RANK_RTOL = 1e-10
DEFAULT_EPS_REL = 1e-6
ABS_FLOOR = 1e-12
BISECTION_STEPS = 40
DEFAULT_RANK = 2


class NumericalError(RuntimeError):
    """A solver produced non-finite values or a factorization failed."""


class NotPositiveDefiniteError(NumericalError):
    pass


@dataclass(frozen=True)
class FitConfig:
    """Solver settings.

    At most one of ``beta`` and ``target_rank`` may be set; with neither,
    the target rank defaults to 2. With
    ``target_rank`` the penalty is found by bisection. ``debias`` refits the
    hidden diagonal entries under a hard rank constraint after the convex
    solve, removing the nuclear-norm shrinkage of the retained components.
    """

    beta: float | None = None
    target_rank: int | None = None
    tol: float = 1e-6
    max_iter: int = 500
    clamp_U: bool = False
    debias: bool = True
    shrink: bool = True
    rho: float | None = None
    eps_rel: float = DEFAULT_EPS_REL

    def __post_init__(self):
        if self.beta is None and self.target_rank is None:
            object.__setattr__(self, "target_rank", DEFAULT_RANK)
        if (self.beta is None) == (self.target_rank is None):
            raise ValueError("exactly one of beta and target_rank must be set")
        if self.beta is not None and not self.beta >= 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.target_rank is not None and self.target_rank < 1:
            raise ValueError(f"target_rank must be >= 1, got {self.target_rank}")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.rho is not None and not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho override must lie in [0, 1], got {self.rho}")
        if not self.eps_rel > 0:
            raise ValueError("eps_rel must be > 0")


@dataclass(frozen=True, eq=False)
class KronCovModel:
    """Fitted mean and structured covariance.

    The covariance is ``sum_i kron(T_i, S_i) + kron(I, diag(U))``, shrunk
    toward ``trace/(pT) * I`` by ``rho`` and, if ``eig_floor_applied``,
    eigenvalue-floored at ``eps_rel * trace/(pT)``. Composition is
    deterministic, so the stored parameters fully determine the covariance.
    """

    dims: SpaceTimeDims
    mean: np.ndarray
    factors: tuple[tuple[np.ndarray, np.ndarray], ...] = ()
    U: np.ndarray = field(default=None)
    rho: float = 0.0
    eig_floor_applied: bool = False
    eps_rel: float = DEFAULT_EPS_REL
    # diagnostics, not needed to compose the covariance
    singular_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    beta: float | None = None
    converged: bool = True

    def __post_init__(self):
        p, T = self.dims.p, self.dims.T
        mean = np.asarray(self.mean, dtype=float).ravel()
        if mean.size != p * T:
            raise ValueError(f"mean has length {mean.size}, expected {p * T}")
        U = np.zeros(p) if self.U is None else np.asarray(self.U, dtype=float).ravel()
        if U.size != p:
            raise ValueError(f"U has length {U.size}, expected {p}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "U", U)
        object.__setattr__(
            self,
            "factors",
            tuple((np.asarray(a, float), np.asarray(b, float)) for a, b in self.factors),
        )
        object.__setattr__(
            self, "singular_values", np.asarray(self.singular_values, float).ravel()
        )

    @property
    def rank(self) -> int:
        return len(self.factors)

    @cached_property
    def kron_covariance(self) -> np.ndarray:
        """Unshrunk structured estimate."""
        sigma = kron_compose(self.factors, self.U, T=self.dims.T)
        return 0.5 * (sigma + sigma.T)

    @cached_property
    def covariance(self) -> np.ndarray:
        sigma = self.kron_covariance
        if self.rho > 0:
            sigma = shrink_matrix(sigma, self.rho)
        if self.eig_floor_applied:
            sigma = psd_floor(sigma, self.eps_rel)
        return sigma

    @cached_property
    def cholesky(self) -> np.ndarray:
        try:
            return scipy.linalg.cholesky(self.covariance, lower=True)
        except scipy.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError(
                "model covariance is not positive definite; apply psd_floor"
            ) from exc

    def with_(self, **changes) -> "KronCovModel":
        return replace(self, **changes)


class SoftImputeResult(NamedTuple):
    R: np.ndarray
    rank: int
    objective_trace: list
    converged: bool
    singular_values: np.ndarray


class BetaSelection(NamedTuple):
    beta: float
    rank: int
    attained: bool
    solution: np.ndarray | None = None


def _as_samples(data, dims: SpaceTimeDims | None = None) -> np.ndarray:
    X = np.asarray(data, dtype=float)
    if X.ndim != 2:
        raise ValueError(f"samples must be a 2-d array (n, pT), got ndim={X.ndim}")
    if dims is not None and X.shape[1] != dims.size:
        raise ValueError(f"samples have length {X.shape[1]}, expected pT={dims.size}")
    if X.shape[0] < 2:
        raise ValueError(f"need at least 2 samples, got {X.shape[0]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("samples contain non-finite entries")
    return X


def sample_mean_cov(data) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and the ``1/n``-normalized sample covariance."""
    X = _as_samples(data)
    mean = X.mean(axis=0)
    Xc = X - mean
    scm = Xc.T @ Xc / X.shape[0]
    return mean, 0.5 * (scm + scm.T)


def svt(Z, tau: float) -> np.ndarray:
    """Singular value soft-thresholding, the prox of ``tau * ||.||_*``."""
    if tau < 0:
        raise ValueError("tau must be >= 0")
    Z = np.asarray(Z, dtype=float)
    if tau == 0:
        return Z.copy()
    u, s, vt = np.linalg.svd(Z, full_matrices=False)
    s = np.maximum(s - tau, 0.0)
    keep = s > 0
    return (u[:, keep] * s[keep]) @ vt[keep]


def _numerical_rank(s: np.ndarray) -> int:
    if s.size == 0 or s[0] <= 0:
        return 0
    return int(np.count_nonzero(s > RANK_RTOL * s[0]))


def masked_objective(B, R, mask, beta: float) -> float:
    resid = mask * (B - R)
    return float(np.sum(resid**2) + beta * np.linalg.svd(R, compute_uv=False).sum())


def soft_impute(
    B,
    mask,
    beta: float,
    tol: float = 1e-6,
    max_iter: int = 500,
    init=None,
) -> SoftImputeResult:
    """Minimize ``||mask * (B - R)||_F^2 + beta * ||R||_*``.

    ``mask`` is a 0/1 array (or a :class:`DiagMask`, whose collapsed mask is
    used). Each step thresholds the filled matrix at ``beta / 2``. Hitting
    ``max_iter`` is reported through ``converged`` rather than raised.
    """
    if isinstance(mask, DiagMask):
        mask = mask.collapsed_mask
    B = np.asarray(B, dtype=float)
    mask = np.asarray(mask, dtype=float)
    if mask.shape != B.shape:
        raise ValueError(f"mask shape {mask.shape} does not match {B.shape}")
    if not beta >= 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    observed = mask * B
    hidden = 1.0 - mask
    R = np.zeros_like(B) if init is None else np.array(init, dtype=float)
    tau = beta / 2.0

    trace = []
    converged = False
    s = np.zeros(0)
    for _ in range(max_iter):
        Z = observed + hidden * R
        u, s, vt = np.linalg.svd(Z, full_matrices=False)
        # survivors at roundoff level are threshold noise, not signal
        noise = np.finfo(float).eps * max(Z.shape) * (s[0] if s.size else 0.0)
        s = np.maximum(s - tau, 0.0)
        s[s <= noise] = 0.0
        keep = s > 0
        R_new = (u[:, keep] * s[keep]) @ vt[keep]
        if not np.all(np.isfinite(R_new)):
            raise NumericalError("soft-impute produced non-finite values")
        resid = mask * (B - R_new)
        trace.append(float(np.sum(resid**2) + beta * s.sum()))
        change = np.linalg.norm(R_new - R)
        scale = np.linalg.norm(R)
        R = R_new
        if change <= tol * scale or change == 0.0:
            converged = True
            break
    s = s[s > 0]
    return SoftImputeResult(R, _numerical_rank(s), trace, converged, s)


def hard_impute(
    B,
    mask,
    rank: int,
    init,
    tol: float = 1e-6,
    max_iter: int = 500,
) -> SoftImputeResult:
    """Rank-constrained fill of the hidden entries, warm-started at ``init``.

    Alternates between filling hidden entries from the current iterate and
    truncating to ``rank`` singular triples. The observed-entry residual is
    nonincreasing.
    """
    if isinstance(mask, DiagMask):
        mask = mask.collapsed_mask
    B = np.asarray(B, dtype=float)
    mask = np.asarray(mask, dtype=float)
    observed = mask * B
    hidden = 1.0 - mask
    R = np.array(init, dtype=float)
    trace = []
    converged = False
    s = np.zeros(0)
    if rank == 0:
        return SoftImputeResult(np.zeros_like(B), 0, [float(np.sum(observed**2))], True, s)
    for _ in range(max_iter):
        u, s, vt = np.linalg.svd(observed + hidden * R, full_matrices=False)
        R_new = (u[:, :rank] * s[:rank]) @ vt[:rank]
        if not np.all(np.isfinite(R_new)):
            raise NumericalError("hard-impute produced non-finite values")
        trace.append(float(np.sum((mask * (B - R_new)) ** 2)))
        change = np.linalg.norm(R_new - R)
        scale = np.linalg.norm(R)
        R = R_new
        if change <= tol * scale or change == 0.0:
            converged = True
            break
    s = s[:rank]
    return SoftImputeResult(R, _numerical_rank(s), trace, converged, s)


def beta_upper_bound(B, mask) -> float:
    if isinstance(mask, DiagMask):
        mask = mask.collapsed_mask
    return 2.0 * float(np.linalg.norm(np.asarray(mask) * np.asarray(B), 2))


def select_beta_for_rank(
    B,
    mask,
    r_target: int,
    tol: float = 1e-6,
    max_iter: int = 500,
) -> BetaSelection:
    """Bisect the penalty so that soft-impute returns rank ``r_target``.

    Keeps the invariant rank(lo) > r_target >= rank(hi) on
    ``[0, 2 * sigma_max(mask * B)]`` and returns the smallest tested penalty
    with rank exactly ``r_target``, so the threshold sits at the level of the
    first discarded singular value rather than eating into the kept ones.
    If no tested penalty attains the rank, the one whose rank came closest
    is returned with ``attained=False``.
    """
    B = np.asarray(B, dtype=float)
    if not 1 <= r_target <= min(B.shape):
        raise ValueError(f"r_target must lie in [1, {min(B.shape)}], got {r_target}")
    lo, hi = 0.0, beta_upper_bound(B, mask)
    if hi == 0.0:
        warnings.warn("observed entries are all zero; rank 0 is the only solution")
        return BetaSelection(0.0, 0, False)

    res_lo = soft_impute(B, mask, lo, tol, max_iter)
    tested = [(lo, res_lo.rank, res_lo.R)]
    if res_lo.rank > r_target:
        warm = res_lo.R
        for _ in range(BISECTION_STEPS):
            mid = 0.5 * (lo + hi)
            res = soft_impute(B, mask, mid, tol, max_iter, init=warm)
            tested.append((mid, res.rank, res.R))
            if res.rank > r_target:
                lo, warm = mid, res.R
            else:
                hi = mid

    exact = [t for t in tested if t[1] == r_target]
    if exact:
        beta, _, R = min(exact, key=lambda t: t[0])
        return BetaSelection(beta, r_target, True, R)
    # closest rank, then the smaller penalty
    beta, rank, R = min(tested, key=lambda t: (abs(t[1] - r_target), t[0]))
    warnings.warn(
        f"rank {r_target} not attained by bisection; closest rank {rank} at beta={beta:.6g}"
    )
    return BetaSelection(beta, rank, False, R)


def solve_diag_U(scm, lowrank, dims: SpaceTimeDims) -> np.ndarray:
    """Least-squares ``U`` for ``kron(I, diag(U))`` against the residual diagonal."""
    p, T = dims.p, dims.T
    scm = np.asarray(scm, dtype=float)
    lowrank = np.asarray(lowrank, dtype=float)
    if scm.shape != (p * T, p * T) or lowrank.shape != scm.shape:
        raise ValueError("scm and lowrank must both be pT x pT")
    resid = np.diagonal(scm) - np.diagonal(lowrank)
    return resid.reshape(T, p).mean(axis=0)


def psd_floor(sigma, eps_rel: float = DEFAULT_EPS_REL, abs_floor: float = ABS_FLOOR):
    """Clamp eigenvalues from below at ``eps_rel * trace / n``.

    Falls back to ``abs_floor`` when the trace is not positive. Matrices
    already above the floor are returned unchanged.
    """
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ValueError("psd_floor needs a square matrix")
    if not eps_rel > 0:
        raise ValueError("eps_rel must be > 0")
    scale = np.abs(sigma).max() if sigma.size else 0.0
    if not np.allclose(sigma, sigma.T, rtol=0, atol=1e-12 * max(scale, 1.0)):
        raise ValueError("psd_floor needs a symmetric matrix")
    eps = floor_level(sigma, eps_rel, abs_floor)
    w, V = np.linalg.eigh(sigma)
    if w[0] >= eps:
        return sigma.copy()
    w = np.maximum(w, eps)
    out = (V * w) @ V.T
    return 0.5 * (out + out.T)


def floor_level(sigma, eps_rel: float = DEFAULT_EPS_REL, abs_floor: float = ABS_FLOOR):
    m = np.trace(sigma) / sigma.shape[0]
    return eps_rel * m if m > 0 else abs_floor


def shrink_matrix(sigma, rho: float) -> np.ndarray:
    """``(1 - rho) * sigma + rho * trace(sigma)/n * I``."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    sigma = np.asarray(sigma, dtype=float)
    n = sigma.shape[0]
    m = np.trace(sigma) / n
    out = (1.0 - rho) * sigma
    out[np.diag_indices(n)] += rho * m
    return out


def symmetric_offsets(B, dims: SpaceTimeDims) -> np.ndarray:
    """Average collapsed rows ``j`` and ``-j``.

    For a symmetric covariance this projects onto the terms with symmetric
    temporal and spatial factors.
    """
    B = np.asarray(B, dtype=float)
    return 0.5 * (B + B[::-1])


def extract_factors(R, dims: SpaceTimeDims, rank: int | None = None):
    """Split a collapsed low-rank matrix into Toeplitz/spatial factor pairs."""
    p, T = dims.p, dims.T
    u, s, vt = np.linalg.svd(np.asarray(R, dtype=float), full_matrices=False)
    r = _numerical_rank(s) if rank is None else rank
    weights = np.sqrt(T - np.abs(np.arange(-T + 1, T)))
    factors = []
    for k in range(r):
        root = np.sqrt(s[k])
        Tk = toeplitz_from_offsets(root * u[:, k] / weights)
        Sk = (root * vt[k]).reshape(p, p, order="F")
        # fix the sign so the temporal factor has a positive lag-0 entry
        if Tk[0, 0] < 0:
            Tk, Sk = -Tk, -Sk
        factors.append((0.5 * (Tk + Tk.T), 0.5 * (Sk + Sk.T)))
    return factors, s[:r]


def _truncate(R, rank: int) -> np.ndarray:
    u, s, vt = np.linalg.svd(R, full_matrices=False)
    return (u[:, :rank] * s[:rank]) @ vt[:rank]


def fit_dc_kronpca(
    samples,
    dims: SpaceTimeDims,
    cfg: FitConfig = FitConfig(),
    lw_rho: float | None = None,
) -> KronCovModel:
    """Fit the block-Toeplitz DC-KronPCA model to ``(n, pT)`` samples.

    With ``cfg.shrink`` the estimate is shrunk toward a scaled identity by
    ``cfg.rho`` if given, else by the Ledoit-Wolf coefficient computed from
    the samples (``lw_rho`` may supply it precomputed). An eigenvalue floor
    is applied only if the result is not already above it.
    """
    from .shrinkage import ledoit_wolf_rho

    X = _as_samples(samples, dims)
    mean, scm = sample_mean_cov(X)
    mask = build_diag_mask(dims)
    B = symmetric_offsets(toeplitz_collapse(rearrange(scm, dims), dims), dims)

    if cfg.target_rank is not None:
        r_max = min(2 * dims.T - 1, dims.p * dims.p)
        r_target = min(cfg.target_rank, r_max)
        # offsets are averaged pairwise, so at most T symmetric directions exist
        r_target = min(r_target, dims.T, dims.p * (dims.p + 1) // 2)
        sel = select_beta_for_rank(B, mask, r_target, cfg.tol, cfg.max_iter)
        beta, init = sel.beta, sel.solution
    else:
        r_target = None
        beta, init = cfg.beta, None
    res = soft_impute(B, mask, beta, cfg.tol, cfg.max_iter, init=init)
    if not res.converged:
        log.info("soft-impute hit max_iter=%d without converging", cfg.max_iter)
    if r_target is not None and res.rank > r_target:
        # components past the target are unconverged residue at the rank boundary
        res = res._replace(
            R=_truncate(res.R, r_target),
            rank=r_target,
            singular_values=res.singular_values[:r_target],
        )
    if cfg.debias and res.rank > 0:
        refit = hard_impute(B, mask, res.rank, res.R, cfg.tol, cfg.max_iter)
        if not refit.converged:
            log.debug("rank-%d refit hit max_iter=%d", res.rank, cfg.max_iter)
        res = refit._replace(converged=res.converged)

    factors, svals = extract_factors(res.R, dims, res.rank)
    lowrank = derearrange(toeplitz_embed(res.R, dims), dims)
    lowrank = 0.5 * (lowrank + lowrank.T)
    U = solve_diag_U(scm, lowrank, dims)
    if cfg.clamp_U:
        U = np.maximum(U, 0.0)

    model = KronCovModel(
        dims,
        mean,
        tuple(factors),
        U,
        singular_values=res.singular_values,
        beta=float(beta),
        converged=res.converged,
        eps_rel=cfg.eps_rel,
    )
    if cfg.shrink:
        rho = cfg.rho
        if rho is None:
            rho = ledoit_wolf_rho(X) if lw_rho is None else lw_rho
        model = model.with_(rho=float(rho))
    return ensure_positive_definite(model)


def ensure_positive_definite(model: KronCovModel) -> KronCovModel:
    sigma = model.covariance
    if np.linalg.eigvalsh(sigma)[0] < floor_level(sigma, model.eps_rel):
        model = model.with_(eig_floor_applied=True)
    return model
