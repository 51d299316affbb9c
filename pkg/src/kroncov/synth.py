"""Synthetic two-class spatio-temporal Gaussian data with known structure.

Class covariances are ``sum_i kron(T_i, S_i) + kron(I, noise_floor * I)``
with AR-style Toeplitz temporal factors (entries ``decay**((i+1)|lag|)``,
decay specific to the class) and shared random PD spatial factors. Class
means differ along a random spatial direction, constant over frames.

Tracks are stationary: the first ``T`` frames are drawn jointly, and every
later frame is drawn from its Gaussian conditional on the preceding
``T - 1`` frames. Each ``T``-frame window then has exactly the model's
multiframe covariance. Every track has its own generator seeded from
``(seed, stream, class, track_index)`` with numpy's ``SeedSequence``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.linalg

from .classifier import SpatialGrid
from .estimator import KronCovModel, NotPositiveDefiniteError
from .io_formats import FeatureTrack
from .kron_algebra import SpaceTimeDims, toeplitz_from_offsets

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScenarioSpec:
    grid: SpatialGrid = field(default_factory=lambda: SpatialGrid((4, 4)))
    T: int = 6
    rank: int = 2
    mean_separation: float = 0.5
    temporal_decay: tuple[float, float] = (0.2, 0.7)
    noise_floor: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.rank < 0:
            raise ValueError("rank must be >= 0")
        if self.mean_separation < 0 or self.noise_floor < 0:
            raise ValueError("scales must be >= 0")
        if len(self.temporal_decay) != 2:
            raise ValueError("need one temporal decay per class")
        if any(not 0 <= abs(d) < 1 for d in self.temporal_decay):
            raise ValueError("temporal decays must lie in (-1, 1)")
        object.__setattr__(self, "temporal_decay", tuple(float(d) for d in self.temporal_decay))

    @property
    def dims(self) -> SpaceTimeDims:
        return SpaceTimeDims(self.grid.p, self.T)

    def with_(self, **changes) -> "ScenarioSpec":
        return replace(self, **changes)


SCENARIOS = {
    # temporal dependence differs between classes; the spatial picture barely does
    "default": ScenarioSpec(),
    "separated": ScenarioSpec(mean_separation=1.5, temporal_decay=(0.1, 0.8)),
}


def ar_toeplitz(decay: float, T: int) -> np.ndarray:
    lags = np.abs(np.arange(-T + 1, T))
    return toeplitz_from_offsets(np.where(lags == 0, 1.0, decay ** lags.astype(float)))


def make_ground_truth(spec: ScenarioSpec) -> tuple[KronCovModel, KronCovModel]:
    """The two class models of a scenario."""
    p, T = spec.grid.p, spec.T
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xC0]))
    spatial = []
    for i in range(spec.rank):
        W = rng.standard_normal((p, p))
        S = W @ W.T / p + 0.1 * np.eye(p)
        spatial.append(0.5 * (S + S.T) / (i + 1))
    direction = rng.standard_normal(p)
    direction /= np.linalg.norm(direction)

    models = []
    for k, decay in enumerate(spec.temporal_decay):
        factors = tuple(
            (ar_toeplitz(decay ** (i + 1) if decay else 0.0, T), S)
            for i, S in enumerate(spatial)
        )
        sign = -0.5 if k == 0 else 0.5
        mean = np.tile(sign * spec.mean_separation * direction, T)
        U = np.full(p, float(spec.noise_floor))
        jitter = 0.0
        while True:
            model = KronCovModel(SpaceTimeDims(p, T), mean, factors, U + jitter)
            try:
                np.linalg.cholesky(model.covariance)
                break
            except np.linalg.LinAlgError:
                jitter = max(2 * jitter, 1e-8)
        if jitter:
            log.warning("class %d ground truth needed diagonal jitter %.3g", k, jitter)
        models.append(model)
    return models[0], models[1]


def _frame_mean(model: KronCovModel) -> np.ndarray:
    blocks = model.mean.reshape(model.dims.T, model.dims.p)
    if not np.allclose(blocks, blocks[0], rtol=0, atol=1e-12 * max(1.0, np.abs(blocks).max())):
        raise ValueError("sequential sampling needs the same mean in every frame")
    return blocks[0]


class _SequentialSampler:
    def __init__(self, model: KronCovModel):
        p, T = model.dims.p, model.dims.T
        sigma = model.covariance
        self.p, self.T = p, T
        self.mu = _frame_mean(model)
        try:
            self.L = scipy.linalg.cholesky(sigma, lower=True)
        except scipy.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError("model covariance is not positive definite") from exc
        if T > 1:
            past = sigma[: -p, : -p]
            cross = sigma[-p:, : -p]
            # regression of the newest frame on the previous T - 1 frames
            self.A = scipy.linalg.solve(past, cross.T, assume_a="pos").T
            cond = sigma[-p:, -p:] - self.A @ cross.T
            try:
                self.Lc = scipy.linalg.cholesky(0.5 * (cond + cond.T), lower=True)
            except scipy.linalg.LinAlgError as exc:
                raise NotPositiveDefiniteError(
                    "conditional covariance of the stationary extension is not positive definite"
                ) from exc

    def sample(self, n_frames: int, rng: np.random.Generator) -> np.ndarray:
        p, T = self.p, self.T
        first = min(n_frames, T)
        z = rng.standard_normal(p * T)
        x = (self.L @ z).reshape(T, p)[:first]
        out = np.empty((n_frames, p))
        out[:first] = x
        for f in range(T, n_frames):
            past = out[f - T + 1 : f].ravel()
            out[f] = self.A @ past + self.Lc @ rng.standard_normal(p)
        return out + self.mu


def sample_tracks(
    model: KronCovModel,
    n_tracks: int,
    frames_per_track: int,
    seed: int | Sequence[int],
    *,
    grid: SpatialGrid | None = None,
    label: int | None = None,
    id_prefix: str = "track",
    start_index: int = 0,
) -> list[FeatureTrack]:
    """Draw stationary Gaussian tracks whose every window follows ``model``."""
    if frames_per_track < model.dims.T:
        raise ValueError(
            f"frames_per_track={frames_per_track} is shorter than the model window T={model.dims.T}"
        )
    grid = SpatialGrid((model.dims.p,)) if grid is None else grid
    if grid.p != model.dims.p:
        raise ValueError(f"grid {grid} does not match model p={model.dims.p}")
    sampler = _SequentialSampler(model)
    key = [int(seed)] if np.isscalar(seed) else [int(s) for s in seed]
    tracks = []
    for i in range(start_index, start_index + n_tracks):
        rng = np.random.default_rng(np.random.SeedSequence(key + [i]))
        frames = sampler.sample(frames_per_track, rng)
        tracks.append(FeatureTrack(f"{id_prefix}{i:05d}", label, grid, frames))
    return tracks


def simulate_split(
    spec: ScenarioSpec,
    n_tracks: int,
    frames_per_track: int,
    stream: int,
    truth: tuple[KronCovModel, KronCovModel] | None = None,
    id_prefix: str = "s",
) -> list[FeatureTrack]:
    """Balanced labeled tracks (class 0 first, then class 1) from one RNG stream.

    Different ``stream`` values give disjoint, independent track sets.
    """
    truth = make_ground_truth(spec) if truth is None else truth
    n1 = n_tracks // 2
    n0 = n_tracks - n1
    out = []
    for k, n in ((0, n0), (1, n1)):
        out += sample_tracks(
            truth[k],
            n,
            frames_per_track,
            (spec.seed, stream, k),
            grid=spec.grid,
            label=k,
            id_prefix=f"{id_prefix}{stream}c{k}_",
        )
    return out
