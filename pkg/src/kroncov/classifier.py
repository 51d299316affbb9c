"""Gaussian log-likelihood-ratio classifiers on multiframe features.

Two classifiers share the same machinery:

* the overall LLR classifier, a quadratic discriminant using one structured
  covariance per class over the full feature vector;
* the multilevel LLR classifier, which fits independent class models on the
  nested blocks of a dyadic split of the spatial feature grid and combines
  the per-block LLRs with nonnegative logistic-regression weights.

Tracks are cut into T-frame windows (non-overlapping by default). A track's
LLR for a block is the sum of its window LLRs. Class 1 is predicted when the
score is strictly positive.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
from scipy.special import expit

from .estimator import FitConfig, KronCovModel, fit_dc_kronpca
from .kron_algebra import SpaceTimeDims

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)

__all__ = [
    "SpatialGrid",
    "BlockTree",
    "ClassModelSet",
    "LlrClassifier",
    "InsufficientDataError",
    "build_block_tree",
    "window_samples",
    "fit_class_models",
    "gaussian_loglik",
    "track_llr_vector",
    "fit_nonneg_logistic",
    "train_classifier",
    "overall_classifier",
    "score_track",
    "classify_tracks",
    "classify_track",
    "classify_overall",
]


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class SpatialGrid:
    """Axis extents of the spatial feature array, C-order flattened."""

    shape: tuple[int, ...]

    def __post_init__(self):
        shape = tuple(int(a) for a in self.shape)
        if not shape or any(a < 1 for a in shape):
            raise ValueError(f"grid extents must be >= 1, got {self.shape}")
        object.__setattr__(self, "shape", shape)

    @property
    def p(self) -> int:
        return math.prod(self.shape)

    @classmethod
    def parse(cls, text: str) -> "SpatialGrid":
        try:
            return cls(tuple(int(a) for a in text.split("x")))
        except ValueError as exc:
            raise ValueError(f"bad grid specification {text!r}") from exc

    def __str__(self) -> str:
        return "x".join(str(a) for a in self.shape)


@dataclass(frozen=True, eq=False)
class BlockTree:
    """Nested dyadic blocks of feature indices, level by level.

    ``blocks[0]`` is the full index set; level ``l`` contributes ``2**l``
    blocks, each half of a level ``l - 1`` block.
    """

    levels: int
    blocks: tuple[np.ndarray, ...]
    block_levels: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.blocks)


def build_block_tree(grid: SpatialGrid, levels: int) -> BlockTree:
    """Split the grid ``levels - 1`` times, halving each block's longest axis.

    Ties go to the lowest-numbered axis. An odd extent gives the extra cell
    to the first half.
    """
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    boxes = [tuple((0, a) for a in grid.shape)]
    all_boxes = [boxes[0]]
    block_levels = [0]
    for level in range(1, levels):
        nxt = []
        for box in boxes:
            extents = [b - a for a, b in box]
            axis = int(np.argmax(extents))
            if extents[axis] < 2:
                raise ValueError(
                    f"grid {grid} cannot be split into {levels} levels: "
                    f"block {box} has no axis longer than 1"
                )
            a, b = box[axis]
            cut = a + (b - a + 1) // 2
            nxt.append(box[:axis] + ((a, cut),) + box[axis + 1 :])
            nxt.append(box[:axis] + ((cut, b),) + box[axis + 1 :])
        boxes = nxt
        all_boxes.extend(boxes)
        block_levels.extend([level] * len(boxes))

    def indices(box):
        ranges = np.meshgrid(*[np.arange(a, b) for a, b in box], indexing="ij")
        return np.sort(np.ravel_multi_index([r.ravel() for r in ranges], grid.shape))

    return BlockTree(levels, tuple(indices(b) for b in all_boxes), tuple(block_levels))


def window_samples(frames, T: int, stride: int | None = None) -> np.ndarray:
    """Stack T-frame windows of a ``(n_frames, p)`` track as ``(n, pT)`` rows.

    Windows start every ``stride`` frames (default ``T``); a trailing partial
    window is dropped.
    """
    frames = np.asarray(frames, dtype=float)
    stride = T if stride is None else stride
    if T < 1 or stride < 1:
        raise ValueError("T and stride must be >= 1")
    n_frames, p = frames.shape
    if n_frames < T:
        raise ValueError(f"track has {n_frames} frames, fewer than the window length T={T}")
    starts = range(0, n_frames - T + 1, stride)
    return np.stack([frames[s : s + T].ravel() for s in starts])


def restrict(windows: np.ndarray, idx: np.ndarray, T: int) -> np.ndarray:
    """Restrict ``(n, pT)`` windows to spatial features ``idx`` in every frame."""
    n = windows.shape[0]
    return windows.reshape(n, T, -1)[:, :, idx].reshape(n, T * idx.size)


@dataclass(frozen=True, eq=False)
class ClassModelSet:
    """Per-class, per-block fitted models: ``models[k][j]``."""

    grid: SpatialGrid
    T: int
    tree: BlockTree
    models: tuple[tuple[KronCovModel, ...], tuple[KronCovModel, ...]]


@dataclass(frozen=True, eq=False)
class LlrClassifier:
    models: ClassModelSet
    weights: np.ndarray
    intercept: float = 0.0
    stride: int | None = None
    method: str = "logistic-llr"
    config: FitConfig = field(default_factory=FitConfig)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).ravel()
        if w.size != len(self.models.tree):
            raise ValueError(f"{w.size} weights for {len(self.models.tree)} blocks")
        if np.any(w < 0):
            raise ValueError("combining weights must be nonnegative")
        object.__setattr__(self, "weights", w)


def _class_windows(tracks, T: int, stride: int | None):
    windows = {0: [], 1: []}
    for tr in tracks:
        if tr.label not in (0, 1):
            raise ValueError(f"training track {tr.track_id!r} has no class label")
        if tr.n_frames < T:
            log.info("skipping track %s: %d frames < T=%d", tr.track_id, tr.n_frames, T)
            continue
        windows[tr.label].append(window_samples(tr.frames, T, stride))
    return {
        k: np.concatenate(v) if v else np.zeros((0, 0)) for k, v in windows.items()
    }


def fit_class_models(
    tracks,
    grid: SpatialGrid,
    T: int,
    levels: int = 4,
    cfg: FitConfig = FitConfig(),
    stride: int | None = None,
) -> ClassModelSet:
    """Fit one structured model per class and block from labeled tracks."""
    tree = build_block_tree(grid, levels)
    windows = _class_windows(tracks, T, stride)
    models = []
    for k in (0, 1):
        Xk = windows[k]
        per_block = []
        for j, idx in enumerate(tree.blocks):
            n = Xk.shape[0]
            if n < 2:
                raise InsufficientDataError(
                    f"class {k}, block {j} ({idx.size} features x T={T}): "
                    f"need at least 2 multiframe samples, got {n}"
                )
            per_block.append(
                fit_dc_kronpca(restrict(Xk, idx, T), SpaceTimeDims(idx.size, T), cfg)
            )
        models.append(tuple(per_block))
    return ClassModelSet(grid, T, tree, (models[0], models[1]))


def gaussian_loglik(x, model: KronCovModel):
    """Gaussian log-density of ``x`` (one vector or rows of a matrix)."""
    x = np.asarray(x, dtype=float)
    L = model.cholesky
    d = model.dims.size
    if x.shape[-1] != d:
        raise ValueError(f"vector length {x.shape[-1]} does not match model size {d}")
    z = scipy.linalg.solve_triangular(L, (x - model.mean).T, lower=True)
    maha = np.sum(z * z, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    out = -0.5 * maha - 0.5 * logdet - 0.5 * d * LOG_2PI
    return float(out) if x.ndim == 1 else out


def track_llr_vector(track, models: ClassModelSet, stride: int | None = None) -> np.ndarray:
    """Per-block LLR (class 1 versus class 0) summed over a track's windows."""
    T = models.T
    if track.n_frames < T:
        raise ValueError(
            f"track {track.track_id!r} has {track.n_frames} frames, fewer than T={T}"
        )
    if track.p != models.grid.p:
        raise ValueError(
            f"track {track.track_id!r} has p={track.p}, model expects p={models.grid.p}"
        )
    W = window_samples(track.frames, T, stride)
    out = np.empty(len(models.tree))
    for j, idx in enumerate(models.tree.blocks):
        Xj = restrict(W, idx, T)
        out[j] = np.sum(
            gaussian_loglik(Xj, models.models[1][j]) - gaussian_loglik(Xj, models.models[0][j])
        )
    return out


def _logistic_newton(X, y, lam, offset=None, tol=1e-8, max_iter=100):
    """L2-penalized logistic regression with unpenalized intercept.

    Minimizes ``mean(log(1 + exp(z)) - y z) + lam/2 ||w||^2`` with
    ``z = X w + b (+ offset)``.
    """
    N, d = X.shape
    A = np.hstack([X, np.ones((N, 1))])
    theta = np.zeros(d + 1)
    base = np.zeros(N) if offset is None else offset
    pen = np.full(d + 1, lam)
    pen[-1] = 0.0

    def objective(th):
        z = A @ th + base
        return np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * np.sum(pen * th * th)

    f = objective(theta)
    for _ in range(max_iter):
        mu = expit(A @ theta + base)
        grad = A.T @ (mu - y) / N + pen * theta
        if np.linalg.norm(grad) <= tol:
            break
        H = (A * (mu * (1 - mu))[:, None]).T @ A / N + np.diag(pen)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while t > 1e-12:
            cand = theta - t * step
            f_new = objective(cand)
            if f_new <= f - 1e-4 * t * (grad @ step):
                break
            t *= 0.5
        else:
            break
        theta, f = cand, f_new
    return theta[:-1], float(theta[-1])


def fit_nonneg_logistic(features, labels, lam: float | None = None):
    """Logistic weights constrained nonnegative by clamp-and-refit.

    Fits an L2-penalized logistic regression (``lam`` defaults to one over
    the number of tracks), drops every feature with a negative weight and
    refits on the rest until no weight is negative. Returns
    ``(weights, intercept, rounds)``.
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=float).ravel()
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ValueError("features must be (n_tracks, n_blocks) matching labels")
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise ValueError("labels must be 0 or 1")
    for k in (0, 1):
        if np.count_nonzero(y == k) < 2:
            raise InsufficientDataError(f"need at least 2 tracks of class {k}")
    N, B = X.shape
    lam = 1.0 / N if lam is None else lam

    active = np.arange(B)
    rounds = 0
    weights = np.zeros(B)
    intercept = 0.0
    while active.size:
        rounds += 1
        w, b = _logistic_newton(X[:, active], y, lam)
        if np.all(w >= 0):
            weights[active] = w
            intercept = b
            return weights, intercept, rounds
        active = active[w >= 0]

    warnings.warn("every block weight was negative; falling back to uniform weights")
    weights = np.full(B, 1.0 / B)
    _, intercept = _logistic_newton(np.zeros((N, 0)), y, lam, offset=X @ weights)
    return weights, intercept, rounds


def train_classifier(
    tracks,
    grid: SpatialGrid,
    T: int,
    levels: int = 4,
    cfg: FitConfig = FitConfig(),
    stride: int | None = None,
    overall: bool = False,
    models: ClassModelSet | None = None,
) -> LlrClassifier:
    """Fit class models and combining weights.

    With ``overall`` only the full-feature block is used, with weight 1 and
    intercept 0 (the plain quadratic classifier). Pre-fitted ``models`` may
    be passed to skip the covariance fits.
    """
    tracks = list(tracks)
    if overall:
        levels = 1
    if models is None:
        models = fit_class_models(tracks, grid, T, levels, cfg, stride)
    if overall:
        return overall_classifier(models, stride, cfg)
    usable = [tr for tr in tracks if tr.n_frames >= T]
    F = np.stack([track_llr_vector(tr, models, stride) for tr in usable])
    y = np.array([tr.label for tr in usable])
    w, b, _ = fit_nonneg_logistic(F, y)
    return LlrClassifier(models, w, b, stride, "logistic-llr", cfg)


def overall_classifier(
    models: ClassModelSet, stride: int | None = None, cfg: FitConfig = FitConfig()
) -> LlrClassifier:
    """Quadratic classifier on the full-feature block of ``models``."""
    tree = BlockTree(1, models.tree.blocks[:1], (0,))
    single = ClassModelSet(
        models.grid, models.T, tree, (models.models[0][:1], models.models[1][:1])
    )
    return LlrClassifier(single, np.ones(1), 0.0, stride, "overall-llr", cfg)


def classify_track(track, clf: LlrClassifier) -> tuple[int, float]:
    score, _ = score_track(track, clf)
    return int(score > 0), score


def score_track(track, clf: LlrClassifier) -> tuple[float, np.ndarray]:
    llr = track_llr_vector(track, clf.models, clf.stride)
    return float(clf.intercept + clf.weights @ llr), llr


def classify_overall(track, models: ClassModelSet, stride: int | None = None):
    return classify_track(track, overall_classifier(models, stride))


def classify_tracks(tracks: Sequence, clf: LlrClassifier):
    """Labels and scores for tracks long enough to window; others are skipped."""
    results, skipped = [], []
    for tr in tracks:
        if tr.n_frames < clf.models.T:
            skipped.append(tr)
            continue
        score, llr = score_track(tr, clf)
        results.append((tr, int(score > 0), score, llr))
    return results, skipped
