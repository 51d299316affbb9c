"""Monte Carlo accuracy sweeps over training size, window length and method."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .classifier import classify_tracks, fit_class_models, overall_classifier, train_classifier
from .estimator import FitConfig
from .synth import ScenarioSpec, make_ground_truth, simulate_split

log = logging.getLogger(__name__)

METHODS = ("logistic-llr", "overall-llr")


@dataclass(frozen=True)
class SweepRow:
    method: str
    T: int
    n: int
    trial: int
    accuracy: float


def accuracy(clf, tracks) -> float:
    results, skipped = classify_tracks(tracks, clf)
    if skipped:
        log.warning("%d test tracks shorter than T=%d skipped", len(skipped), clf.models.T)
    if not results:
        return math.nan
    return float(np.mean([label == tr.label for tr, label, _, _ in results]))


def run_cell(
    spec: ScenarioSpec,
    T: int,
    n: int,
    trial: int,
    methods: Sequence[str],
    n_test: int,
    frames: int,
    levels: int,
    cfg: FitConfig,
) -> list[SweepRow]:
    """Train on ``n`` tracks and score ``n_test`` held-out tracks for one trial.

    Train and test tracks come from different RNG streams, so the sets are
    disjoint. Both methods share the class models of the full-feature block.
    """
    truth = make_ground_truth(spec)
    train = simulate_split(spec, n, frames, stream=2 * trial + 1, truth=truth, id_prefix="tr")
    test = simulate_split(spec, n_test, frames, stream=2 * trial + 2, truth=truth, id_prefix="te")
    rows = []
    try:
        need_levels = levels if "logistic-llr" in methods else 1
        models = fit_class_models(train, spec.grid, T, need_levels, cfg)
        for method in methods:
            if method == "logistic-llr":
                clf = train_classifier(train, spec.grid, T, levels, cfg, models=models)
            else:
                clf = overall_classifier(models, cfg=cfg)
            rows.append(SweepRow(method, T, n, trial, accuracy(clf, test)))
    except Exception as exc:  # a failed cell must not stop the sweep
        log.error("cell T=%d n=%d trial=%d failed: %s", T, n, trial, exc)
        done = {r.method for r in rows}
        rows += [SweepRow(m, T, n, trial, math.nan) for m in methods if m not in done]
    return rows


def _run_cell_args(args):
    return run_cell(*args)


def worker_count() -> int:
    env = os.environ.get("KRONCOV_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_sweep(
    spec: ScenarioSpec,
    n_values: Iterable[int],
    T_values: Iterable[int],
    methods: Sequence[str] = METHODS,
    trials: int = 10,
    n_test: int = 500,
    frames: int = 12,
    levels: int = 4,
    cfg: FitConfig = FitConfig(),
    workers: int | None = None,
) -> list[SweepRow]:
    """All (T, n, trial) cells; rows sorted by (method, T, n, trial)."""
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    T_values, n_values = list(T_values), list(n_values)
    if frames < max(T_values):
        raise ValueError(f"frames per track ({frames}) must be >= the largest T ({max(T_values)})")
    tasks = [
        (spec, T, n, trial, tuple(methods), n_test, frames, levels, cfg)
        for T in T_values
        for n in n_values
        for trial in range(trials)
    ]
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_cell_args, tasks))
    else:
        chunks = [run_cell(*t) for t in tasks]
    order = {m: i for i, m in enumerate(METHODS)}
    rows = [r for chunk in chunks for r in chunk]
    return sorted(rows, key=lambda r: (order[r.method], r.T, r.n, r.trial))


def mean_accuracy(rows: Iterable[SweepRow]) -> dict[tuple[str, int, int], float]:
    cells: dict[tuple[str, int, int], list[float]] = {}
    for r in rows:
        cells.setdefault((r.method, r.T, r.n), []).append(r.accuracy)
    return {k: float(np.nanmean(v)) for k, v in cells.items()}
