"""Command-line front end: simulate, fit, classify, eval, sweep, inspect.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .classifier import InsufficientDataError, LlrClassifier, SpatialGrid, classify_tracks, train_classifier
from .estimator import FitConfig, KronCovModel, NumericalError
from .experiments import METHODS, mean_accuracy, run_sweep
from .io_formats import (
    FormatError,
    ResultsRow,
    read_model,
    read_results,
    read_tracks,
    write_model,
    write_results,
    write_tracks,
)
from .synth import SCENARIOS, simulate_split

log = logging.getLogger("kroncov")

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input file not found: {path}")
    return p


def _writable(path: str) -> Path:
    p = Path(path)
    if not p.parent.exists():
        raise UsageError(f"output directory does not exist: {p.parent}")
    return p


def _fit_config(args) -> FitConfig:
    return FitConfig(
        beta=args.beta,
        target_rank=(2 if args.rank is None else args.rank) if args.beta is None else None,
        rho=args.rho,
        debias=not args.no_debias,
    )


def _scenario(args):
    spec = SCENARIOS[args.scenario]
    changes = {"seed": args.seed}
    if args.grid is not None:
        changes["grid"] = SpatialGrid.parse(args.grid)
    for name in ("rank", "noise_floor"):
        if getattr(args, name, None) is not None:
            changes[name] = getattr(args, name)
    if args.separation is not None:
        changes["mean_separation"] = args.separation
    if args.decay is not None:
        changes["temporal_decay"] = tuple(args.decay)
    if getattr(args, "window", None) is not None:
        changes["T"] = args.window
    spec = spec.with_(**changes)
    if args.p is not None and args.p != spec.grid.p:
        raise ValueError(f"--p {args.p} does not match grid {spec.grid} (p={spec.grid.p})")
    return spec


# -- subcommands -------------------------------------------------------------


def cmd_simulate(args) -> int:
    out = Path(args.out)
    if not out.parent.exists():
        raise UsageError(f"output directory does not exist: {out.parent}")
    spec = _scenario(args)
    if args.frames < spec.T:
        raise ValueError(f"--frames {args.frames} is shorter than the scenario window T={spec.T}")
    out.mkdir(exist_ok=True)
    train = simulate_split(spec, args.n_train, args.frames, stream=1, id_prefix="train")
    test = simulate_split(spec, args.n_test, args.frames, stream=2, id_prefix="test")
    write_tracks(train, out / "train.ftrk")
    write_tracks(test, out / "test.ftrk")
    print(
        f"scenario={args.scenario} p={spec.grid.p} grid={spec.grid} T={spec.T} "
        f"rank={spec.rank} seed={spec.seed}"
    )
    print(f"train: {len(train)} tracks -> {out / 'train.ftrk'}")
    print(f"test: {len(test)} tracks -> {out / 'test.ftrk'}")
    return 0


def _common_grid(tracks, path) -> SpatialGrid:
    grids = {tr.grid for tr in tracks}
    if len(grids) != 1:
        raise FormatError(f"{path}: tracks use {len(grids)} different grids")
    return grids.pop()


def cmd_fit(args) -> int:
    train_path = _existing(args.train)
    model_path = _writable(args.model)
    cfg = _fit_config(args)
    tracks = read_tracks(train_path)
    if not tracks:
        raise ValueError(f"{train_path}: no training tracks")
    grid = _common_grid(tracks, train_path)
    for k in (0, 1):
        if sum(tr.label == k for tr in tracks) < 2:
            raise InsufficientDataError(f"need at least 2 labeled training tracks of class {k}")
    clf = train_classifier(
        tracks, grid, args.T, args.levels, cfg, stride=args.stride, overall=args.overall
    )
    write_model(clf, model_path)
    print(
        f"fitted {clf.method}: T={args.T} blocks={len(clf.models.tree)} "
        f"grid={grid} -> {model_path}"
    )
    return 0


def cmd_classify(args) -> int:
    model_path = _existing(args.model)
    test_path = _existing(args.test)
    out = _writable(args.out)
    clf = read_model(model_path)
    if not isinstance(clf, LlrClassifier):
        raise FormatError(f"{model_path}: holds a single covariance model, not a classifier")
    tracks = read_tracks(test_path)
    for tr in tracks:
        if tr.p != clf.models.grid.p:
            raise ValueError(
                f"dimension mismatch: model {model_path} expects p={clf.models.grid.p}, "
                f"track {tr.track_id} in {test_path} has p={tr.p}"
            )
    results, skipped = classify_tracks(tracks, clf)
    rows = [
        ResultsRow(tr.track_id, tr.label, label, score, tuple(llr))
        for tr, label, score, llr in results
    ]
    write_results(rows, out, n_blocks=len(clf.models.tree))
    for tr in skipped:
        print(
            f"skipped {tr.track_id}: {tr.n_frames} frames < T={clf.models.T}", file=sys.stderr
        )
    print(f"classified {len(rows)} tracks, skipped {len(skipped)} -> {out}")
    return 0


def cmd_eval(args) -> int:
    rows, has_truth = read_results(_existing(args.results))
    if not has_truth:
        raise FormatError(f"{args.results}: no true_label column to evaluate against")
    scored = [r for r in rows if r.true_label is not None]
    if len(scored) < len(rows):
        raise FormatError(f"{args.results}: {len(rows) - len(scored)} rows lack a true label")
    conf = np.zeros((2, 2), dtype=int)
    for r in scored:
        conf[r.true_label, r.predicted_label] += 1
    total = conf.sum()
    acc = float(conf.trace() / total) if total else float("nan")
    print(f"tracks: {total}")
    for k in (0, 1):
        n_k = conf[k].sum()
        per = conf[k, k] / n_k if n_k else float("nan")
        print(f"class {k}: {conf[k, k]}/{n_k} correct (accuracy {per:.4f})")
    print("confusion (rows=true, cols=predicted):")
    print(f"  0: {conf[0, 0]} {conf[0, 1]}")
    print(f"  1: {conf[1, 0]} {conf[1, 1]}")
    print(f"accuracy={acc!r}")
    return 0


def cmd_sweep(args) -> int:
    out = _writable(args.out)
    spec = _scenario(args)
    cfg = _fit_config(args)
    methods = [m for m in args.methods.split(",") if m]
    rows = run_sweep(
        spec,
        args.n_values,
        args.T_values,
        methods,
        args.trials,
        args.n_test,
        args.frames,
        args.levels,
        cfg,
    )
    with open(out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "T", "n", "trial", "accuracy"])
        for r in rows:
            w.writerow([r.method, r.T, r.n, r.trial, repr(r.accuracy)])
    for (method, T, n), acc in sorted(mean_accuracy(rows).items()):
        print(f"{method:13s} T={T:<3d} n={n:<6d} mean accuracy={acc:.4f}")
    return 0


def _describe_model(m: KronCovModel, prefix: str) -> None:
    w = np.linalg.eigvalsh(m.covariance)
    sv = " ".join(f"{v:.4g}" for v in m.singular_values) or "-"
    beta = "-" if m.beta is None else f"{m.beta:.4g}"
    print(
        f"{prefix} p={m.dims.p} T={m.dims.T} rank={m.rank} beta={beta} "
        f"rho={m.rho:.4f} eig_min={w[0]:.4g} eig_max={w[-1]:.4g} "
        f"eig_floor_applied={m.eig_floor_applied} converged={m.converged}"
    )
    print(f"{prefix}   singular values: {sv}")
    for i, (Ti, Si) in enumerate(m.factors):
        lags = " ".join(f"{v:.4g}" for v in Ti[0])
        print(f"{prefix}   factor {i}: temporal lags [{lags}] spatial trace={np.trace(Si):.4g}")


def cmd_inspect(args) -> int:
    path = _existing(args.model)
    obj = read_model(path)
    if isinstance(obj, KronCovModel):
        _describe_model(obj, "model")
        return 0
    ms = obj.models
    print(
        f"classifier method={obj.method} grid={ms.grid} T={ms.T} levels={ms.tree.levels} "
        f"blocks={len(ms.tree)} intercept={obj.intercept:.6g}"
    )
    for j, idx in enumerate(ms.tree.blocks):
        print(f"block {j} level={ms.tree.block_levels[j]} size={idx.size} weight={obj.weights[j]:.6g}")
        for k in (0, 1):
            _describe_model(ms.models[k][j], f"  class {k}:")
    return 0


# -- argument parsing --------------------------------------------------------


def _add_fit_options(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--rank", type=int, help="target separation rank (default 2)")
    g.add_argument("--beta", type=float, help="nuclear-norm penalty, instead of --rank")
    p.add_argument("--levels", type=int, default=4, help="dyadic block levels (default 4)")
    p.add_argument("--rho", type=float, help="fixed shrinkage weight instead of Ledoit-Wolf")
    p.add_argument("--no-debias", action="store_true", help="skip the rank-constrained refit")


def _add_scenario_options(p, window=True):
    p.add_argument("--scenario", choices=sorted(SCENARIOS), default="default")
    p.add_argument("--grid", help="spatial grid, e.g. 4x4")
    p.add_argument("--p", type=int, help="spatial dimension (checked against --grid)")
    if window:
        p.add_argument("--T", dest="window", type=int, help="generative window length")
    p.add_argument("--true-rank", dest="rank", type=int, help="ground-truth separation rank")
    p.add_argument("--separation", type=float, help="class mean separation")
    p.add_argument("--decay", type=float, nargs=2, metavar=("D0", "D1"), help="temporal decays")
    p.add_argument("--noise-floor", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=12, help="frames per track")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kroncov", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="write synthetic train/test track files")
    _add_scenario_options(p)
    p.add_argument("--n-train", type=int, default=500)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="train a classifier from labeled tracks")
    p.add_argument("--train", required=True)
    p.add_argument("--model", required=True, help="output model file")
    p.add_argument("--T", type=int, default=4, help="multiframe window length")
    p.add_argument("--stride", type=int, help="window stride (default T)")
    p.add_argument("--overall", action="store_true", help="single-block quadratic classifier")
    p.add_argument("--seed", type=int, default=0, help="accepted for reproducible pipelines; fitting is deterministic")
    _add_fit_options(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("classify", help="score tracks with a trained classifier")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True, help="results CSV")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("eval", help="accuracy report for a results CSV")
    p.add_argument("results")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="Monte Carlo accuracy versus n, T and method")
    _add_scenario_options(p, window=False)
    p.add_argument("--n-values", type=_int_list, default=[100, 500])
    p.add_argument("--T-values", type=_int_list, default=[1, 4, 6])
    p.add_argument("--methods", default=",".join(METHODS))
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--out", required=True, help="output CSV")
    _add_fit_options(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("inspect", help="summarize a model file")
    p.add_argument("model")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    with warnings.catch_warnings():
        if not args.verbose:
            warnings.simplefilter("ignore")
        return _run(args)


def _run(args) -> int:
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"kroncov: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"kroncov: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ValueError, OSError) as exc:
        print(f"kroncov: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
