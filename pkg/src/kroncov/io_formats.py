"""Text file formats for feature tracks, fitted models and results.

Track files (``.ftrk``) hold one or more tracks separated by blank lines.
Each track starts with a header line::

    ftrk 1 p=<p> grid=<a>x<b>[x<c>] id=<track_id> label=<0|1|?>

followed by one line per frame of ``p`` space-separated decimal floats.

Model files are JSON documents tagged with a format name and version.
Floats are written in shortest round-trip form, so identical inputs give
byte-identical files and reading a file back reproduces every value exactly.
Concurrent writes to the same path are not supported.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg

from .classifier import BlockTree, ClassModelSet, LlrClassifier, SpatialGrid
from .estimator import FitConfig, KronCovModel
from .kron_algebra import SpaceTimeDims

TRACK_VERSION = 1
MODEL_FORMAT = "kroncov-model"
MODEL_VERSION = 1

_HEADER = re.compile(
    r"^ftrk (?P<version>\S+) p=(?P<p>\d+) grid=(?P<grid>\d+(?:x\d+)*) "
    r"id=(?P<id>\S+) label=(?P<label>[01?])$"
)


class FormatError(ValueError):
    """Malformed input file."""


class TrackFormatError(FormatError):
    def __init__(self, path, lineno: int, message: str):
        self.path = path
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


class ModelFormatError(FormatError):
    pass


class UnsupportedVersionError(ModelFormatError):
    pass


@dataclass(frozen=True, eq=False)
class FeatureTrack:
    """Per-frame spatial feature vectors of one tracked subject."""

    track_id: str
    label: int | None
    grid: SpatialGrid
    frames: np.ndarray

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=float)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ValueError("frames must be a non-empty (n_frames, p) array")
        if frames.shape[1] != self.grid.p:
            raise ValueError(
                f"frame length {frames.shape[1]} does not match grid {self.grid} (p={self.grid.p})"
            )
        if self.label not in (None, 0, 1):
            raise ValueError(f"label must be 0, 1 or None, got {self.label!r}")
        if not self.track_id or any(c.isspace() for c in self.track_id):
            raise ValueError(f"track id must be non-empty without whitespace: {self.track_id!r}")
        object.__setattr__(self, "frames", frames)

    @property
    def p(self) -> int:
        return self.frames.shape[1]

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def _fmt(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"cannot write non-finite value {x}")
    return repr(x)


def format_tracks(tracks: Iterable[FeatureTrack]) -> str:
    chunks = []
    for tr in tracks:
        label = "?" if tr.label is None else str(tr.label)
        lines = [f"ftrk {TRACK_VERSION} p={tr.p} grid={tr.grid} id={tr.track_id} label={label}"]
        lines.extend(" ".join(_fmt(v) for v in frame) for frame in tr.frames)
        chunks.append("\n".join(lines) + "\n")
    return "\n".join(chunks)


def write_tracks(tracks: Iterable[FeatureTrack], path) -> None:
    Path(path).write_text(format_tracks(tracks), encoding="utf-8", newline="\n")


def parse_tracks(text: str, path="<string>") -> list[FeatureTrack]:
    tracks = []
    header = None
    frames: list[list[float]] = []

    def finish(lineno):
        if header is None:
            return
        hline, m = header
        if not frames:
            raise TrackFormatError(path, hline, "track has no frames")
        label = None if m["label"] == "?" else int(m["label"])
        grid = SpatialGrid.parse(m["grid"])
        tracks.append(FeatureTrack(m["id"], label, grid, np.array(frames)))

    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.rstrip("\r")
        if line.startswith("ftrk"):
            finish(lineno)
            frames = []
            m = _HEADER.match(line)
            if m is None:
                raise TrackFormatError(path, lineno, f"malformed header: {line!r}")
            if m["version"] != str(TRACK_VERSION):
                raise TrackFormatError(path, lineno, f"unsupported track format version {m['version']}")
            p = int(m["p"])
            grid = SpatialGrid.parse(m["grid"])
            if grid.p != p:
                raise TrackFormatError(
                    path, lineno, f"grid {grid} has {grid.p} cells but header says p={p}"
                )
            header = (lineno, m)
        elif not line.strip():
            finish(lineno)
            header = None
            frames = []
        else:
            if header is None:
                raise TrackFormatError(path, lineno, "frame data before any track header")
            fields = line.split(" ")
            p = int(header[1]["p"])
            if len(fields) != p:
                raise TrackFormatError(path, lineno, f"expected {p} values, found {len(fields)}")
            try:
                values = [float(f) for f in fields]
            except ValueError:
                raise TrackFormatError(path, lineno, "non-numeric value") from None
            if not all(math.isfinite(v) for v in values):
                raise TrackFormatError(path, lineno, "non-finite value")
            frames.append(values)
    finish(None)
    ids = [t.track_id for t in tracks]
    if len(set(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate track ids")
    return tracks


def read_tracks(path) -> list[FeatureTrack]:
    return parse_tracks(Path(path).read_text(encoding="utf-8"), path)


# -- models ------------------------------------------------------------------


def _floats(a) -> list[float]:
    return [float(v) for v in np.asarray(a, dtype=float).ravel()]


def _model_to_dict(m: KronCovModel) -> dict:
    tril = np.tril_indices(m.dims.p)
    return {
        "p": m.dims.p,
        "T": m.dims.T,
        "mean": _floats(m.mean),
        "factors": [
            {
                "temporal_first_col": _floats(Ti[:, 0]),
                "temporal_first_row": _floats(Ti[0, :]),
                "spatial_lower": _floats(Si[tril]),
            }
            for Ti, Si in m.factors
        ],
        "U": _floats(m.U),
        "rho": float(m.rho),
        "eig_floor_applied": bool(m.eig_floor_applied),
        "eps_rel": float(m.eps_rel),
        "singular_values": _floats(m.singular_values),
        "beta": None if m.beta is None else float(m.beta),
        "converged": bool(m.converged),
    }


def _model_from_dict(d: dict) -> KronCovModel:
    dims = SpaceTimeDims(int(d["p"]), int(d["T"]))
    tril = np.tril_indices(dims.p)
    factors = []
    for i, f in enumerate(d["factors"]):
        col, row = f["temporal_first_col"], f["temporal_first_row"]
        if len(col) != dims.T or len(row) != dims.T or col[0] != row[0]:
            raise ModelFormatError(f"factor {i}: inconsistent temporal first row/column")
        if len(f["spatial_lower"]) != tril[0].size:
            raise ModelFormatError(f"factor {i}: spatial factor needs {tril[0].size} values")
        Ti = scipy.linalg.toeplitz(col, row)
        lower = np.zeros((dims.p, dims.p))
        lower[tril] = f["spatial_lower"]
        Si = lower + np.tril(lower, -1).T
        factors.append((Ti, Si))
    return KronCovModel(
        dims,
        np.array(d["mean"], dtype=float),
        tuple(factors),
        np.array(d["U"], dtype=float),
        rho=float(d["rho"]),
        eig_floor_applied=bool(d["eig_floor_applied"]),
        eps_rel=float(d["eps_rel"]),
        singular_values=np.array(d["singular_values"], dtype=float),
        beta=d["beta"],
        converged=bool(d["converged"]),
    )


def _classifier_to_dict(clf: LlrClassifier) -> dict:
    ms = clf.models
    return {
        "method": clf.method,
        "grid": str(ms.grid),
        "T": ms.T,
        "stride": clf.stride,
        "levels": ms.tree.levels,
        "blocks": [[int(i) for i in b] for b in ms.tree.blocks],
        "block_levels": list(ms.tree.block_levels),
        "weights": _floats(clf.weights),
        "intercept": float(clf.intercept),
        "config": asdict(clf.config),
        "class_models": {
            str(k): [_model_to_dict(m) for m in ms.models[k]] for k in (0, 1)
        },
    }


def _classifier_from_dict(d: dict) -> LlrClassifier:
    grid = SpatialGrid.parse(d["grid"])
    tree = BlockTree(
        int(d["levels"]),
        tuple(np.array(b, dtype=int) for b in d["blocks"]),
        tuple(int(v) for v in d["block_levels"]),
    )
    models = tuple(
        tuple(_model_from_dict(m) for m in d["class_models"][str(k)]) for k in (0, 1)
    )
    for k in (0, 1):
        if len(models[k]) != len(tree):
            raise ModelFormatError(f"class {k} has {len(models[k])} models for {len(tree)} blocks")
    ms = ClassModelSet(grid, int(d["T"]), tree, models)
    return LlrClassifier(
        ms,
        np.array(d["weights"], dtype=float),
        float(d["intercept"]),
        d["stride"],
        d["method"],
        FitConfig(**d["config"]),
    )


def dumps_model(obj) -> str:
    if isinstance(obj, LlrClassifier):
        kind, body = "classifier", _classifier_to_dict(obj)
    elif isinstance(obj, KronCovModel):
        kind, body = "model", _model_to_dict(obj)
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")
    doc = {"format": MODEL_FORMAT, "version": MODEL_VERSION, "kind": kind, kind: body}
    return json.dumps(doc, indent=1, allow_nan=False) + "\n"


def loads_model(text: str, path="<string>"):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not a valid model document ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise ModelFormatError(f"{path}: not a {MODEL_FORMAT} document")
    if doc.get("version") != MODEL_VERSION:
        raise UnsupportedVersionError(
            f"{path}: unsupported model format version {doc.get('version')!r} "
            f"(this build reads version {MODEL_VERSION})"
        )
    kind = doc.get("kind")
    try:
        if kind == "model":
            return _model_from_dict(doc["model"])
        if kind == "classifier":
            return _classifier_from_dict(doc["classifier"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"{path}: malformed {kind} section ({exc!r})") from None
    raise ModelFormatError(f"{path}: unknown document kind {kind!r}")


def write_model(obj, path) -> None:
    Path(path).write_text(dumps_model(obj), encoding="utf-8", newline="\n")


def read_model(path):
    return loads_model(Path(path).read_text(encoding="utf-8"), path)


# -- results -----------------------------------------------------------------


@dataclass(frozen=True)
class ResultsRow:
    track_id: str
    true_label: int | None
    predicted_label: int
    score: float
    llrs: tuple[float, ...] | None = None


def write_results(rows: Sequence[ResultsRow], path, n_blocks: int | None = None) -> None:
    """CSV with ``track_id,true_label,predicted_label,score[,llr_0..]``."""
    if n_blocks is None:
        n_blocks = len(rows[0].llrs) if rows and rows[0].llrs is not None else 0
    header = ["track_id", "true_label", "predicted_label", "score"]
    header += [f"llr_{j}" for j in range(n_blocks)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            line = [
                r.track_id,
                "" if r.true_label is None else r.true_label,
                r.predicted_label,
                _fmt(r.score),
            ]
            if n_blocks:
                line += [_fmt(v) for v in r.llrs]
            w.writerow(line)


def read_results(path) -> tuple[list[ResultsRow], bool]:
    """Rows of a results CSV and whether it carries a truth column."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        for col in ("track_id", "predicted_label", "score"):
            if col not in fields:
                raise FormatError(f"{path}: results file lacks a {col!r} column")
        llr_cols = [c for c in fields if c.startswith("llr_")]
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            try:
                truth = rec.get("true_label")
                rows.append(
                    ResultsRow(
                        rec["track_id"],
                        None if truth in (None, "") else int(truth),
                        int(rec["predicted_label"]),
                        float(rec["score"]),
                        tuple(float(rec[c]) for c in llr_cols) if llr_cols else None,
                    )
                )
            except (TypeError, ValueError):
                raise FormatError(f"{path}:{lineno}: malformed results row") from None
    return rows, "true_label" in fields
