"""Rearrangement and Toeplitz-collapse operators for space-time covariances.

A ``pT x pT`` covariance of a vectorized ``p x T`` process is viewed as a
``T x T`` grid of ``p x p`` blocks. Block ``(s, t)`` (zero-based) occupies rows
``s*p:(s+1)*p`` and columns ``t*p:(t+1)*p``.

The rearrangement maps block ``(s, t)`` to row ``s + T*t`` of a ``T^2 x p^2``
matrix, holding the column-major vectorization of that block. Under this
convention ``rearrange(kron(A, B)) == outer(vec(A), vec(B))`` with ``vec``
column-major, so a sum of ``r`` Kronecker products rearranges to rank ``r``.

The collapse operator sums rows that share a block offset ``j = t - s`` and
scales by ``1/sqrt(T - |j|)``; its adjoint (the embed operator) spreads an
offset row back over every block with that offset. Collapsed row ``j + T - 1``
holds offset ``j`` for ``j`` in ``[-T+1, T-1]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "SpaceTimeDims",
    "DiagMask",
    "rearrange",
    "derearrange",
    "toeplitz_collapse",
    "toeplitz_embed",
    "build_diag_mask",
    "kron_compose",
    "is_toeplitz",
    "toeplitz_from_offsets",
    "offset_index",
]


@dataclass(frozen=True)
class SpaceTimeDims:
    """Spatial size ``p`` and temporal window length ``T``."""

    p: int
    T: int

    def __post_init__(self):
        if int(self.p) != self.p or int(self.T) != self.T:
            raise TypeError("p and T must be integers")
        if self.p < 1 or self.T < 1:
            raise ValueError(f"p and T must be >= 1, got p={self.p}, T={self.T}")

    @property
    def size(self) -> int:
        return self.p * self.T

    @property
    def rearranged_shape(self) -> tuple[int, int]:
        return (self.T * self.T, self.p * self.p)

    @property
    def collapsed_shape(self) -> tuple[int, int]:
        return (2 * self.T - 1, self.p * self.p)


def _check_shape(a: np.ndarray, shape: tuple[int, int], what: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.shape != shape:
        raise ValueError(f"{what}: expected shape {shape}, got {a.shape}")
    return a


def offset_index(T: int) -> np.ndarray:
    """Block offset ``t - s`` for every rearranged row ``k = s + T*t``."""
    s, t = np.meshgrid(np.arange(T), np.arange(T), indexing="ij")
    # row k = s + T*t, i.e. Fortran-order flattening of the (s, t) grid
    return (t - s).ravel(order="F")


def rearrange(M, dims: SpaceTimeDims) -> np.ndarray:
    """Map a ``pT x pT`` matrix to its ``T^2 x p^2`` rearrangement."""
    p, T = dims.p, dims.T
    M = _check_shape(M, (p * T, p * T), "rearrange")
    # blocks[s, i, t, j] = M[s*p + i, t*p + j]; row index s + T*t, column i + p*j
    return M.reshape(T, p, T, p).transpose(2, 0, 3, 1).reshape(T * T, p * p)


def derearrange(Rm, dims: SpaceTimeDims) -> np.ndarray:
    """Inverse of :func:`rearrange`."""
    p, T = dims.p, dims.T
    Rm = _check_shape(Rm, dims.rearranged_shape, "derearrange")
    return Rm.reshape(T, T, p, p).transpose(1, 3, 0, 2).reshape(p * T, p * T)


def _offset_weights(T: int) -> np.ndarray:
    j = np.arange(-T + 1, T)
    return 1.0 / np.sqrt(T - np.abs(j))


def toeplitz_collapse(A, dims: SpaceTimeDims) -> np.ndarray:
    """Collapse a rearranged matrix onto its ``2T - 1`` block offsets.

    Row ``j + T - 1`` of the result is ``sum(A[k] for k with offset j)``
    divided by ``sqrt(T - |j|)``.
    """
    T = dims.T
    A = _check_shape(A, dims.rearranged_shape, "toeplitz_collapse")
    out = np.zeros(dims.collapsed_shape)
    np.add.at(out, offset_index(T) + T - 1, A)
    return out * _offset_weights(T)[:, None]


def toeplitz_embed(At, dims: SpaceTimeDims) -> np.ndarray:
    """Adjoint of :func:`toeplitz_collapse`.

    Every rearranged row with block offset ``j`` receives
    ``At[j + T - 1] / sqrt(T - |j|)``.
    """
    T = dims.T
    At = _check_shape(At, dims.collapsed_shape, "toeplitz_embed")
    scaled = At * _offset_weights(T)[:, None]
    return scaled[offset_index(T) + T - 1]


@dataclass(frozen=True)
class DiagMask:
    """0/1 masks hiding the global covariance diagonal.

    ``full_mask`` lives in the rearranged domain, ``collapsed_mask`` in the
    collapsed one. Zeros mark observations excluded from the low-rank fit.
    """

    dims: SpaceTimeDims
    full_mask: np.ndarray
    collapsed_mask: np.ndarray


def build_diag_mask(dims: SpaceTimeDims) -> DiagMask:
    p, T = dims.p, dims.T
    full = np.ones(dims.rearranged_shape)
    diag_cols = np.arange(p) * (p + 1)
    diag_rows = np.flatnonzero(offset_index(T) == 0)
    full[np.ix_(diag_rows, diag_cols)] = 0.0
    collapsed = np.sign(toeplitz_collapse(full, dims))
    return DiagMask(dims, full, collapsed)


def is_toeplitz(A, atol: float = 0.0) -> bool:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        return False
    n = A.shape[0]
    for j in range(-n + 1, n):
        d = np.diagonal(A, j)
        if np.max(np.abs(d - d[0])) > atol:
            return False
    return True


def toeplitz_from_offsets(values) -> np.ndarray:
    """Build a ``T x T`` Toeplitz matrix from offset values.

    ``values[j + T - 1]`` is the entry at ``(s, t)`` with ``t - s = j``.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 1 or values.size % 2 != 1:
        raise ValueError("need an odd-length vector of 2T - 1 offset values")
    T = (values.size + 1) // 2
    s, t = np.meshgrid(np.arange(T), np.arange(T), indexing="ij")
    return values[t - s + T - 1]


def kron_compose(
    factors: Sequence[tuple[np.ndarray, np.ndarray]],
    U,
    T: int | None = None,
) -> np.ndarray:
    """Compose ``sum_i kron(T_i, S_i) + kron(I_T, diag(U))``.

    ``T`` is only needed when ``factors`` is empty.
    """
    U = np.asarray(U, dtype=float).ravel()
    p = U.size
    if factors:
        T_ = np.asarray(factors[0][0]).shape[0]
        if T is not None and T != T_:
            raise ValueError(f"window length {T} disagrees with factor size {T_}")
        T = T_
    elif T is None:
        raise ValueError("T must be given when there are no Kronecker factors")
    if not np.all(np.isfinite(U)):
        raise ValueError("U must be finite")
    out = np.kron(np.eye(T), np.diag(U))
    for i, (Ti, Si) in enumerate(factors):
        Ti = np.asarray(Ti, dtype=float)
        Si = np.asarray(Si, dtype=float)
        if Ti.shape != (T, T) or Si.shape != (p, p):
            raise ValueError(
                f"factor {i}: expected shapes {(T, T)} and {(p, p)}, "
                f"got {Ti.shape} and {Si.shape}"
            )
        if not is_toeplitz(Ti, atol=1e-12 * max(1.0, np.abs(Ti).max())):
            raise ValueError(f"temporal factor {i} is not Toeplitz")
        out += np.kron(Ti, Si)
    return out
