"""Dense linear algebra primitives used by the merge routines.

Everything here works on float64 numpy arrays. Gram matrices are raw sums
(not per-example means), so relative dataset sizes weight a merge.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

# Zero keeps incremental and batch merges equal to rounding error; the
# escalation ladder in solve_spd still handles singular systems.
DEFAULT_RIDGE_SCALE = 0.0
MAX_RIDGE_RETRIES = 6
# Seed for the escalation ladder when the caller asked for no ridge at all.
_ZERO_RIDGE_FLOOR = 1e-12


class SingularGramError(np.linalg.LinAlgError):
    pass


def as_matrix(X, name="X", allow_empty_rows=True):
    """Validate ``X`` as a finite 2-D float64 array and return it.

    A 1-D input is rejected rather than silently reshaped.
    """
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] == 0 and not allow_empty_rows:
        raise ValueError(f"{name} has no rows")
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def _symmetrize(upper):
    # Mirror the upper triangle so that value[i, j] == value[j, i] bitwise.
    return np.triu(upper) + np.triu(upper, 1).T


@dataclass(frozen=True)
class GramMatrix:
    """Running ``X^T X`` for one layer input, with the number of rows seen."""

    values: np.ndarray
    sample_count: int = 0

    def __post_init__(self):
        v = as_matrix(self.values, "gram values")
        if v.shape[0] != v.shape[1]:
            raise ValueError(f"gram matrix must be square, got {v.shape}")
        if self.sample_count < 0:
            raise ValueError("sample_count must be nonnegative")
        object.__setattr__(self, "values", v)

    @property
    def dim(self):
        return self.values.shape[0]

    @classmethod
    def zeros(cls, dim):
        if dim <= 0:
            raise ValueError("empty feature dimension")
        return cls(np.zeros((dim, dim)), 0)

    def __add__(self, other):
        if not isinstance(other, GramMatrix):
            return NotImplemented
        if other.dim != self.dim:
            raise ValueError(f"gram dimension mismatch: {self.dim} vs {other.dim}")
        return GramMatrix(self.values + other.values, self.sample_count + other.sample_count)

    def __eq__(self, other):
        if not isinstance(other, GramMatrix):
            return NotImplemented
        return (
            self.sample_count == other.sample_count
            and self.values.shape == other.values.shape
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


def gram(X):
    """Return the Gram matrix ``X^T X`` of the rows of ``X``.

    >>> gram([[1.0, 2.0], [3.0, 4.0]]).values.tolist()
    [[10.0, 14.0], [14.0, 20.0]]
    """
    X = as_matrix(X)
    if X.shape[1] == 0:
        raise ValueError("empty feature dimension")
    return GramMatrix(_symmetrize(X.T @ X), X.shape[0])


def gram_accumulate(acc, batch):
    """Add ``batch^T batch`` to ``acc`` and return the new accumulator."""
    batch = as_matrix(batch, "batch")
    if batch.shape[1] != acc.dim:
        raise ValueError(f"batch has {batch.shape[1]} columns, accumulator dim is {acc.dim}")
    if batch.shape[0] == 0:
        return acc
    return GramMatrix(acc.values + _symmetrize(batch.T @ batch), acc.sample_count + batch.shape[0])


def scale_offdiag(C, offdiag_scale):
    """Shrink off-diagonal entries of ``C`` by ``offdiag_scale`` (1.0 is a no-op)."""
    if not 0.0 <= offdiag_scale <= 1.0:
        raise ValueError(f"offdiag_scale must lie in [0, 1], got {offdiag_scale}")
    if offdiag_scale == 1.0:
        return C
    diag = np.diag(np.diag(C))
    return offdiag_scale * C + (1.0 - offdiag_scale) * diag


def ridge_for(A, ridge_scale):
    m = A.shape[0]
    tr = float(np.trace(A))
    if tr == 0.0:
        return float(ridge_scale)
    return float(ridge_scale) * tr / m


def solve_spd(A, B, ridge_scale):
    """Solve ``(A + lam*I) W = B`` for symmetric ``A`` by Cholesky.

    ``lam = ridge_scale * trace(A) / m``. When the factorization fails the
    ridge is multiplied by ten and the solve retried, at most
    ``MAX_RIDGE_RETRIES`` times.
    """
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    m = A.shape[0]
    if A.shape != (m, m):
        raise ValueError(f"A must be square, got {A.shape}")
    if B.shape[0] != m:
        raise ValueError(f"B has {B.shape[0]} rows, expected {m}")
    if ridge_scale < 0:
        raise ValueError("ridge_scale must be nonnegative")
    if not np.array_equal(A, A.T):
        if not np.allclose(A, A.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(A).max())):
            raise ValueError("A is not symmetric")

    lam = ridge_for(A, ridge_scale)
    eye = np.eye(m)
    for attempt in range(MAX_RIDGE_RETRIES + 1):
        try:
            factor = scipy.linalg.cho_factor(A + lam * eye if lam else A, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            if lam == 0.0:
                lam = _ZERO_RIDGE_FLOOR * max(float(np.trace(A)) / m, 1.0)
            else:
                lam *= 10.0
            continue
        W = scipy.linalg.cho_solve(factor, B, check_finite=False)
        if np.all(np.isfinite(W)):
            return W
        lam = lam * 10.0 if lam else _ZERO_RIDGE_FLOOR
    raise SingularGramError("gram matrix numerically singular")
