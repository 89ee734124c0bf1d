"""Dense linear-algebra kernels used throughout the package.

All routines take and return ``float64`` numpy arrays. Inputs are validated
once by :func:`as_matrix`; nothing here mutates its arguments.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, IllConditionedError, NumericFailure

#: smallest singular value a basis may have before it counts as rank deficient
FULL_RANK_TOL = 1e-10
#: relative cutoff used when counting the numerical rank of a stack
RANK_RTOL = 1e-10
DEFAULT_VARIANCE_THRESHOLD = 0.60


def as_matrix(m, name="matrix", allow_empty=False):
    """Return ``m`` as a C-contiguous 2-D float64 array, rejecting NaN/Inf."""
    a = np.ascontiguousarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not allow_empty and a.size == 0:
        raise ValueError(f"{name} must be non-empty, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``m = u @ diag(s) @ vt`` with a deterministic sign convention."""

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray

    def reconstruct(self):
        return (self.u * self.s) @ self.vt


def svd(m) -> SvdResult:
    """Thin SVD; each column of ``u`` has its largest-magnitude entry positive."""
    a = as_matrix(m)
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericFailure(f"SVD did not converge for matrix of shape {a.shape}", shape=a.shape) from exc
    pivots = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[pivots, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return SvdResult(u * signs, s, vt * signs[:, None])


def singular_values(m) -> np.ndarray:
    a = as_matrix(m)
    try:
        return np.linalg.svd(a, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise NumericFailure(f"SVD did not converge for matrix of shape {a.shape}", shape=a.shape) from exc


def numerical_rank(s, rtol=RANK_RTOL) -> int:
    s = np.asarray(s, dtype=np.float64)
    if s.size == 0 or s[0] <= 0:
        return 0
    return int(np.count_nonzero(s > rtol * s[0]))


def truncate(res: SvdResult, k: int) -> np.ndarray:
    """Best rank-``k`` Frobenius approximation from a precomputed SVD."""
    if not 1 <= k <= len(res.s):
        raise ValueError(f"k must lie in [1, {len(res.s)}], got {k}")
    return (res.u[:, :k] * res.s[:k]) @ res.vt[:k]


def truncation_error_sq(m, k: int) -> float:
    """Squared Frobenius error of the best rank-``k`` approximation: the tail energy."""
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    s = singular_values(m)
    return float(np.sum(s[k:] ** 2))


def center_rows(m):
    """Subtract the column-wise mean over rows. Returns ``(centered, mean)``."""
    a = as_matrix(m)
    mean = a.mean(axis=0)
    return a - mean, mean


def project_coefficients(basis, target, layer_id=None, orthonormal=False):
    """Least-squares coefficients ``eps`` minimising ``||basis @ eps - target||_F``.

    ``orthonormal=True`` takes the shortcut ``basis.T @ target``; otherwise the
    general pseudoinverse solution is used after checking full column rank.
    """
    b = as_matrix(basis, "basis")
    t = as_matrix(target, "target", allow_empty=True)
    if b.shape[0] != t.shape[0]:
        raise ValueError(f"basis has {b.shape[0]} rows but target has {t.shape[0]}")
    if orthonormal:
        return b.T @ t
    s_min = singular_values(b)[-1] if b.shape[1] <= b.shape[0] else 0.0
    if s_min <= FULL_RANK_TOL:
        where = f" in layer {layer_id!r}" if layer_id is not None else ""
        raise IllConditionedError(
            f"basis{where} is rank deficient (smallest singular value {s_min:.3e})",
            layer_id=layer_id,
            shape=b.shape,
        )
    if t.shape[1] == 0:
        return np.zeros((b.shape[1], 0))
    coef, *_ = np.linalg.lstsq(b, t, rcond=None)
    return coef


def linear_cka(x, y) -> float:
    """Linear centered kernel alignment between two sets of row-aligned features."""
    a = as_matrix(x, "x")
    b = as_matrix(y, "y")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"x and y must share the row count, got {a.shape[0]} and {b.shape[0]}")
    if a.shape[0] < 2:
        raise ValueError("linear CKA needs at least 2 rows")
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    xx = np.linalg.norm(a.T @ a)
    yy = np.linalg.norm(b.T @ b)
    if xx == 0.0 or yy == 0.0:
        raise DegenerateInputError("linear CKA is undefined for an input that is zero after centering")
    return float(np.linalg.norm(b.T @ a) ** 2 / (xx * yy))


def explained_variance(s) -> np.ndarray:
    """Cumulative fraction of squared singular-value energy, entry ``k-1`` for the top ``k``."""
    s = np.asarray(s, dtype=np.float64)
    energy = s**2
    total = energy.sum()
    if s.size == 0 or total == 0.0:
        raise DegenerateInputError("explained variance is undefined for an all-zero spectrum")
    return np.cumsum(energy) / total


def select_k_by_variance(s, threshold=DEFAULT_VARIANCE_THRESHOLD) -> int:
    """Smallest ``k`` whose top-``k`` singular values explain ``threshold`` of the energy."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    s = np.asarray(s, dtype=np.float64)
    if s.size == 0:
        raise ValueError("singular values must be non-empty")
    if np.any(np.diff(s) > 0):
        raise ValueError("singular values must be sorted in descending order")
    frac = explained_variance(s)
    # absorbs the rounding of the final cumulative sum, which may land just under 1.0
    hits = np.nonzero(frac >= threshold - 1e-12)[0]
    return int(hits[0]) + 1


def orthonormality_error(q) -> float:
    q = np.asarray(q, dtype=np.float64)
    return float(np.max(np.abs(q.T @ q - np.eye(q.shape[1])))) if q.size else 0.0
