"""Dense linear-algebra primitives shared by the whole package.

Everything operates on plain real ``numpy`` arrays. Projectors use a
generalized inverse so rank-deficient inputs are handled without error, and
symmetric eigenproblems are delegated to LAPACK through numpy/scipy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NotSymmetric, RankArgumentOutOfRange

# Relative eigenvalue cutoff used for rank detection in generalized inverses.
GENINV_RELATIVE_CUTOFF = 1e-12

# Relative tolerance for accepting a matrix as symmetric.
SYMMETRY_RTOL = 1e-10

# Above this dimension, partial eigensolves of few extreme eigenpairs are
# cheaper than a full decomposition.
_SUBSET_EIG_MIN_DIM = 161


@dataclass(frozen=True)
class EigenDecomposition:
    """Full symmetric eigendecomposition with eigenvalues sorted descending."""

    values: np.ndarray
    vectors: np.ndarray


def as_matrix(a) -> np.ndarray:
    """Coerce input to a 2-d float array and validate finiteness."""
    m = np.asarray(a, dtype=float)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-d array, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"matrix dimensions must be positive, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    return m


def projector_onto(a) -> np.ndarray:
    """Orthogonal projector onto the column span of ``a``.

    Computed as ``A (A'A)^+ A'`` with the pseudo-inverse taken through an
    eigendecomposition of ``A'A``; eigenvalues below
    ``GENINV_RELATIVE_CUTOFF`` times the largest one are treated as zero, so
    rank-deficient ``a`` is fine. A zero-column ``a`` yields the zero matrix.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    m = a.shape[0]
    if a.shape[1] == 0:
        return np.zeros((m, m))
    gram = a.T @ a
    vals, vecs = np.linalg.eigh(gram)
    cutoff = GENINV_RELATIVE_CUTOFF * max(vals[-1], 0.0)
    keep = vals > cutoff
    if not np.any(keep):
        return np.zeros((m, m))
    basis = a @ (vecs[:, keep] / np.sqrt(vals[keep]))
    return basis @ basis.T


def projector_orthogonal(a) -> np.ndarray:
    """Projector onto the orthogonal complement of the column span of ``a``."""
    p = projector_onto(a)
    m = np.eye(p.shape[0]) - p
    return m


def sym_eigen(a, rtol: float = SYMMETRY_RTOL) -> EigenDecomposition:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending.

    Raises
    ------
    NotSymmetric
        If the relative asymmetry of ``a`` exceeds ``rtol``.
    """
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise NotSymmetric(f"matrix is not square: {a.shape}")
    scale = np.max(np.abs(a))
    asym = np.max(np.abs(a - a.T))
    if asym > rtol * max(scale, 1e-300):
        raise NotSymmetric(
            f"asymmetry {asym:.3e} exceeds tolerance {rtol:.1e} * {scale:.3e}"
        )
    vals, vecs = np.linalg.eigh(0.5 * (a + a.T))
    return EigenDecomposition(values=vals[::-1].copy(), vectors=vecs[:, ::-1].copy())


def spectral_norm(a) -> float:
    """Largest singular value of ``a``."""
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return 0.0
    return float(np.linalg.norm(a, 2))


def frobenius_norm(a) -> float:
    """Hilbert-Schmidt norm of ``a``."""
    return float(np.linalg.norm(np.asarray(a, dtype=float)))


def singular_values(a) -> np.ndarray:
    """Singular values of ``a``, sorted descending."""
    return np.linalg.svd(np.asarray(a, dtype=float), compute_uv=False)


def top_eigenpairs(a: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Largest ``k`` eigenpairs of a symmetric matrix, descending.

    Uses a partial LAPACK solve when the matrix is large and ``k`` is small.
    ``a`` is trusted to be symmetric (no tolerance check); callers pass
    Gram matrices. Returns ``(values, vectors)`` with ``vectors`` of shape
    ``(n, k)``.
    """
    n = a.shape[0]
    if k == 0:
        return np.empty(0), np.empty((n, 0))
    if n >= _SUBSET_EIG_MIN_DIM and k <= n // 8:
        vals, vecs = scipy.linalg.eigh(a, subset_by_index=(n - k, n - 1))
        return vals[::-1].copy(), vecs[:, ::-1].copy()
    vals, vecs = np.linalg.eigh(a)
    return vals[::-1][:k].copy(), vecs[:, ::-1][:, :k].copy()


def top_eigenvalues(a: np.ndarray, k: int) -> np.ndarray:
    """Largest ``k`` eigenvalues of a symmetric matrix, descending."""
    n = a.shape[0]
    if k == 0:
        return np.empty(0)
    if n >= _SUBSET_EIG_MIN_DIM and k <= n // 8:
        vals = scipy.linalg.eigh(
            a, eigvals_only=True, subset_by_index=(n - k, n - 1)
        )
        return vals[::-1].copy()
    vals = np.linalg.eigvalsh(a)
    return vals[::-1][:k].copy()


def sum_smallest_eigenvalues(a, skip_top: int) -> float:
    """Sum of the eigenvalues of symmetric ``a`` after dropping the largest ones.

    Equals ``trace(a)`` minus the sum of the ``skip_top`` largest
    eigenvalues; for ``skip_top`` equal to the dimension the result is zero
    by construction.

    Raises
    ------
    RankArgumentOutOfRange
        If ``skip_top`` is negative or exceeds the matrix dimension.
    """
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    if skip_top < 0 or skip_top > n:
        raise RankArgumentOutOfRange(
            f"skip_top={skip_top} outside [0, {n}] for a {n}x{n} matrix"
        )
    if skip_top == n:
        return 0.0
    trace = float(np.trace(a))
    if skip_top == 0:
        return trace
    return trace - float(np.sum(top_eigenvalues(a, skip_top)))
