"""Symmetric eigen-based helpers shared by the relational mining code.

Everything is dense float64. Inputs are validated for symmetry up front so
downstream failures surface at the boundary, not inside an eigensolver.
"""

from __future__ import annotations

import numpy as np

SYM_TOL = 1e-10


def _check_symmetric(m: np.ndarray, tol: float = SYM_TOL) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    asym = np.max(np.abs(m - m.T)) if m.size else 0.0
    if asym > tol:
        raise ValueError(f"matrix is not symmetric: max |m - m.T| = {asym:.3e}")
    return m


def sym_eig(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix.

    Returns (eigenvalues ascending, orthonormal eigenvector columns) with
    m ~= V diag(w) V^T.
    """
    m = _check_symmetric(m)
    w, v = np.linalg.eigh(m)
    return w, v


def inv_sqrt_psd(m: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Inverse matrix square root V diag((w + eps)^-1/2) V^T of a PSD matrix.

    eps regularizes singular inputs (an all-zero matrix maps to
    eps^-1/2 * I). Eigenvalues below -1e-8 are rejected as not PSD.
    """
    m = _check_symmetric(m)
    w, v = np.linalg.eigh(m)
    if w.size and w.min() < -1e-8:
        raise ValueError(f"matrix is not PSD: min eigenvalue {w.min():.3e}")
    shifted = w + eps
    if np.any(shifted <= 0.0):
        raise ValueError("eps too small: shifted spectrum not strictly positive")
    r = (v * shifted**-0.5) @ v.T
    return (r + r.T) / 2.0


def sqrt_psd_trace(m: np.ndarray, eps: float = 0.0) -> float:
    """tr((m + eps I)^1/2) for symmetric PSD m; negative round-off clipped."""
    m = _check_symmetric(m)
    w = np.linalg.eigvalsh(m)
    return float(np.sum(np.sqrt(np.maximum(w, 0.0) + eps)))
