"""Row standardization and normalized covariance (Pearson) statistics.

Every latent vector is treated as a sample of ``d`` feature values; the
normalized covariance between two vectors is their Pearson correlation.
Standard deviations use the sample divisor ``d - 1`` so that a vector's
correlation with itself is exactly one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

EPS = 1e-12

CROSS_VIEW = "cross_view"
INTRA_VIEW = "intra_view"


@dataclass(frozen=True)
class CovMatrix:
    """Pearson correlations between the rows of two latent matrices."""

    values: np.ndarray
    kind: str = CROSS_VIEW

    @property
    def shape(self):
        return self.values.shape

    def diag(self) -> np.ndarray:
        return np.diagonal(self.values).copy()


def as_array(c) -> np.ndarray:
    if isinstance(c, CovMatrix):
        return c.values
    return np.asarray(c, dtype=np.float64)


def standardize_row(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError(f"expected a vector, got shape {z.shape}")
    if z.shape[0] < 2:
        raise ValueError("standardization needs at least 2 features")
    return standardize_rows(z[None, :])[0][0]


def standardize_rows(Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Standardize each row of ``Z``; return ``(U, std)``.

    Rows whose sample std falls below ``EPS`` map to zero rows and carry
    ``std = 0`` so the backward pass can mask them.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {Z.shape}")
    d = Z.shape[1]
    if d < 2:
        raise ValueError("standardization needs at least 2 features")
    centered = Z - Z.mean(axis=1, keepdims=True)
    std = np.sqrt(np.einsum("ij,ij->i", centered, centered) / (d - 1))
    ok = std >= EPS
    U = np.zeros_like(centered)
    U[ok] = centered[ok] / std[ok, None]
    std = np.where(ok, std, 0.0)
    return U, std


def standardize_rows_backward(U: np.ndarray, std: np.ndarray, dU: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the raw rows given the gradient w.r.t. standardized rows.

    Mean and std are differentiated as functions of the input.
    """
    d = U.shape[1]
    proj = np.einsum("ij,ij->i", U, dU) / (d - 1)
    dZ = dU - dU.mean(axis=1, keepdims=True) - U * proj[:, None]
    ok = std > 0
    out = np.zeros_like(dZ)
    out[ok] = dZ[ok] / std[ok, None]
    return out


def pearson(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError(f"length mismatch: {u.shape} vs {v.shape}")
    d = u.shape[0]
    su = standardize_row(u)
    sv = standardize_row(v)
    return float(su @ sv / (d - 1))


def _check_pair(Za: np.ndarray, Zb: np.ndarray) -> None:
    if Za.ndim != 2 or Zb.ndim != 2 or Za.shape[1] != Zb.shape[1]:
        raise ValueError(f"shape mismatch: {Za.shape} vs {Zb.shape}")
    if Za.shape[1] < 2:
        raise ValueError("covariance needs d >= 2")


def cross_cov(Za, Zb) -> CovMatrix:
    """Matrix of Pearson correlations between rows of ``Za`` and rows of ``Zb``."""
    Za = np.asarray(Za, dtype=np.float64)
    Zb = np.asarray(Zb, dtype=np.float64)
    _check_pair(Za, Zb)
    if Za.shape != Zb.shape:
        raise ValueError(f"shape mismatch: {Za.shape} vs {Zb.shape}")
    Ua, _ = standardize_rows(Za)
    Ub, _ = standardize_rows(Zb)
    return CovMatrix(Ua @ Ub.T / (Za.shape[1] - 1), CROSS_VIEW)


def cross_cov_rect(Za, Zb) -> np.ndarray:
    """Like :func:`cross_cov` but allows different row counts (used for blocks)."""
    Za = np.asarray(Za, dtype=np.float64)
    Zb = np.asarray(Zb, dtype=np.float64)
    _check_pair(Za, Zb)
    Ua, _ = standardize_rows(Za)
    Ub, _ = standardize_rows(Zb)
    return Ua @ Ub.T / (Za.shape[1] - 1)


def intra_cov(Z) -> CovMatrix:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {Z.shape}")
    if Z.shape[1] < 2:
        raise ValueError("covariance needs d >= 2")
    U, _ = standardize_rows(Z)
    return CovMatrix(U @ U.T / (Z.shape[1] - 1), INTRA_VIEW)


def paired_pearson(Za, Zb) -> np.ndarray:
    """Row-wise correlations ``pearson(Za[i], Zb[i])``: the diagonal of cross_cov."""
    Za = np.asarray(Za, dtype=np.float64)
    Zb = np.asarray(Zb, dtype=np.float64)
    _check_pair(Za, Zb)
    Ua, _ = standardize_rows(Za)
    Ub, _ = standardize_rows(Zb)
    return np.einsum("ij,ij->i", Ua, Ub) / (Za.shape[1] - 1)


def adaptive_threshold(cross) -> float:
    """``max(0, mean(diag) - std(diag))`` over the aligned-pair correlations.

    Accepts a square :class:`CovMatrix`/array, or a 1-D array already holding
    the diagonal. A single entry has std 0. Mean and variance are summed in
    exact rational arithmetic so the result carries a single final rounding.
    """
    c = as_array(cross)
    if c.ndim == 2:
        if c.shape[0] != c.shape[1]:
            raise ValueError(f"expected a square matrix, got {c.shape}")
        diag = np.diagonal(c)
    else:
        diag = c
    if diag.size == 0:
        raise ValueError("adaptive threshold needs at least one aligned pair")
    if not np.all(np.isfinite(diag)):
        raise ValueError("non-finite correlation on the diagonal")
    xs = [Fraction(float(x)) for x in diag]
    mean = sum(xs, Fraction(0)) / len(xs)
    if len(xs) > 1:
        var = sum(((x - mean) ** 2 for x in xs), Fraction(0)) / (len(xs) - 1)
        std = Fraction(math.sqrt(float(var)))
    else:
        std = Fraction(0)
    return max(0.0, float(mean - std))
