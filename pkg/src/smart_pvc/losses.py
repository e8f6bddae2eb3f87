"""Loss terms and their gradients.

Each function returns the scalar loss together with gradients w.r.t. its
matrix inputs, so the trainer can chain them into the networks by hand.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from smart_pvc.nn import l2_normalize_rows, l2_normalize_rows_backward
from smart_pvc.stats import as_array, standardize_rows, standardize_rows_backward


@dataclass
class LossBreakdown:
    rec: float = 0.0
    cfa: float = 0.0
    cma: float = 0.0
    vda: float = 0.0
    smc: float = 0.0
    total: float = 0.0
    lambda1: float = 0.0
    lambda2: float = 0.0
    tau: float = 1.0

    def as_dict(self) -> dict:
        return asdict(self)


def loss_rec(X: Sequence[np.ndarray], Xhat: Sequence[np.ndarray]) -> tuple[float, list[np.ndarray]]:
    """Summed squared Frobenius residual over views; grads w.r.t. each ``Xhat``."""
    if len(X) != len(Xhat):
        raise ValueError(f"{len(X)} views but {len(Xhat)} reconstructions")
    total = 0.0
    grads = []
    for v, (x, xh) in enumerate(zip(X, Xhat)):
        x = np.asarray(x, dtype=np.float64)
        xh = np.asarray(xh, dtype=np.float64)
        if x.shape != xh.shape:
            raise ValueError(f"view {v}: shape {x.shape} vs reconstruction {xh.shape}")
        r = xh - x
        total += float(np.sum(r * r))
        grads.append(2.0 * r)
    return total, grads


def loss_cfa(cross) -> tuple[float, np.ndarray]:
    c = as_array(cross)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"expected a square matrix, got {c.shape}")
    n = c.shape[0]
    if n < 1:
        raise ValueError("empty covariance matrix")
    resid = np.diagonal(c) - 1.0
    grad = np.zeros_like(c)
    np.fill_diagonal(grad, 2.0 * resid / n)
    return float(resid @ resid / n), grad


def loss_cma(ca, cb) -> tuple[float, tuple[np.ndarray, np.ndarray]]:
    a = as_array(ca)
    b = as_array(cb)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    n = a.shape[0]
    diff = a - b
    g = 2.0 * diff / n
    return float(np.sum(diff * diff) / n), (g, -g)


@dataclass
class VdaTerms:
    value: float
    cfa: float
    cma: float
    grad_a: np.ndarray
    grad_b: np.ndarray
    diag: np.ndarray  # aligned-pair cross-view correlations, reused for the threshold


def loss_vda(Za, Zb, use_cfa: bool = True, use_cma: bool = True) -> VdaTerms:
    """Cross-view diagonal alignment plus intra-view covariance matching.

    Gradients flow through the row standardization into ``Za`` and ``Zb``.
    """
    Za = np.asarray(Za, dtype=np.float64)
    Zb = np.asarray(Zb, dtype=np.float64)
    if Za.shape != Zb.shape or Za.ndim != 2:
        raise ValueError(f"shape mismatch: {Za.shape} vs {Zb.shape}")
    n, d = Za.shape
    if n < 2:
        raise ValueError("view distribution alignment needs at least 2 aligned samples")
    if d < 2:
        raise ValueError("covariance needs d >= 2")
    Ua, sa = standardize_rows(Za)
    Ub, sb = standardize_rows(Zb)
    scale = 1.0 / (d - 1)
    diag = np.einsum("ij,ij->i", Ua, Ub) * scale
    dUa = np.zeros_like(Ua)
    dUb = np.zeros_like(Ub)

    cfa = 0.0
    if use_cfa:
        resid = diag - 1.0
        cfa = float(resid @ resid / n)
        # only the diagonal of the cross matrix enters the loss
        gdiag = 2.0 * resid / n * scale
        dUa += gdiag[:, None] * Ub
        dUb += gdiag[:, None] * Ua

    cma = 0.0
    if use_cma:
        Ca = Ua @ Ua.T * scale
        Cb = Ub @ Ub.T * scale
        cma, (gA, gB) = loss_cma(Ca, Cb)
        dUa += (gA + gA.T) @ Ua * scale
        dUb += (gB + gB.T) @ Ub * scale

    return VdaTerms(
        value=cfa + cma,
        cfa=cfa,
        cma=cma,
        grad_a=standardize_rows_backward(Ua, sa, dUa),
        grad_b=standardize_rows_backward(Ub, sb, dUb),
        diag=diag,
    )


def graph_weights(omega, n: int) -> np.ndarray:
    """Dense ``n x n`` weight matrix from a SemanticGraph, sparse matrix, or array."""
    w = getattr(omega, "weights", omega)
    if sp.issparse(w):
        if w.shape != (n, n):
            raise ValueError(f"graph shape {w.shape} does not match {n} samples")
        return w.toarray()
    if w is None:
        return np.zeros((n, n))
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (n, n):
        raise ValueError(f"graph shape {w.shape} does not match {n} samples")
    return w.copy()


@dataclass
class SmcTerms:
    value: float
    grad_a: np.ndarray
    grad_b: np.ndarray
    skipped: int
    per_row: np.ndarray


def cosine_matrix(Ha, Hb, return_parts: bool = False):
    """Cosine similarity between every row of Ha and every row of Hb; zero rows give 0."""
    An, na = l2_normalize_rows(Ha, return_norms=True)
    Bn, nb = l2_normalize_rows(Hb, return_norms=True)
    S = An @ Bn.T
    if return_parts:
        return S, (An, na, Bn, nb)
    return S


def loss_smc(Ha, Hb, omega, aligned, tau: float = 1.0) -> SmcTerms:
    """Graph-weighted contrastive loss between view-a anchors and view-b rows.

    Row ``i`` has numerator ``1[aligned_i] e^{s_ii/tau} + sum_k w_ik e^{s_ik/tau}``
    (neighbors ``k`` from the graph, aligned diagonal counted once) over the
    softmax denominator across all rows of ``Hb``. Rows with an empty
    numerator are skipped and counted.
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    Ha = np.asarray(Ha, dtype=np.float64)
    Hb = np.asarray(Hb, dtype=np.float64)
    if Ha.shape != Hb.shape or Ha.ndim != 2:
        raise ValueError(f"shape mismatch: {Ha.shape} vs {Hb.shape}")
    n = Ha.shape[0]
    aligned = np.asarray(aligned, dtype=bool)
    if aligned.shape != (n,):
        raise ValueError(f"aligned mask has shape {aligned.shape}, expected ({n},)")
    W = graph_weights(omega, n)
    idx = np.flatnonzero(aligned)
    W[idx, idx] = 1.0

    S, (An, na, Bn, nb) = cosine_matrix(Ha, Hb, return_parts=True)
    logits = S / tau
    logits = logits - logits.max(axis=1, keepdims=True)
    E = np.exp(logits)
    num = np.sum(W * E, axis=1)
    den = np.sum(E, axis=1)
    keep = num > 0
    n_eff = int(keep.sum())
    per_row = np.zeros(n)
    per_row[keep] = np.log(den[keep]) - np.log(num[keep])
    if n_eff == 0:
        zero = np.zeros_like(Ha)
        return SmcTerms(0.0, zero, zero.copy(), n, per_row)
    value = float(per_row[keep].sum() / n_eff)

    dlogits = np.zeros_like(S)
    dlogits[keep] = (E[keep] / den[keep, None]) - (W[keep] * E[keep]) / num[keep, None]
    dS = dlogits / (tau * n_eff)
    dA = dS @ Bn
    dB = dS.T @ An
    return SmcTerms(
        value=value,
        grad_a=l2_normalize_rows_backward(An, na, dA),
        grad_b=l2_normalize_rows_backward(Bn, nb, dB),
        skipped=n - n_eff,
        per_row=per_row,
    )


def loss_total(
    rec: float,
    cfa: float = 0.0,
    cma: float = 0.0,
    smc: float = 0.0,
    lambda1: float = 0.0,
    lambda2: float = 0.0,
    tau: float = 1.0,
    vda: float | None = None,
) -> LossBreakdown:
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError(f"loss weights must be non-negative, got {lambda1}, {lambda2}")
    if vda is None:
        vda = cfa + cma
    return LossBreakdown(
        rec=rec,
        cfa=cfa,
        cma=cma,
        vda=vda,
        smc=smc,
        total=rec + lambda1 * vda + lambda2 * smc,
        lambda1=lambda1,
        lambda2=lambda2,
        tau=tau,
    )
