"""Cross-view semantic guidance graph and graph-weighted feature fusion."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from smart_pvc.nn import l2_normalize_rows
from smart_pvc.stats import as_array, standardize_rows


@dataclass
class SemanticGraph:
    """Sparse weights ``w[i, k]`` linking row ``i`` of view a to row ``k`` of view b."""

    weights: sp.csr_matrix
    threshold_used: float
    aligned_diag: np.ndarray

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def n_edges(self) -> int:
        return int(self.weights.nnz)

    def row(self, i: int) -> list[tuple[int, float]]:
        if not 0 <= i < self.n:
            raise IndexError(f"row {i} out of range for graph of size {self.n}")
        lo, hi = self.weights.indptr[i], self.weights.indptr[i + 1]
        return list(zip(self.weights.indices[lo:hi].tolist(), self.weights.data[lo:hi].tolist()))

    def rows(self) -> list[list[tuple[int, float]]]:
        return [self.row(i) for i in range(self.n)]

    def toarray(self) -> np.ndarray:
        return self.weights.toarray()

    def edges(self):
        coo = self.weights.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return coo.row[order], coo.col[order], coo.data[order]


def _from_triples(n, rows, cols, vals, threshold, aligned) -> SemanticGraph:
    w = sp.csr_matrix((vals, (rows, cols)), shape=(n, n), dtype=np.float64)
    w.sum_duplicates()
    w.sort_indices()
    return SemanticGraph(w, float(threshold), np.asarray(aligned, dtype=bool).copy())


def _block_entries(block: np.ndarray, row0: int, aligned: np.ndarray, threshold: float):
    r, c = np.nonzero(block > threshold)
    vals = np.minimum(block[r, c], 1.0)
    r = r + row0
    # aligned diagonal: weight exactly 1, whatever the correlation
    n_rows = block.shape[0]
    diag_rows = np.arange(row0, row0 + n_rows)
    diag_rows = diag_rows[(diag_rows < block.shape[1]) & aligned[diag_rows]]
    is_diag_aligned = (r == c) & aligned[r]
    r, c, vals = r[~is_diag_aligned], c[~is_diag_aligned], vals[~is_diag_aligned]
    r = np.concatenate([r, diag_rows])
    c = np.concatenate([c, diag_rows])
    vals = np.concatenate([vals, np.ones(diag_rows.size)])
    return r, c, vals


def build_graph(cross, aligned, threshold: float) -> SemanticGraph:
    """Apply the three-case edge rule to a full correlation matrix.

    Aligned diagonal pairs get weight 1; any other pair is kept with its
    correlation as weight when strictly above ``threshold`` (capped at 1 to
    absorb float slack); everything else is absent.
    """
    c = as_array(cross)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"expected a square matrix, got {c.shape}")
    n = c.shape[0]
    aligned = np.asarray(aligned, dtype=bool)
    if aligned.shape != (n,):
        raise ValueError(f"aligned mask has shape {aligned.shape}, expected ({n},)")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    r, cc, v = _block_entries(c, 0, aligned, threshold)
    return _from_triples(n, r, cc, v, threshold, aligned)


def build_graph_streaming(Za, Zb, aligned, threshold: float, block_size: int = 1024) -> SemanticGraph:
    """Graph over ``cross_cov(Za, Zb)`` computed in row blocks; memory O(edges)."""
    Za = np.asarray(Za, dtype=np.float64)
    Zb = np.asarray(Zb, dtype=np.float64)
    if Za.shape != Zb.shape or Za.ndim != 2:
        raise ValueError(f"shape mismatch: {Za.shape} vs {Zb.shape}")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    if block_size < 1:
        raise ValueError("block_size must be positive")
    n, d = Za.shape
    aligned = np.asarray(aligned, dtype=bool)
    if aligned.shape != (n,):
        raise ValueError(f"aligned mask has shape {aligned.shape}, expected ({n},)")
    Ua, _ = standardize_rows(Za)
    Ub, _ = standardize_rows(Zb)
    parts = []
    for start in range(0, n, block_size):
        block = Ua[start : start + block_size] @ Ub.T / (d - 1)
        parts.append(_block_entries(block, start, aligned, threshold))
    rows = np.concatenate([p[0] for p in parts])
    cols = np.concatenate([p[1] for p in parts])
    vals = np.concatenate([p[2] for p in parts])
    return _from_triples(n, rows, cols, vals, threshold, aligned)


def diagonal_graph(aligned) -> SemanticGraph:
    """Graph holding only the aligned diagonal (no semantic neighbors)."""
    aligned = np.asarray(aligned, dtype=bool)
    idx = np.flatnonzero(aligned)
    return _from_triples(aligned.size, idx, idx, np.ones(idx.size), 1.0, aligned)


def matched_representation(g: SemanticGraph, Hb, i: int) -> np.ndarray:
    Hb = np.asarray(Hb, dtype=np.float64)
    out = np.zeros(Hb.shape[1])
    for k, w in g.row(i):
        out += w * Hb[k]
    return out


@dataclass
class FusedRepresentation:
    values: np.ndarray
    fallback: np.ndarray  # (N, V-1) True where a matched vector was zero

    @property
    def fallback_rate(self) -> float:
        return float(self.fallback.mean()) if self.fallback.size else 0.0


def fuse(Hs: Sequence[np.ndarray], graphs: Sequence[SemanticGraph]) -> FusedRepresentation:
    """Concatenate the anchor view with normalized graph-matched vectors of the others."""
    Hs = [np.asarray(h, dtype=np.float64) for h in Hs]
    if len(graphs) != len(Hs) - 1:
        raise ValueError(f"{len(Hs)} views need {len(Hs) - 1} graphs, got {len(graphs)}")
    n, d = Hs[0].shape
    blocks = [Hs[0]]
    flags = np.zeros((n, len(graphs)), dtype=bool)
    for j, (h, g) in enumerate(zip(Hs[1:], graphs)):
        if h.shape != (n, d):
            raise ValueError(f"view {j + 2} has shape {h.shape}, expected {(n, d)}")
        if g.n != n:
            raise ValueError(f"graph {j} has {g.n} rows, expected {n}")
        matched, norms = l2_normalize_rows(g.weights @ h, return_norms=True)
        flags[:, j] = norms == 0
        blocks.append(matched)
    return FusedRepresentation(np.hstack(blocks), flags)


def graph_purity(g: SemanticGraph, labels_a, labels_b) -> float:
    """Weight-weighted fraction of stored edges joining same-class endpoints."""
    la = np.asarray(labels_a)
    lb = np.asarray(labels_b)
    if la.shape != (g.n,) or lb.shape != (g.n,):
        raise ValueError(f"label lengths {la.shape}, {lb.shape} do not match graph size {g.n}")
    r, c, w = g.edges()
    total = float(w.sum())
    if total == 0.0:
        return 1.0
    return float(w[la[r] == lb[c]].sum() / total)


def export_graph(g: SemanticGraph, csv_path, meta_path, purity: float | None = None, extra=None) -> None:
    r, c, w = g.edges()
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "k", "weight"])
        for i, k, x in zip(r.tolist(), c.tolist(), w.tolist()):
            writer.writerow([i, k, repr(x)])
    meta = {
        "n": g.n,
        "threshold": g.threshold_used,
        "edge_count": g.n_edges,
        "purity": purity,
    }
    if extra:
        meta.update(extra)
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
