"""K-means and the ACC / NMI / ARI clustering scores."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ClusterResult:
    assignments: np.ndarray
    centers: np.ndarray
    inertia: float
    seed: int
    restarts: int
    iterations: int
    acc: float | None = None
    nmi: float | None = None
    ari: float | None = None
    inertia_history: list[float] = field(default_factory=list, repr=False)

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    def metrics(self) -> dict:
        return {
            "acc": self.acc,
            "nmi": self.nmi,
            "ari": self.ari,
            "inertia": self.inertia,
            "seed": self.seed,
            "k": self.k,
        }

    def to_json(self) -> str:
        return json.dumps(self.metrics(), indent=2, sort_keys=True)


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    closest = _sq_dists(X, centers[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[j] = X[idx]
        closest = np.minimum(closest, _sq_dists(X, centers[j : j + 1])[:, 0])
    return centers


def _lloyd(X, k, max_iter, tol, rng):
    centers = _kmeanspp(X, k, rng)
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(X, centers)
        labels = d.argmin(1)
        history.append(float(d[np.arange(X.shape[0]), labels].sum()))
        counts = np.bincount(labels, minlength=k)
        new = np.zeros_like(centers)
        np.add.at(new, labels, X)
        nonempty = counts > 0
        new[nonempty] /= counts[nonempty, None]
        if not nonempty.all():
            # reseed each empty cluster at the point farthest from its center
            point_d = d[np.arange(X.shape[0]), labels].copy()
            for j in np.flatnonzero(~nonempty):
                far = int(point_d.argmax())
                new[j] = X[far]
                point_d[far] = -1.0
        shift = float(np.sqrt(((new - centers) ** 2).sum(1)).max())
        centers = new
        if shift < tol:
            break
    d = _sq_dists(X, centers)
    labels = d.argmin(1)
    inertia = float(((X - centers[labels]) ** 2).sum())
    history.append(inertia)
    return labels, centers, inertia, it, history


def kmeans(
    H,
    k: int,
    restarts: int = 10,
    max_iter: int = 300,
    tol: float = 1e-6,
    seed: int = 0,
    n_jobs: int = 1,
) -> ClusterResult:
    """Best-of-``restarts`` Lloyd k-means with k-means++ seeding.

    Restart ``r`` draws from ``default_rng([seed, r])``, so results do not
    depend on ``n_jobs``; ties in inertia go to the lowest restart index.
    """
    X = np.asarray(H, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {X.shape}")
    n = X.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"need 1 <= k <= N, got k={k}, N={n}")
    restarts = max(1, int(restarts))

    def run(r):
        return _lloyd(X, k, max_iter, tol, np.random.default_rng([seed, r]))

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            runs = list(pool.map(run, range(restarts)))
    else:
        runs = [run(r) for r in range(restarts)]
    best = min(range(restarts), key=lambda r: (runs[r][2], r))
    labels, centers, inertia, iters, history = runs[best]
    for a, b in zip(history, history[1:]):
        if b > a * (1 + 1e-9) + 1e-12:
            raise AssertionError(f"k-means inertia increased: {a} -> {b}")
    return ClusterResult(labels.astype(np.int64), centers, inertia, seed, restarts, iters, inertia_history=history)


def hungarian(cost) -> np.ndarray:
    """Minimum-cost assignment for an ``n x m`` cost matrix with ``n <= m``.

    Returns ``col`` with ``col[i]`` the column given to row ``i``. Shortest
    augmenting paths with row/column potentials, O(n^2 m).
    """
    C = np.asarray(cost, dtype=np.float64)
    if C.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix has non-finite entries")
    transposed = C.shape[0] > C.shape[1]
    if transposed:
        C = C.T
    n, m = C.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row (1-based) matched to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = C[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(cand.argmin()) + 1
            delta = cand[j1 - 1]
            usedj = np.flatnonzero(used)
            u[p[usedj]] += delta
            v[usedj] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            col[p[j] - 1] = j - 1
    if transposed:
        row = np.full(m, -1, dtype=np.int64)
        row[col] = np.arange(n)
        return row
    return col


def _check_labels(pred, truth):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ValueError(f"label length mismatch: {pred.shape} vs {truth.shape}")
    return pred, truth


def contingency(pred, truth) -> np.ndarray:
    pred, truth = _check_labels(pred, truth)
    _, pi = np.unique(pred, return_inverse=True)
    _, ti = np.unique(truth, return_inverse=True)
    table = np.zeros((pi.max(initial=-1) + 1, ti.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(table, (pi, ti), 1)
    return table


def acc(pred, truth) -> float:
    """Accuracy under the best one-to-one matching of predicted to true labels."""
    pred, truth = _check_labels(pred, truth)
    if pred.size == 0:
        return 0.0
    table = contingency(pred, truth)
    size = max(table.shape)
    square = np.zeros((size, size))
    square[: table.shape[0], : table.shape[1]] = table
    col = hungarian(-square)
    return float(square[np.arange(size), col].sum() / pred.size)


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def nmi(pred, truth) -> float:
    """Mutual information normalized by the arithmetic mean of the two entropies."""
    pred, truth = _check_labels(pred, truth)
    n = pred.size
    table = contingency(pred, truth)
    hp = _entropy(table.sum(1), n)
    ht = _entropy(table.sum(0), n)
    if hp == 0.0 or ht == 0.0:
        return 1.0 if hp == ht else 0.0
    nz = table > 0
    pij = table[nz] / n
    outer = np.outer(table.sum(1), table.sum(0))[nz] / (n * n)
    mi = float((pij * np.log(pij / outer)).sum())
    return max(0.0, mi / ((hp + ht) / 2.0))


def ari(pred, truth) -> float:
    pred, truth = _check_labels(pred, truth)
    n = pred.size
    if n < 2:
        raise ValueError("ARI needs at least 2 samples")
    table = contingency(pred, truth).astype(np.float64)
    comb = lambda x: x * (x - 1) / 2.0  # noqa: E731
    index = comb(table).sum()
    a = comb(table.sum(1)).sum()
    b = comb(table.sum(0)).sum()
    expected = a * b / comb(float(n))
    max_index = (a + b) / 2.0
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))


def evaluate_labels(result: ClusterResult, truth) -> ClusterResult:
    result.acc = acc(result.assignments, truth)
    result.nmi = nmi(result.assignments, truth)
    result.ari = ari(result.assignments, truth)
    return result
