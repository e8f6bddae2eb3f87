"""Multi-view datasets: file I/O, synthetic generation, partial alignment,
normalization and mini-batch plans."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from smart_pvc.errors import DataError


@dataclass(frozen=True)
class MultiViewDataset:
    """``V`` views over the same ``N`` row indices.

    ``permutations[v][i]`` is the original row now stored at row ``i`` of
    view ``v``; aligned rows are fixed points and view 0 is the identity.
    ``labels`` belong to the view-0 rows.
    """

    views: tuple[np.ndarray, ...]
    labels: np.ndarray
    aligned_mask: np.ndarray
    permutations: tuple[np.ndarray, ...]
    n_clusters: int = field(default=0)

    def __post_init__(self):
        views = tuple(np.asarray(x, dtype=np.float64) for x in self.views)
        if len(views) < 2:
            raise DataError(f"need at least 2 views, got {len(views)}")
        n = views[0].shape[0]
        for v, x in enumerate(views):
            if x.ndim != 2 or x.shape[1] < 1:
                raise DataError(f"view {v}: expected a non-empty matrix, got shape {x.shape}")
            if x.shape[0] != n:
                raise DataError(f"view {v}: has {x.shape[0]} rows, view 0 has {n}")
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.shape != (n,):
            raise DataError(f"labels: expected {n} entries, got {labels.shape}")
        mask = np.asarray(self.aligned_mask, dtype=bool)
        if mask.shape != (n,):
            raise DataError(f"aligned_mask: expected {n} entries, got {mask.shape}")
        perms = tuple(np.asarray(p, dtype=np.int64) for p in self.permutations)
        if len(perms) != len(views):
            raise DataError("one permutation per view is required")
        for v, p in enumerate(perms):
            if p.shape != (n,) or not np.array_equal(np.sort(p), np.arange(n)):
                raise DataError(f"permutation {v} is not a bijection on 0..{n - 1}")
            if not np.all(p[mask] == np.flatnonzero(mask)):
                raise DataError(f"permutation {v} moves an aligned row")
        k = int(self.n_clusters) or (int(labels.max()) + 1 if n else 0)
        if n and (labels.min() < 0 or labels.max() >= k):
            raise DataError(f"labels must lie in [0, {k}), found range [{labels.min()}, {labels.max()}]")
        for x in views:
            x.setflags(write=False)
        object.__setattr__(self, "views", views)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "aligned_mask", mask)
        object.__setattr__(self, "permutations", perms)
        object.__setattr__(self, "n_clusters", k)

    @property
    def n(self) -> int:
        return self.views[0].shape[0]

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def dims(self) -> list[int]:
        return [x.shape[1] for x in self.views]

    @property
    def n_aligned(self) -> int:
        return int(self.aligned_mask.sum())

    @property
    def eta(self) -> float:
        return self.n_aligned / self.n

    def view_labels(self, v: int) -> np.ndarray:
        """True class of each row of view ``v``."""
        return self.labels[self.permutations[v]]

    @classmethod
    def aligned(cls, views: Sequence[np.ndarray], labels, n_clusters: int = 0) -> "MultiViewDataset":
        n = np.asarray(views[0]).shape[0]
        ident = np.arange(n)
        return cls(
            tuple(views),
            labels,
            np.ones(n, dtype=bool),
            tuple(ident.copy() for _ in views),
            n_clusters,
        )


@dataclass(frozen=True)
class BatchIndexPlan:
    epoch_order: np.ndarray
    batch_size: int

    def batches(self) -> list[np.ndarray]:
        b = self.batch_size
        return [self.epoch_order[i : i + b] for i in range(0, self.epoch_order.size, b)]

    def __iter__(self):
        return iter(self.batches())

    def __len__(self):
        return math.ceil(self.epoch_order.size / self.batch_size)


# ---------------------------------------------------------------- file I/O

BIN_SUFFIXES = (".bin", ".f64")


def read_matrix(path) -> np.ndarray:
    """Read a view matrix: headerless CSV, or binary with a uint64 (rows, cols) header."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    if path.suffix in BIN_SUFFIXES:
        raw = path.read_bytes()
        if len(raw) < 16:
            raise DataError(f"{path}: truncated header")
        rows, cols = struct.unpack_from("<QQ", raw, 0)
        expected = 16 + rows * cols * 8
        if len(raw) != expected:
            raise DataError(f"{path}: expected {expected} bytes for {rows}x{cols}, found {len(raw)}")
        return np.frombuffer(raw, dtype="<f8", offset=16).reshape(rows, cols).astype(np.float64)
    rows = []
    with open(path, newline="") as fh:
        for r, line in enumerate(csv.reader(fh)):
            if not line:
                continue
            try:
                rows.append([float(x) for x in line])
            except ValueError:
                bad = next(c for c, x in enumerate(line) if not _is_float(x))
                raise DataError(f"{path}: non-numeric cell at row {r}, column {bad}: {line[bad]!r}") from None
            if len(rows[-1]) != len(rows[0]):
                raise DataError(f"{path}: row {r} has {len(rows[-1])} columns, expected {len(rows[0])}")
    if not rows:
        raise DataError(f"{path}: empty matrix")
    return np.array(rows, dtype=np.float64)


def _is_float(x: str) -> bool:
    try:
        float(x)
    except ValueError:
        return False
    return True


def write_matrix(path, X: np.ndarray) -> None:
    path = Path(path)
    X = np.asarray(X, dtype=np.float64)
    if path.suffix in BIN_SUFFIXES:
        with open(path, "wb") as fh:
            fh.write(struct.pack("<QQ", *X.shape))
            fh.write(np.ascontiguousarray(X, dtype="<f8").tobytes())
        return
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in X:
            writer.writerow([repr(float(x)) for x in row])


def read_labels(path, n_clusters: int | None = None) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    labels = []
    with open(path) as fh:
        for r, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                labels.append(int(line))
            except ValueError:
                raise DataError(f"{path}: non-integer label at row {r}: {line!r}") from None
            if labels[-1] < 0 or (n_clusters is not None and labels[-1] >= n_clusters):
                raise DataError(f"{path}: label {labels[-1]} at row {r} outside [0, {n_clusters})")
    return np.array(labels, dtype=np.int64)


def write_labels(path, labels) -> None:
    with open(path, "w") as fh:
        for x in np.asarray(labels, dtype=np.int64):
            fh.write(f"{int(x)}\n")


def load_dataset(view_paths: Sequence, label_path, n_clusters: int | None = None) -> MultiViewDataset:
    views = [read_matrix(p) for p in view_paths]
    labels = read_labels(label_path, n_clusters)
    for p, x in zip(view_paths, views):
        if x.shape[0] != views[0].shape[0]:
            raise DataError(
                f"{p}: has {x.shape[0]} rows but {view_paths[0]} has {views[0].shape[0]}"
            )
    if labels.shape[0] != views[0].shape[0]:
        raise DataError(f"{label_path}: has {labels.shape[0]} labels, views have {views[0].shape[0]} rows")
    return MultiViewDataset.aligned(views, labels, n_clusters or 0)


def dataset_files(directory) -> tuple[list[Path], Path]:
    """Locate ``view_1.*``, ``view_2.*``, ... and ``labels.txt`` in a directory."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")
    views = []
    v = 1
    while True:
        found = [directory / f"view_{v}{s}" for s in (".csv",) + BIN_SUFFIXES]
        found = [p for p in found if p.exists()]
        if not found:
            break
        views.append(found[0])
        v += 1
    if len(views) < 2:
        raise DataError(f"{directory}: expected view_1.csv, view_2.csv, ... (found {len(views)})")
    return views, directory / "labels.txt"


def load_dataset_dir(directory, n_clusters: int | None = None) -> MultiViewDataset:
    views, labels = dataset_files(directory)
    return load_dataset(views, labels, n_clusters)


def save_dataset(ds: MultiViewDataset, directory, fmt: str = "csv") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    suffix = {"csv": ".csv", "bin": ".bin"}[fmt]
    paths = []
    for v, x in enumerate(ds.views, start=1):
        p = directory / f"view_{v}{suffix}"
        write_matrix(p, x)
        paths.append(p)
    p = directory / "labels.txt"
    write_labels(p, ds.labels)
    paths.append(p)
    return paths


# ------------------------------------------------------------- generation


def generate_synthetic(
    n: int,
    k: int,
    v: int,
    view_dims: Sequence[int],
    cluster_sep: float,
    noise_std: float,
    seed: int,
) -> MultiViewDataset:
    """Gaussian clusters in a shared latent space seen through nonlinear views.

    Latents are ``center + N(0, I)`` with centers drawn from
    ``N(0, cluster_sep^2 I)`` in ``max(view_dims)`` dimensions. View ``v``
    observes ``tanh(latent @ W_v) + noise`` with ``W_v`` having i.i.d.
    ``N(0, 1/L)`` entries. Labels are balanced (``n // k`` or one more).
    """
    view_dims = [int(x) for x in view_dims]
    if k < 2 or n < k:
        raise DataError(f"need n >= k >= 2, got n={n}, k={k}")
    if v < 2 or len(view_dims) != v:
        raise DataError(f"need {v} >= 2 view dims, got {view_dims}")
    if any(x < 1 for x in view_dims):
        raise DataError(f"view dims must be positive, got {view_dims}")
    if not cluster_sep > 0:
        raise DataError(f"cluster_sep must be positive, got {cluster_sep}")
    if not noise_std >= 0:
        raise DataError(f"noise_std must be non-negative, got {noise_std}")
    rng = np.random.default_rng(seed)
    latent_dim = max(view_dims)
    centers = rng.normal(scale=cluster_sep, size=(k, latent_dim))
    labels = rng.permutation(np.arange(n) % k)
    latents = centers[labels] + rng.normal(size=(n, latent_dim))
    views = []
    for dim in view_dims:
        W = rng.normal(scale=1.0 / np.sqrt(latent_dim), size=(latent_dim, dim))
        views.append(np.tanh(latents @ W) + noise_std * rng.normal(size=(n, dim)))
    return MultiViewDataset.aligned(views, labels, k)


def synthetic_latents(n, k, v, view_dims, cluster_sep, noise_std, seed):
    """Re-draw the latent centers and samples used by :func:`generate_synthetic`."""
    rng = np.random.default_rng(seed)
    latent_dim = max(int(x) for x in view_dims)
    centers = rng.normal(scale=cluster_sep, size=(k, latent_dim))
    labels = rng.permutation(np.arange(n) % k)
    latents = centers[labels] + rng.normal(size=(n, latent_dim))
    return centers, latents, labels


def apply_partial_alignment(ds: MultiViewDataset, eta: float, seed: int) -> MultiViewDataset:
    """Keep ``floor(eta * N)`` random rows aligned; shuffle the rest in views 2..V."""
    if not 0.0 < eta <= 1.0:
        raise DataError(f"alignment rate must lie in (0, 1], got {eta}")
    if not ds.aligned_mask.all():
        raise DataError("dataset is already partially aligned")
    n = ds.n
    rng = np.random.default_rng(seed)
    n_aligned = int(math.floor(eta * n + 1e-9))
    keep = rng.choice(n, size=n_aligned, replace=False)
    mask = np.zeros(n, dtype=bool)
    mask[keep] = True
    free = np.flatnonzero(~mask)
    views = [ds.views[0]]
    perms = [np.arange(n)]
    for x in ds.views[1:]:
        perm = np.arange(n)
        perm[free] = free[rng.permutation(free.size)]
        views.append(x[perm])
        perms.append(perm)
    return MultiViewDataset(tuple(views), ds.labels, mask, tuple(perms), ds.n_clusters)


def zscore_views(ds: MultiViewDataset) -> MultiViewDataset:
    """Standardize every column of every view (sample std; constant columns -> 0)."""
    out = []
    for x in ds.views:
        mean = x.mean(axis=0)
        std = x.std(axis=0, ddof=1) if x.shape[0] > 1 else np.zeros(x.shape[1])
        ok = std >= 1e-12
        z = np.zeros_like(x)
        z[:, ok] = (x[:, ok] - mean[ok]) / std[ok]
        out.append(z)
    return replace(ds, views=tuple(out))


def make_batches(n: int, b: int, seed: int | np.random.Generator) -> BatchIndexPlan:
    if not 1 <= b <= n:
        raise ValueError(f"batch size must satisfy 1 <= b <= n, got b={b}, n={n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return BatchIndexPlan(rng.permutation(n), int(b))
