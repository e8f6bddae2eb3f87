"""Joint single-stage training, evaluation, and the experiment drivers built
on top of them (ablation table, alignment-rate sweep, matching comparison)."""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from itertools import combinations
from typing import Sequence

import numpy as np

from smart_pvc.cluster import ClusterResult, evaluate_labels, kmeans
from smart_pvc.data import MultiViewDataset, apply_partial_alignment, make_batches
from smart_pvc.errors import ConfigError, NumericError
from smart_pvc.graph import (
    FusedRepresentation,
    SemanticGraph,
    build_graph,
    build_graph_streaming,
    diagonal_graph,
    fuse,
    graph_purity,
)
from smart_pvc.losses import LossBreakdown, loss_rec, loss_smc, loss_total, loss_vda
from smart_pvc.nn import AdamState, MlpNetwork, adam_step, l2_normalize_rows, l2_normalize_rows_backward
from smart_pvc.stats import adaptive_threshold, cross_cov, paired_pearson

log = logging.getLogger(__name__)

ABLATIONS = frozenset(
    {"no_vda", "no_smc", "no_cfa", "no_cma", "no_guidance", "all_pairs_views", "graph_on_projection"}
)

# named rows of the ablation table -> ablation switches
VARIANTS = {
    "full": (),
    "rec_only": ("no_vda", "no_smc"),
    "rec+vda": ("no_smc",),
    "rec+smc": ("no_vda",),
    "no_vda": ("no_vda",),
    "no_smc": ("no_smc",),
    "no_cfa": ("no_cfa",),
    "no_cma": ("no_cma",),
    "no_guidance": ("no_guidance",),
}


@dataclass
class TrainConfig:
    d: int = 30
    hidden_dims: list[int] = field(default_factory=lambda: [1024, 1024])
    projector_hidden: list[int] | None = None
    activation: str = "relu"
    epochs: int = 500
    batch_size: int = 500
    lr: float = 1e-4
    lambda1: float = 10.0
    lambda2: float = 1.0
    tau: float = 1.0
    seed: int = 0
    ablation: tuple[str, ...] = ()
    eval_every: int = 0
    rec_batch_scaling: bool = True
    graph_mode: str = "batch"
    graph_block_size: int = 1024
    kmeans_restarts: int = 10
    kmeans_max_iter: int = 300
    kmeans_tol: float = 1e-6

    def __post_init__(self):
        self.hidden_dims = [int(x) for x in self.hidden_dims]
        if self.projector_hidden is not None:
            self.projector_hidden = [int(x) for x in self.projector_hidden]
        if isinstance(self.ablation, str):
            self.ablation = tuple(a for a in self.ablation.split(",") if a)
        self.ablation = tuple(sorted(set(self.ablation)))

    def validate(self) -> "TrainConfig":
        problems = []
        if self.batch_size < 2:
            problems.append(f"batch_size must be >= 2, got {self.batch_size}")
        if not self.tau > 0:
            problems.append(f"tau must be > 0, got {self.tau}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            problems.append(f"lambda1/lambda2 must be >= 0, got {self.lambda1}, {self.lambda2}")
        if self.d < 2:
            problems.append(f"d must be >= 2, got {self.d}")
        if self.epochs < 0:
            problems.append(f"epochs must be >= 0, got {self.epochs}")
        if not self.lr > 0:
            problems.append(f"lr must be > 0, got {self.lr}")
        if any(h < 1 for h in self.hidden_dims):
            problems.append(f"hidden_dims must be positive, got {self.hidden_dims}")
        unknown = set(self.ablation) - ABLATIONS
        if unknown:
            problems.append(f"unknown ablation switch(es): {sorted(unknown)}")
        if self.graph_mode not in ("batch", "global"):
            problems.append(f"graph_mode must be 'batch' or 'global', got {self.graph_mode!r}")
        if self.activation not in ("relu", "tanh"):
            problems.append(f"activation must be relu or tanh, got {self.activation!r}")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def has(self, switch: str) -> bool:
        return switch in self.ablation

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ablation"] = list(self.ablation)
        return out

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        return cls(**values)


@dataclass
class TrainLogRow:
    epoch: int
    rec: float
    cfa: float
    cma: float
    vda: float
    smc: float
    total: float
    aligned_per_batch: float
    smc_skipped: int
    wall_time: float
    acc: float | None = None


@dataclass
class Networks:
    encoders: list[MlpNetwork]
    decoders: list[MlpNetwork]
    projector: MlpNetwork

    def all(self) -> list[MlpNetwork]:
        return [*self.encoders, *self.decoders, self.projector]

    def named(self) -> dict[str, MlpNetwork]:
        out = {f"encoder_{v}": e for v, e in enumerate(self.encoders)}
        out.update({f"decoder_{v}": d for v, d in enumerate(self.decoders)})
        out["projector"] = self.projector
        return out

    @classmethod
    def from_named(cls, nets: dict[str, MlpNetwork]) -> "Networks":
        n_views = sum(1 for k in nets if k.startswith("encoder_"))
        return cls(
            [nets[f"encoder_{v}"] for v in range(n_views)],
            [nets[f"decoder_{v}"] for v in range(n_views)],
            nets["projector"],
        )

    def params(self) -> list[np.ndarray]:
        return [p for net in self.all() for p in net.params()]

    def param_names(self) -> list[str]:
        return [f"{name}.{p}" for name, net in self.named().items() for p in net.param_names()]

    def encode(self, views: Sequence[np.ndarray]) -> list[np.ndarray]:
        return [e.forward(x) for e, x in zip(self.encoders, views)]

    def project(self, Z: Sequence[np.ndarray]) -> list[np.ndarray]:
        return [l2_normalize_rows(self.projector.forward(z)) for z in Z]


def build_networks(dims: Sequence[int], cfg: TrainConfig) -> Networks:
    """Per-view encoder/decoder pairs plus one projector shared by all views."""
    ss = np.random.SeedSequence(cfg.seed)
    children = ss.spawn(2 * len(dims) + 1)
    hid = list(cfg.hidden_dims)
    act = cfg.activation
    enc = [
        MlpNetwork([dv, *hid, cfg.d], rng=np.random.default_rng(children[v]), hidden_activation=act)
        for v, dv in enumerate(dims)
    ]
    dec = [
        MlpNetwork([cfg.d, *hid[::-1], dv], rng=np.random.default_rng(children[len(dims) + v]), hidden_activation=act)
        for v, dv in enumerate(dims)
    ]
    proj_hidden = cfg.projector_hidden if cfg.projector_hidden is not None else [cfg.d]
    proj = MlpNetwork([cfg.d, *proj_hidden, cfg.d], rng=np.random.default_rng(children[-1]), hidden_activation=act)
    return Networks(enc, dec, proj)


def view_pairs(n_views: int, all_pairs: bool) -> list[tuple[int, int]]:
    if all_pairs:
        return list(combinations(range(n_views), 2))
    return [(0, v) for v in range(1, n_views)]


@dataclass
class StepResult:
    breakdown: LossBreakdown
    grads: list[np.ndarray]
    n_aligned: int
    smc_skipped: int
    thresholds: dict


def batch_step(
    nets: Networks,
    Xb: Sequence[np.ndarray],
    aligned: np.ndarray,
    cfg: TrainConfig,
    last_thresholds: dict,
    graphs: dict | None = None,
) -> StepResult:
    """Forward and backward pass of the total objective on one mini-batch.

    ``graphs`` optionally supplies a precomputed graph per view pair (the
    epoch-level global mode); otherwise graphs are built from this batch.
    """
    n_views = len(Xb)
    B = Xb[0].shape[0]
    pairs = view_pairs(n_views, cfg.has("all_pairs_views"))
    n_al = int(aligned.sum())
    al_idx = np.flatnonzero(aligned)

    Z = nets.encode(Xb)
    Xh = [dec.forward(z) for dec, z in zip(nets.decoders, Z)]
    rec, gXh = loss_rec(Xb, Xh)
    rec_scale = 1.0 / B if cfg.rec_batch_scaling else 1.0
    rec *= rec_scale

    gZ = [np.zeros_like(z) for z in Z]
    use_vda = not cfg.has("no_vda") and cfg.lambda1 > 0 and not (cfg.has("no_cfa") and cfg.has("no_cma"))
    use_smc = not cfg.has("no_smc") and cfg.lambda2 > 0
    on_proj = cfg.has("graph_on_projection")

    thresholds = dict(last_thresholds)
    cfa = cma = vda = 0.0
    diags = {}
    if n_al >= 2:
        for a, b in pairs:
            if use_vda:
                t = loss_vda(Z[a][al_idx], Z[b][al_idx], use_cfa=not cfg.has("no_cfa"), use_cma=not cfg.has("no_cma"))
                w = cfg.lambda1 / len(pairs)
                gZ[a][al_idx] += w * t.grad_a
                gZ[b][al_idx] += w * t.grad_b
                cfa += t.cfa / len(pairs)
                cma += t.cma / len(pairs)
                vda += t.value / len(pairs)
                if not on_proj:
                    diags[(a, b)] = t.diag

    smc = 0.0
    skipped = 0
    gP = None
    if use_smc:
        P = nets.projector
        Hraw = P.forward(np.vstack(Z))
        Hn, norms = l2_normalize_rows(Hraw, return_norms=True)
        H = [Hn[v * B : (v + 1) * B] for v in range(n_views)]
        gH = np.zeros_like(Hn)
        src = H if on_proj else Z
        for a, b in pairs:
            if graphs is not None:
                g = graphs[(a, b)]
            else:
                if n_al >= 2:
                    diag = diags.get((a, b))
                    if diag is None:
                        diag = paired_pearson(src[a][al_idx], src[b][al_idx])
                    thresholds[(a, b)] = adaptive_threshold(diag)
                T = thresholds.get((a, b))
                if cfg.has("no_guidance") or T is None:
                    g = diagonal_graph(aligned)
                else:
                    g = build_graph(cross_cov(src[a], src[b]), aligned, T)
            t = loss_smc(H[a], H[b], g, aligned, cfg.tau)
            w = cfg.lambda2 / len(pairs)
            gH[a * B : (a + 1) * B] += w * t.grad_a
            gH[b * B : (b + 1) * B] += w * t.grad_b
            smc += t.value / len(pairs)
            skipped += t.skipped
        gP, gZp = P.backward(l2_normalize_rows_backward(Hn, norms, gH))
        for v in range(n_views):
            gZ[v] += gZp[v * B : (v + 1) * B]

    enc_grads, dec_grads = [], []
    for v in range(n_views):
        gd, gz_dec = nets.decoders[v].backward(gXh[v] * rec_scale)
        dec_grads.append(gd)
        ge, _ = nets.encoders[v].backward(gZ[v] + gz_dec)
        enc_grads.append(ge)
    if gP is None:
        gP = [np.zeros_like(p) for p in nets.projector.params()]
    grads = [g for gs in enc_grads for g in gs] + [g for gs in dec_grads for g in gs] + list(gP)

    breakdown = loss_total(rec, cfa, cma, smc, cfg.lambda1, cfg.lambda2, cfg.tau, vda=vda)
    return StepResult(breakdown, grads, n_al, skipped, thresholds)


@dataclass
class TrainResult:
    networks: Networks
    log: list[TrainLogRow]
    thresholds: dict
    config: TrainConfig


def _global_graphs(nets: Networks, ds: MultiViewDataset, cfg: TrainConfig):
    Z = nets.encode(ds.views)
    src = nets.project(Z) if cfg.has("graph_on_projection") else Z
    out = {}
    for a, b in view_pairs(ds.n_views, cfg.has("all_pairs_views")):
        if cfg.has("no_guidance"):
            out[(a, b)] = diagonal_graph(ds.aligned_mask)
            continue
        T = _global_threshold(src[a], src[b], ds.aligned_mask)
        out[(a, b)] = build_graph_streaming(src[a], src[b], ds.aligned_mask, T, cfg.graph_block_size)
    return out


def _global_threshold(Za, Zb, aligned) -> float:
    if not aligned.any():
        # no reference pairs: admit no semantic neighbors
        return 1.0
    return adaptive_threshold(paired_pearson(Za[aligned], Zb[aligned]))


def train(ds: MultiViewDataset, cfg: TrainConfig, evaluate_fn=None) -> TrainResult:
    cfg.validate()
    if cfg.batch_size > ds.n:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds dataset size {ds.n}")
    nets = build_networks(ds.dims, cfg)
    params = nets.params()
    names = nets.param_names()
    opt = AdamState(lr=cfg.lr)
    batch_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    thresholds: dict = {}
    log_rows: list[TrainLogRow] = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        plan = make_batches(ds.n, cfg.batch_size, batch_rng)
        graphs = _global_graphs(nets, ds, cfg) if cfg.graph_mode == "global" else None
        sums = dict(rec=0.0, cfa=0.0, cma=0.0, vda=0.0, smc=0.0, total=0.0)
        n_batches = 0
        aligned_total = 0
        skipped = 0
        for bi, idx in enumerate(plan):
            if idx.size < 2:
                continue
            Xb = [x[idx] for x in ds.views]
            batch_graphs = None
            if graphs is not None:
                batch_graphs = {
                    key: SemanticGraph(g.weights[idx][:, idx].tocsr(), g.threshold_used, ds.aligned_mask[idx])
                    for key, g in graphs.items()
                }
            step = batch_step(nets, Xb, ds.aligned_mask[idx], cfg, thresholds, batch_graphs)
            bd = step.breakdown
            if not math.isfinite(bd.total):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {bi}: {bd.as_dict()}")
            try:
                adam_step(opt, params, step.grads, names)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {bi}: {exc}") from None
            thresholds = step.thresholds
            for key in sums:
                sums[key] += getattr(bd, key)
            n_batches += 1
            aligned_total += step.n_aligned
            skipped += step.smc_skipped
        row = TrainLogRow(
            epoch=epoch,
            **{k: v / max(n_batches, 1) for k, v in sums.items()},
            aligned_per_batch=aligned_total / max(n_batches, 1),
            smc_skipped=skipped,
            wall_time=time.perf_counter() - t0,
        )
        if evaluate_fn is not None and cfg.eval_every and epoch % cfg.eval_every == 0:
            row.acc = evaluate_fn(nets).cluster.acc
        log_rows.append(row)
        log.debug("epoch %d total %.6f", epoch, row.total)
    return TrainResult(nets, log_rows, thresholds, cfg)


@dataclass
class EvalResult:
    cluster: ClusterResult
    graphs: list[SemanticGraph]
    thresholds: list[float]
    purity: float
    fused: FusedRepresentation
    H: list[np.ndarray] = field(repr=False, default_factory=list)

    def metrics(self) -> dict:
        out = self.cluster.metrics()
        out["graph_purity"] = self.purity
        out["thresholds"] = self.thresholds
        out["edge_counts"] = [g.n_edges for g in self.graphs]
        out["fallback_rate"] = self.fused.fallback_rate
        return out


def evaluate(nets: Networks, ds: MultiViewDataset, cfg: TrainConfig) -> EvalResult:
    """Full-data forward pass, global graphs anchored on view 1, fusion, k-means."""
    Z = nets.encode(ds.views)
    H = nets.project(Z)
    src = H if cfg.has("graph_on_projection") else Z
    al = ds.aligned_mask
    graphs, thresholds, purities = [], [], []
    for v in range(1, ds.n_views):
        T = _global_threshold(src[0], src[v], al)
        g = build_graph_streaming(src[0], src[v], al, T, cfg.graph_block_size)
        graphs.append(g)
        thresholds.append(T)
        purities.append(graph_purity(g, ds.labels, ds.view_labels(v)))
    fused = fuse(H, graphs)
    km = kmeans(
        fused.values,
        ds.n_clusters,
        restarts=cfg.kmeans_restarts,
        max_iter=cfg.kmeans_max_iter,
        tol=cfg.kmeans_tol,
        seed=cfg.seed,
    )
    evaluate_labels(km, ds.labels)
    return EvalResult(km, graphs, thresholds, float(np.mean(purities)), fused, H)


def correspondence_fusion(H: Sequence[np.ndarray], aligned: np.ndarray, method: str = "nearest") -> np.ndarray:
    """Re-pair each unaligned anchor row with its closest unaligned view-v row
    in Euclidean distance, then concatenate (known pairs kept as they are)."""
    from smart_pvc.cluster import hungarian

    aligned = np.asarray(aligned, dtype=bool)
    free = np.flatnonzero(~aligned)
    blocks = [H[0]]
    for h in H[1:]:
        partner = np.arange(h.shape[0])
        if free.size:
            A = H[0][free]
            Bm = h[free]
            d2 = (A * A).sum(1)[:, None] - 2 * A @ Bm.T + (Bm * Bm).sum(1)[None, :]
            if method == "hungarian":
                partner[free] = free[hungarian(d2)]
            elif method == "nearest":
                partner[free] = free[d2.argmin(1)]
            else:
                raise ConfigError(f"unknown re-pairing method {method!r}")
        blocks.append(h[partner])
    return np.hstack(blocks)


def compare_matching(nets: Networks, ds: MultiViewDataset, cfg: TrainConfig, method: str = "nearest") -> dict:
    """Cluster the same embeddings fused two ways: graph matching vs re-pairing."""
    semantic = evaluate(nets, ds, cfg)
    fused = correspondence_fusion(semantic.H, ds.aligned_mask, method)
    km = kmeans(fused, ds.n_clusters, cfg.kmeans_restarts, cfg.kmeans_max_iter, cfg.kmeans_tol, cfg.seed)
    evaluate_labels(km, ds.labels)
    return {"semantic_matching": semantic.cluster, "correspondence": km}


# ------------------------------------------------------------ experiments

METRICS = ("acc", "nmi", "ari")


def summarize(values: Sequence[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {
        "mean": float(arr.mean()),
        "std": float(arr.std()),
        "median": float(np.median(arr)),
    }


def _fan_out(fn, jobs, n_jobs: int = 1) -> list:
    """Map ``fn`` over independent runs, in input order."""
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def run_variant(ds_full: MultiViewDataset, cfg: TrainConfig, eta: float, seed: int, ablation=()) -> dict:
    """Simulate alignment, train, evaluate; returns metrics plus the loss log."""
    ds = apply_partial_alignment(ds_full, eta, seed) if eta < 1.0 else ds_full
    run_cfg = replace(cfg, seed=seed, ablation=tuple(ablation))
    result = train(ds, run_cfg)
    ev = evaluate(result.networks, ds, run_cfg)
    return {"eval": ev, "train": result, "dataset": ds, "config": run_cfg}


def run_ablation_suite(
    ds_full: MultiViewDataset,
    cfg: TrainConfig,
    variants: Sequence[str],
    seeds: Sequence[int],
    eta: float = 1.0,
    runs_csv=None,
    table_csv=None,
    n_jobs: int = 1,
) -> list[dict]:
    """Train every variant on every seed; one summary row per variant."""
    for name in variants:
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")

    def one(job):
        name, seed = job
        m = run_variant(ds_full, cfg, eta, seed, VARIANTS[name])["eval"].metrics()
        return {"variant": name, "seed": seed, **{k: m[k] for k in METRICS}, "graph_purity": m["graph_purity"]}

    runs = _fan_out(one, [(name, seed) for name in variants for seed in seeds], n_jobs)
    table = []
    for name in variants:
        rows = [r for r in runs if r["variant"] == name]
        entry = {"variant": name, "runs": len(rows)}
        for k in METRICS:
            s = summarize([r[k] for r in rows])
            entry.update({f"{k}_mean": s["mean"], f"{k}_std": s["std"], f"{k}_median": s["median"]})
        table.append(entry)
    if runs_csv:
        write_csv(runs_csv, runs)
    if table_csv:
        write_csv(table_csv, table)
    return table


def sweep_alignment(
    ds_full: MultiViewDataset,
    cfg: TrainConfig,
    etas: Sequence[float],
    seeds: Sequence[int],
    runs_csv=None,
    table_csv=None,
    n_jobs: int = 1,
) -> list[dict]:
    """Metric curve over alignment rates; rows are (eta, metric) pairs."""
    for eta in etas:
        if not 0.0 < eta <= 1.0:
            raise ConfigError(f"alignment rate must lie in (0, 1], got {eta}")

    def one(job):
        eta, seed = job
        m = run_variant(ds_full, cfg, eta, seed, cfg.ablation)["eval"].metrics()
        return {"eta": eta, "seed": seed, **{k: m[k] for k in METRICS}}

    runs = _fan_out(one, [(eta, seed) for eta in etas for seed in seeds], n_jobs)
    table = []
    for eta in etas:
        rows = [r for r in runs if r["eta"] == eta]
        for k in METRICS:
            s = summarize([r[k] for r in rows])
            table.append({"eta": eta, "metric": k, **s, "runs": len(rows)})
    if runs_csv:
        write_csv(runs_csv, runs)
    if table_csv:
        write_csv(table_csv, table)
    return table


def compare_matching_runs(
    ds_full: MultiViewDataset,
    cfg: TrainConfig,
    eta: float,
    seeds: Sequence[int],
    method: str = "nearest",
    nets: Networks | None = None,
    n_jobs: int = 1,
) -> tuple[list[dict], list[dict]]:
    """Per-seed metrics of both fusion paths plus a two-row summary table.

    Trains one model per seed unless ``nets`` is given.
    """

    def one(seed):
        ds = apply_partial_alignment(ds_full, eta, seed) if eta < 1.0 else ds_full
        run_cfg = replace(cfg, seed=seed)
        model = nets if nets is not None else train(ds, run_cfg).networks
        res = compare_matching(model, ds, run_cfg, method)
        return [{"path": path, "seed": seed, **{k: getattr(cr, k) for k in METRICS}} for path, cr in res.items()]

    runs = [r for rows in _fan_out(one, list(seeds), n_jobs) for r in rows]
    table = []
    for path in ("semantic_matching", "correspondence"):
        rows = [r for r in runs if r["path"] == path]
        entry = {"path": path, "runs": len(rows)}
        for k in METRICS:
            s = summarize([r[k] for r in rows])
            entry.update({f"{k}_mean": s["mean"], f"{k}_std": s["std"], f"{k}_median": s["median"]})
        table.append(entry)
    return runs, table


def write_csv(path, rows: Sequence[dict]) -> None:
    if not rows:
        open(path, "w").close()
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def write_loss_log(path, rows: Sequence[TrainLogRow]) -> None:
    write_csv(path, [asdict(r) for r in rows])
