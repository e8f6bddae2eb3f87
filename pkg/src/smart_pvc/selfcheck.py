"""Release-gate checks: analytic gradients, covariance invariants and metric oracles.

Every check reports the worst error it observed against its tolerance. The
oracles here are deliberately naive (central differences, literal loops,
itertools brute force) so they share no code path with what they check.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass

import numpy as np

from smart_pvc.cluster import acc, ari, hungarian, nmi
from smart_pvc.graph import build_graph
from smart_pvc.losses import loss_rec, loss_smc, loss_vda
from smart_pvc.nn import MlpNetwork, l2_normalize_rows, numerical_grad, rel_err
from smart_pvc.stats import adaptive_threshold, cross_cov, intra_cov, pearson

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_error: float
    tol: float
    cases: int
    detail: str = ""

    def as_dict(self) -> dict:
        return asdict(self)


def _result(name, errors, tol, detail=""):
    worst = float(max(errors, default=0.0))
    return CheckResult(name, bool(worst <= tol), worst, tol, len(errors), detail)


# ------------------------------------------------------------- gradients


def _fd_err(f, x, analytic, h=1e-5):
    fd = numerical_grad(f, x, h=h)
    return float(rel_err(analytic, fd).max())


def check_grad_rec(seeds, d=8, batch=16, fault=False):
    errs = []
    for s in seeds:
        rng = np.random.default_rng([s, 1])
        X = [rng.normal(size=(batch, 6)), rng.normal(size=(batch, 5))]
        enc = [MlpNetwork([x.shape[1], 12, d], seed=s * 10 + v, hidden_activation="tanh") for v, x in enumerate(X)]
        dec = [MlpNetwork([d, 12, x.shape[1]], seed=s * 10 + 5 + v, hidden_activation="tanh") for v, x in enumerate(X)]

        def loss_and_grads():
            Xh = [dn.forward(e.forward(x)) for x, e, dn in zip(X, enc, dec)]
            val, gX = loss_rec(X, Xh)
            grads = []
            for g, e, dn in zip(gX, enc, dec):
                gd, gz = dn.backward(g)
                ge, _ = e.backward(gz)
                grads.append((ge, gd))
            return val, grads

        _, grads = loss_and_grads()
        for v in range(len(X)):
            for net, g in ((enc[v], grads[v][0]), (dec[v], grads[v][1])):
                for p, gp in zip(net.params(), g):
                    gp = gp * (1.01 if fault else 1.0)
                    errs.append(_fd_err(lambda: loss_and_grads()[0], p, gp))
    return errs


def check_grad_vda(seeds, d=8, batch=16, use_cfa=True, use_cma=True, fault=False):
    errs = []
    for s in seeds:
        rng = np.random.default_rng([s, 2])
        Za = rng.normal(size=(batch, d))
        Zb = rng.normal(size=(batch, d)) + 0.5 * Za
        t = loss_vda(Za, Zb, use_cfa, use_cma)
        ga = t.grad_a * (1.01 if fault else 1.0)
        errs.append(_fd_err(lambda: loss_vda(Za, Zb, use_cfa, use_cma).value, Za, ga))
        errs.append(_fd_err(lambda: loss_vda(Za, Zb, use_cfa, use_cma).value, Zb, t.grad_b))
    return errs


def _random_graph(rng, n, aligned):
    W = np.where(rng.random((n, n)) < 0.2, rng.random((n, n)), 0.0)
    W[np.arange(n), np.arange(n)] = np.where(aligned, 1.0, W[np.arange(n), np.arange(n)])
    return W


def check_grad_smc(seeds, d=8, batch=16, tau=0.5, fault=False):
    """Gradient of the graph contrastive loss through a projector and row normalization."""
    errs = []
    for s in seeds:
        rng = np.random.default_rng([s, 3])
        Za = rng.normal(size=(batch, d))
        Zb = rng.normal(size=(batch, d))
        aligned = rng.random(batch) < 0.5
        W = _random_graph(rng, batch, aligned)
        proj = MlpNetwork([d, d, d], seed=s, hidden_activation="relu")
        # random biases: a zero-bias relu projector can emit exact zero rows, where
        # row normalization (and hence the loss) is discontinuous
        for b in proj.params()[1::2]:
            b[:] = rng.normal(scale=0.5, size=b.shape)

        def loss_and_grads():
            H = proj.forward(np.vstack([Za, Zb]))
            t = loss_smc(H[:batch], H[batch:], W, aligned, tau)
            grads, _ = proj.backward(np.vstack([t.grad_a, t.grad_b]))
            return t.value, grads

        _, grads = loss_and_grads()
        for p, g in zip(proj.params(), grads):
            g = g * (1.01 if fault else 1.0)
            errs.append(_fd_err(lambda: loss_and_grads()[0], p, g))
        t = loss_smc(Za, Zb, W, aligned, tau)
        errs.append(_fd_err(lambda: loss_smc(Za, Zb, W, aligned, tau).value, Za, t.grad_a))
        errs.append(_fd_err(lambda: loss_smc(Za, Zb, W, aligned, tau).value, Zb, t.grad_b))
    return errs


# ------------------------------------------------------------ covariance


def check_covariance(seeds, fault=False):
    self_err, range_err, inv_err, batch_err = [], [], [], []
    for s in seeds:
        rng = np.random.default_rng([s, 4])
        Za = rng.normal(size=(10, 6))
        Zb = rng.normal(size=(10, 6))
        C = cross_cov(Za, Zb).values
        self_err.append(float(np.abs(np.diagonal(intra_cov(Za).values) - 1.0).max()))
        range_err.append(float(max(0.0, np.abs(C).max() - 1.0)))
        a = rng.uniform(0.1, 10.0, size=(10, 1))
        b = rng.normal(size=(10, 1)) * 5
        C2 = cross_cov(a * Za + b, Zb).values
        inv_err.append(float(np.abs(C2 - C).max()))
        lit = np.array([[pearson(Za[i], Zb[k]) for k in range(10)] for i in range(10)])
        batch_err.append(float(np.abs(C - lit).max()) + (1e-6 if fault else 0.0))
    return [
        _result("cov/self_correlation", self_err, 1e-9),
        _result("cov/range", range_err, 1e-9),
        _result("cov/scale_shift_invariance", inv_err, 1e-9),
        _result("cov/batched_vs_pairwise", batch_err, 1e-12),
    ]


def check_threshold():
    errs = [abs(adaptive_threshold(np.array([0.6, 0.8, 1.0])) - 0.6)]
    errs.append(abs(adaptive_threshold(np.array([-0.5, -0.2, -0.1]))))
    errs.append(adaptive_threshold(np.array([0.3])) - 0.3)
    return _result("threshold/exact_and_clamped", [abs(e) for e in errs], 0.0)


def check_graph_rule(seeds):
    errs = []
    for s in seeds:
        rng = np.random.default_rng([s, 5])
        n = int(rng.integers(1, 25))
        C = rng.uniform(-1, 1, size=(n, n))
        aligned = rng.random(n) < rng.random()
        T = float(rng.choice([0.0, rng.random(), 1.0]))
        lit = np.zeros((n, n))
        for i in range(n):
            for k in range(n):
                if i == k and aligned[i]:
                    lit[i, k] = 1.0
                elif C[i, k] > T:
                    lit[i, k] = C[i, k]
        errs.append(float(np.abs(build_graph(C, aligned, T).toarray() - lit).max()))
    return _result("graph/three_case_rule", errs, 0.0)


def infonce(Ha, Hb, tau):
    """Plain InfoNCE with row-wise positives on the diagonal."""
    a = Ha / np.linalg.norm(Ha, axis=1, keepdims=True)
    b = Hb / np.linalg.norm(Hb, axis=1, keepdims=True)
    total = 0.0
    for i in range(a.shape[0]):
        sims = [float(a[i] @ b[k]) / tau for k in range(b.shape[0])]
        m = max(sims)
        total += -(sims[i] - m) + math.log(sum(math.exp(x - m) for x in sims))
    return total / a.shape[0]


def check_infonce(seeds):
    errs = []
    for s in seeds:
        rng = np.random.default_rng([s, 6])
        n, d = 16, 8
        Ha, Hb = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        tau = float(rng.uniform(0.2, 2.0))
        aligned = np.ones(n, dtype=bool)
        errs.append(abs(loss_smc(Ha, Hb, np.eye(n), aligned, tau).value - infonce(Ha, Hb, tau)))
    return _result("smc/infonce_reduction", errs, 1e-10)


# --------------------------------------------------------------- metrics


def brute_acc(pred, truth) -> float:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    pl = sorted(set(pred.tolist()))
    tl = sorted(set(truth.tolist()))
    m = max(len(pl), len(tl))
    best = 0
    for perm in itertools.permutations(range(m), len(pl)):
        mapping = {p: (tl[j] if j < len(tl) else None) for p, j in zip(pl, perm)}
        best = max(best, sum(mapping[p] == t for p, t in zip(pred.tolist(), truth.tolist())))
    return best / len(pred)


def brute_ari(pred, truth) -> float:
    """Pair-counting adjusted Rand index."""
    n = len(pred)
    pairs = list(itertools.combinations(range(n), 2))
    same_p = [pred[i] == pred[j] for i, j in pairs]
    same_t = [truth[i] == truth[j] for i, j in pairs]
    both = sum(a and b for a, b in zip(same_p, same_t))
    a, b, total = sum(same_p), sum(same_t), len(pairs)
    expected = a * b / total
    max_index = (a + b) / 2
    if max_index == expected:
        return 1.0
    return (both - expected) / (max_index - expected)


def brute_nmi(pred, truth) -> float:
    n = len(pred)
    P = {p: pred.count(p) / n for p in set(pred)}
    T = {t: truth.count(t) / n for t in set(truth)}
    J = {}
    for p, t in zip(pred, truth):
        J[p, t] = J.get((p, t), 0) + 1 / n
    hp = -sum(x * math.log(x) for x in P.values())
    ht = -sum(x * math.log(x) for x in T.values())
    if hp == 0 or ht == 0:
        return 1.0 if hp == ht else 0.0
    mi = sum(x * math.log(x / (P[p] * T[t])) for (p, t), x in J.items())
    return max(0.0, mi / ((hp + ht) / 2))


def check_metrics(seed=0, n_random=300, fault=False):
    rng = np.random.default_rng([seed, 7])
    acc_err, nmi_err, ari_err = [], [], []
    for _ in range(n_random):
        n = int(rng.integers(2, 9))
        k = int(rng.integers(1, 5))
        pred = rng.integers(0, k, size=n).tolist()
        truth = rng.integers(0, int(rng.integers(1, 5)), size=n).tolist()
        acc_err.append(abs(acc(pred, truth) + (1e-3 if fault else 0.0) - brute_acc(pred, truth)))
        nmi_err.append(abs(nmi(pred, truth) - brute_nmi(pred, truth)))
        ari_err.append(abs(ari(pred, truth) - brute_ari(pred, truth)))
    return [
        _result("metric/acc_vs_bruteforce", acc_err, 1e-12),
        _result("metric/nmi_vs_definition", nmi_err, 1e-12),
        _result("metric/ari_vs_pair_counting", ari_err, 1e-12),
    ]


def check_hungarian(seed=0, trials=100, size=6):
    rng = np.random.default_rng([seed, 8])
    errs = []
    for _ in range(trials):
        C = rng.normal(size=(size, size))
        col = hungarian(C)
        got = C[np.arange(size), col].sum()
        best = min(sum(C[i, p[i]] for i in range(size)) for p in itertools.permutations(range(size)))
        errs.append(abs(got - best) if sorted(col.tolist()) == list(range(size)) else math.inf)
    return _result("metric/hungarian_vs_exhaustive", errs, 1e-9)


# ------------------------------------------------------------------ main


def run_selfcheck(seed: int = 0, n_seeds: int = 5, fault: str | None = None) -> list[CheckResult]:
    """Run every check; ``fault`` ("grad" or "metric") corrupts one quantity on purpose."""
    seeds = [seed + i for i in range(n_seeds)]
    bad_grad = fault == "grad"
    report = [
        _result("grad/rec_through_autoencoder", check_grad_rec(seeds), GRAD_TOL),
        _result("grad/cfa", check_grad_vda(seeds, use_cma=False, fault=bad_grad), GRAD_TOL),
        _result("grad/cma", check_grad_vda(seeds, use_cfa=False), GRAD_TOL),
        _result("grad/vda", check_grad_vda(seeds), GRAD_TOL),
        _result("grad/smc_through_projector", check_grad_smc(seeds), GRAD_TOL),
    ]
    report += check_covariance(seeds)
    report.append(check_threshold())
    report.append(check_graph_rule(range(seed, seed + 50)))
    report.append(check_infonce(seeds))
    report += check_metrics(seed, fault=fault == "metric")
    report.append(check_hungarian(seed, trials=20))
    return report


__all__ = ["CheckResult", "run_selfcheck", "brute_acc", "brute_ari", "brute_nmi", "infonce"]
