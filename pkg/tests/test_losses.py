import math

import numpy as np
import pytest

from smart_pvc.graph import build_graph
from smart_pvc.losses import (
    cosine_matrix,
    loss_cfa,
    loss_cma,
    loss_rec,
    loss_smc,
    loss_total,
    loss_vda,
)
from smart_pvc.nn import numerical_grad
from smart_pvc.stats import cross_cov, intra_cov


def test_rec_is_sum_of_squares():
    X = [np.zeros((2, 2)), np.ones((2, 1))]
    val, grads = loss_rec(X, [np.ones((2, 2)), np.ones((2, 1))])
    assert val == 4.0
    np.testing.assert_array_equal(grads[0], 2 * np.ones((2, 2)))
    np.testing.assert_array_equal(grads[1], 0)


def test_rec_shape_mismatch():
    with pytest.raises(ValueError):
        loss_rec([np.zeros((2, 2))], [np.zeros((2, 3))])


def test_cfa_zero_on_perfect_alignment(rng):
    Z = rng.normal(size=(6, 5))
    assert loss_cfa(cross_cov(Z, 2 * Z + 1))[0] == pytest.approx(0, abs=1e-24)


def test_cfa_mean_over_diagonal():
    C = np.array([[0.5, 0.9], [0.9, 1.0]])
    assert loss_cfa(C)[0] == pytest.approx(0.125)


def test_cma_frobenius_mean():
    A, B = np.eye(2), np.array([[1.0, 0.5], [0.5, 1.0]])
    val, (ga, gb) = loss_cma(A, B)
    assert val == pytest.approx(0.25)
    np.testing.assert_allclose(ga, -gb)


def test_vda_matches_matrix_losses(rng):
    Za, Zb = rng.normal(size=(2, 7, 5))
    t = loss_vda(Za, Zb)
    cfa = loss_cfa(cross_cov(Za, Zb))[0]
    cma = loss_cma(intra_cov(Za), intra_cov(Zb))[0]
    assert t.cfa == pytest.approx(cfa, abs=1e-14)
    assert t.cma == pytest.approx(cma, abs=1e-14)
    assert t.value == pytest.approx(cfa + cma, abs=1e-14)


@pytest.mark.parametrize("flags", [(True, False), (False, True), (True, True)])
def test_vda_gradients(rng, flags):
    Za = rng.normal(size=(9, 6))
    Zb = 0.4 * Za + rng.normal(size=(9, 6))
    t = loss_vda(Za, Zb, *flags)
    for Z, g in ((Za, t.grad_a), (Zb, t.grad_b)):
        fd = numerical_grad(lambda: loss_vda(Za, Zb, *flags).value, Z)
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-9)


def test_vda_needs_two_rows(rng):
    with pytest.raises(ValueError):
        loss_vda(rng.normal(size=(1, 4)), rng.normal(size=(1, 4)))


def test_smc_reduces_to_infonce(rng):
    Ha, Hb = rng.normal(size=(2, 6, 4))
    S = cosine_matrix(Ha, Hb)
    expected = np.mean([math.log(np.exp(S[i]).sum()) - S[i, i] for i in range(6)])
    assert loss_smc(Ha, Hb, np.zeros((6, 6)), np.ones(6, bool), 1.0).value == pytest.approx(expected, abs=1e-12)


def test_smc_worked_example():
    # two rows; row 0 aligned with a half-weight neighbor, row 1 unaligned with no edges
    Ha = np.array([[1.0, 0.0], [0.0, 1.0]])
    Hb = np.array([[1.0, 0.0], [0.0, 1.0]])
    W = np.array([[0.0, 0.5], [0.0, 0.0]])
    t = loss_smc(Ha, Hb, W, np.array([True, False]), 1.0)
    assert t.value == pytest.approx(-math.log((math.e + 0.5) / (math.e + 1)), abs=1e-12)
    assert t.skipped == 1


def test_smc_all_rows_skipped(rng):
    Ha, Hb = rng.normal(size=(2, 3, 2))
    t = loss_smc(Ha, Hb, np.zeros((3, 3)), np.zeros(3, bool), 1.0)
    assert t.value == 0.0 and t.skipped == 3
    assert np.all(t.grad_a == 0)


def test_smc_accepts_graph_and_gradients(rng):
    n = 8
    Ha, Hb = rng.normal(size=(2, n, 5))
    aligned = rng.random(n) < 0.5
    g = build_graph(rng.uniform(-1, 1, (n, n)), aligned, 0.3)
    t = loss_smc(Ha, Hb, g, aligned, 0.5)
    np.testing.assert_allclose(t.grad_a, numerical_grad(lambda: loss_smc(Ha, Hb, g, aligned, 0.5).value, Ha), rtol=1e-5, atol=1e-9)
    np.testing.assert_allclose(t.grad_b, numerical_grad(lambda: loss_smc(Ha, Hb, g, aligned, 0.5).value, Hb), rtol=1e-5, atol=1e-9)


def test_smc_rejects_bad_tau(rng):
    with pytest.raises(ValueError):
        loss_smc(np.ones((2, 2)), np.ones((2, 2)), np.eye(2), np.ones(2, bool), 0.0)


def test_total_weights():
    b = loss_total(rec=2.0, cfa=0.5, cma=0.25, smc=3.0, lambda1=10, lambda2=1, tau=1.0)
    assert b.total == pytest.approx(2.0 + 10 * 0.75 + 3.0)
    assert b.as_dict()["vda"] == pytest.approx(0.75)
