import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mflq.lyapunov import LyapunovProblem, solve_coupled_lyapunov
from mflq.model import paper_example
from mflq.riccati import (
    RiccatiError,
    are1_residual,
    are3_residual,
    compute_gains,
    dump_solution,
    load_solution,
    solve_are1,
    solve_are3,
    solve_model,
    value_function,
)

from _support import random_model, scalar_are1_root, scalar_are3_root, scalar_model

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def test_golden_ratio_instance():
    m = scalar_model(A=0.0, B=1.0, C=0.0, D=0.0, Q=1.0, R=1.0, r=1.0)
    assert are1_residual(np.array([[[GOLDEN]]]), m)[0] <= 1e-12
    P, trace = solve_are1(m)
    assert P[0, 0, 0] == pytest.approx(0.6180339887, abs=1e-9)
    assert trace.converged


def test_zero_weights_give_zero_solution():
    m = paper_example()
    m0 = m.replace(Q=np.zeros_like(m.Q), Qhat=np.zeros_like(m.Qhat))
    assert np.all(are1_residual(np.zeros((4, 1, 1)), m0) == 0)
    sol = solve_model(m0)
    assert np.all(np.asarray(sol.P) == 0) and np.all(np.asarray(sol.Ptilde) == 0)
    assert sol.iterations1 == 1
    g = sol.gains
    assert np.all(g.Theta == 0) and np.all(g.ThetaHat == 0)
    np.testing.assert_array_equal(g.Rtilde, m.R)


SCALAR_GRID = [
    dict(a=a, b=b, c=c, d=d, q=q, R=R, r=r)
    for (a, b, c, d, q, R, r) in [
        (0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0),
        (0.5, 1.0, 0.5, 0.0, 1.0, 0.5, 3.0),
        (1.0, 1.0, 0.5, 0.4, 1.0, 0.5, 3.0),
        (1.0, 1.5, 0.5, 0.6, 0.5, 0.5, 3.0),
        (-1.0, 2.0, 0.5, 0.4, 1.0, 0.5, 3.0),
        (-1.0, 2.5, 0.5, 0.6, 0.5, 0.5, 3.0),
        (0.2, -0.7, 0.3, 1.1, 2.0, 0.1, 1.5),
        (-2.0, 0.0, 0.0, 0.0, 3.0, 1.0, 0.5),
        (0.3, 0.0, 0.4, 0.9, 1.0, 2.0, 2.0),
        (1.5, 3.0, 1.0, -0.5, 0.2, 0.3, 5.0),
    ]
]


@pytest.mark.parametrize("p", SCALAR_GRID)
def test_scalar_are1_matches_quadratic_formula(p):
    m = scalar_model(A=p["a"], B=p["b"], C=p["c"], D=p["d"], Q=p["q"], R=p["R"], r=p["r"])
    P, _ = solve_are1(m)
    assert P[0, 0, 0] == pytest.approx(scalar_are1_root(**p), abs=1e-9)


@pytest.mark.parametrize("p", SCALAR_GRID)
def test_scalar_are3_matches_quadratic_formula(p):
    ah, ch, qh = 0.3, -0.2, 0.7
    m = scalar_model(A=p["a"], Ahat=ah, B=p["b"], C=p["c"], Chat=ch, D=p["d"], Q=p["q"], Qhat=qh,
                     R=p["R"], r=p["r"] + 0.6)
    sol = solve_model(m)
    P = sol.P[0][0, 0]
    want = scalar_are3_root(P, p["a"], ah, p["b"], p["c"], ch, p["d"], p["q"], qh, p["R"], p["r"] + 0.6)
    assert sol.Ptilde[0][0, 0] == pytest.approx(want, abs=1e-9)


def test_benchmark_are1():
    P, trace = solve_are1(paper_example())
    np.testing.assert_allclose(P[:, 0, 0], [0.361, 0.259, 0.171, 0.117], atol=2e-3)
    assert np.max(trace.final_residuals) <= 1e-10
    assert np.all(are1_residual(np.array([0.361, 0.259, 0.171, 0.117]).reshape(4, 1, 1), paper_example()) <= 5e-3)


def test_benchmark_are3_exact_and_literal():
    m = paper_example()
    P, _ = solve_are1(m)
    Pt, trace = solve_are3(m, P)
    assert np.max(are3_residual(Pt, P, m)) <= 1e-10
    Pl, tl = solve_are3(m, P, variant="paper_literal")
    assert tl.converged and tl.warnings
    # the literal update converges, but not to a solution of the ARE-3 equation
    assert np.max(are3_residual(Pl, P, m)) > 1e-3
    with pytest.raises(ValueError):
        solve_are3(m, P, variant="other")


def test_are3_at_zero():
    m = random_model(4, M=2, n=2, k=1)
    P, _ = solve_are1(m)
    Ct = m.C + m.Chat
    Rt = m.R + m.D.transpose(0, 2, 1) @ P @ m.D
    Cbar = m.D.transpose(0, 2, 1) @ P @ Ct
    G = Ct.transpose(0, 2, 1) @ P @ Ct + m.Q + m.Qhat
    want = np.linalg.norm(G - Cbar.transpose(0, 2, 1) @ np.linalg.solve(Rt, Cbar), axis=(1, 2))
    np.testing.assert_allclose(are3_residual(np.zeros_like(P), P, m), want, rtol=1e-12)


def test_gain_hand_check():
    m = paper_example()
    P = np.array([0.361, 0.259, 0.171, 0.117]).reshape(4, 1, 1)
    g = compute_gains(P, P, m)
    assert g.Rtilde[0, 0, 0] == pytest.approx(0.55776, abs=1e-12)
    assert g.S[0, 0, 0] == pytest.approx(0.4332, abs=1e-12)
    assert g.Theta[0, 0, 0] == pytest.approx(-0.4332 / 0.55776, abs=1e-12)


def test_benchmark_gains():
    sol = solve_model(paper_example())
    np.testing.assert_allclose(sol.gains.Theta[:, 0, 0], [-0.776, -0.786, -0.714, -0.603], atol=2e-3)


def test_zero_gains_at_zero():
    m = paper_example()
    g = compute_gains(np.zeros((4, 1, 1)), np.zeros((4, 1, 1)), m)
    assert np.all(g.Theta == 0) and np.all(g.ThetaHat == 0)


def test_value_function():
    assert value_function(np.array([0.687]), 2.0, 0) == pytest.approx(1.374)
    assert value_function(np.array([0.687]), 0.0, 0) == 0.0
    assert value_function(np.eye(2)[None], [3.0, 4.0], 0) == pytest.approx(12.5)
    with pytest.raises(IndexError):
        value_function(np.array([0.687]), 1.0, 1)


def test_mean_field_free_collapse():
    m = random_model(21, M=2, n=2, k=2)
    z = np.zeros_like(m.A)
    m0 = m.replace(Ahat=z, Chat=z, Qhat=z)
    sol = solve_model(m0)
    np.testing.assert_allclose(np.asarray(sol.Ptilde), np.asarray(sol.P), atol=1e-9)
    np.testing.assert_allclose(are3_residual(sol.P, sol.P, m0), are1_residual(sol.P, m0), atol=1e-12)


def test_non_convergence_raises():
    with pytest.raises(RiccatiError, match="did not reach"):
        solve_are1(paper_example(), max_iter=2)


def test_indefinite_rtilde_detected():
    m = scalar_model(R=1.0, D=1.0)
    with pytest.raises(RiccatiError, match="not positive definite"):
        compute_gains(np.array([[[-2.0]]]), np.array([[[0.0]]]), m)


def test_solution_round_trip():
    m = paper_example()
    sol = solve_model(m)
    back = load_solution(dump_solution(sol), m)
    for name in ("Theta", "ThetaHat", "Rtilde"):
        np.testing.assert_array_equal(getattr(back.gains, name), getattr(sol.gains, name))
    np.testing.assert_array_equal(np.asarray(back.Ptilde), np.asarray(sol.Ptilde))


def _check_monotone(trace):
    for step in trace.steps:
        assert step.min_eig_decrement >= -1e-9
    for P in trace.iterates:
        assert np.min(np.linalg.eigvalsh(P)) >= -1e-9


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_random_instance_properties(seed):
    m = random_model(seed)
    sol = solve_model(m)
    _check_monotone(sol.trace1)
    _check_monotone(sol.trace3)
    P, Pt = np.asarray(sol.P), np.asarray(sol.Ptilde)
    assert np.max(sol.residual1) <= 1e-10 and np.max(sol.residual3) <= 1e-10

    g = sol.gains
    scale = 1 + np.max(np.abs(g.S)) + np.max(np.abs(g.Stilde))
    assert np.max(np.abs(g.Rtilde @ g.Theta + g.S)) <= 1e-9 * scale
    assert np.max(np.abs(g.Rtilde @ g.ThetaTilde + g.Stilde)) <= 1e-9 * scale

    # one more quasi-linearization step from the limit barely moves it
    Th = g.Theta
    nxt = solve_coupled_lyapunov(LyapunovProblem(
        m.A + m.B @ Th, m.C + m.D @ Th, m.Q + Th.transpose(0, 2, 1) @ m.R @ Th, m.generator, m.r))
    assert np.max(np.linalg.norm(nxt - P, axis=(1, 2))) <= 10 * 1e-10 * (1 + np.max(np.abs(P)))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), perm_seed=st.integers(0, 100))
def test_permutation_equivariance(seed, perm_seed):
    m = random_model(seed, M=3)
    perm = np.random.default_rng(perm_seed).permutation(3)
    a, b = solve_model(m), solve_model(m.permuted(perm))
    np.testing.assert_allclose(np.asarray(b.P), np.asarray(a.P)[perm], atol=1e-9)
    np.testing.assert_allclose(np.asarray(b.Ptilde), np.asarray(a.Ptilde)[perm], atol=1e-9)
    np.testing.assert_allclose(b.gains.Theta, a.gains.Theta[perm], atol=1e-9)
    np.testing.assert_allclose(b.gains.ThetaHat, a.gains.ThetaHat[perm], atol=1e-9)
