"""Coupled algebraic Lyapunov equations across Markov regimes.

For every regime i the unknown P(i) solves

    P A + A'P + C'P C + Q + sum_j lam_ij P(j) - r P = 0,

which is linear in the stacked unknowns. ``solve_coupled_lyapunov`` assembles
the (M n^2) x (M n^2) operator and solves it densely; ``feynman_kac_estimate``
is an independent Monte Carlo check through the representation
P(i) = E[ int_0^inf e^{-rt} Phi' Q(alpha) Phi dt | alpha(0) = i ].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .model import ModelError, check_generator, stability_margins
from . import _kernels
from .simulate import DEFAULT_BATCH, build_path_grid, flatten_grids, run_paths

COND_LIMIT = 1e14
RESIDUAL_RTOL = 1e-10


class LyapunovError(RuntimeError):
    """The coupled Lyapunov operator is singular/ill-conditioned or the solve is inaccurate."""


@dataclass(frozen=True)
class LyapunovProblem:
    A: NDArray[np.float64]
    C: NDArray[np.float64]
    Q: NDArray[np.float64]
    generator: NDArray[np.float64]
    r: float

    def __post_init__(self) -> None:
        for name in ("A", "C", "Q", "generator"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        M, n = self.A.shape[0], self.A.shape[1]
        for name in ("A", "C", "Q"):
            if getattr(self, name).shape != (M, n, n):
                raise ModelError(f"{name} has shape {getattr(self, name).shape}, expected {(M, n, n)}")
        if self.generator.shape != (M, M):
            raise ModelError(f"generator has shape {self.generator.shape}, expected {(M, M)}")
        check_generator(self.generator)
        if np.max(np.abs(self.Q - self.Q.transpose(0, 2, 1))) > 1e-10:
            raise ModelError("Q family is not symmetric")
        if not self.r > 0:
            raise ModelError("discount rate must be positive")

    @property
    def M(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.A.shape[1]


def lyapunov_operator(problem: LyapunovProblem) -> NDArray[np.float64]:
    """Matrix of P -> {P A + A'P + C'P C + sum_j lam_ij P(j) - r P} on row-major vec(P)."""
    M, n = problem.M, problem.n
    nn = n * n
    eye = np.eye(n)
    L = np.kron(problem.generator, np.eye(nn))
    for i in range(M):
        A, C = problem.A[i], problem.C[i]
        # row-major vec: vec(X Y Z) = (X kron Z') vec(Y)
        block = np.kron(eye, A.T) + np.kron(A.T, eye) + np.kron(C.T, C.T) - problem.r * np.eye(nn)
        L[i * nn:(i + 1) * nn, i * nn:(i + 1) * nn] += block
    return L


def lyapunov_defect(P: ArrayLike, problem: LyapunovProblem) -> NDArray[np.float64]:
    P = np.asarray(P, dtype=np.float64)
    A, C = problem.A, problem.C
    At, Ct = A.transpose(0, 2, 1), C.transpose(0, 2, 1)
    coupling = np.einsum("ij,jab->iab", problem.generator, P)
    return P @ A + At @ P + Ct @ P @ C + problem.Q + coupling - problem.r * P


def lyapunov_residual(P: ArrayLike, problem: LyapunovProblem) -> NDArray[np.float64]:
    """Frobenius norm of the Lyapunov defect in each regime."""
    P = np.asarray(P, dtype=np.float64)
    if P.shape != problem.A.shape:
        raise ModelError(f"P has shape {P.shape}, expected {problem.A.shape}")
    return np.linalg.norm(lyapunov_defect(P, problem), axis=(1, 2))


def solve_coupled_lyapunov(problem: LyapunovProblem) -> NDArray[np.float64]:
    """Solve the coupled Lyapunov system by one dense linear solve.

    Returns an (M, n, n) array of symmetric matrices.

    Raises
    ------
    LyapunovError
        If the operator's condition number exceeds 1e14 or the solution
        fails the residual check ``<= 1e-10 (1 + ||Q(i)||)``.
    """
    M, n = problem.M, problem.n
    L = lyapunov_operator(problem)
    cond = np.linalg.cond(L)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise LyapunovError(
            f"coupled Lyapunov operator is singular or ill-conditioned (condition number {cond:.3e} > {COND_LIMIT:.0e})"
        )
    x = np.linalg.solve(L, -problem.Q.reshape(-1))
    P = x.reshape(M, n, n)
    P = 0.5 * (P + P.transpose(0, 2, 1))
    res = lyapunov_residual(P, problem)
    bound = RESIDUAL_RTOL * (1.0 + np.linalg.norm(problem.Q, axis=(1, 2)))
    if np.any(res > bound):
        report = ", ".join(f"regime {i + 1}: {res[i]:.3e} (bound {bound[i]:.3e})" for i in range(M))
        raise LyapunovError(f"Lyapunov residual check failed: {report}")
    return P


def default_fk_horizon(problem: LyapunovProblem, rel: float = 0.01) -> float:
    """Horizon T with exp(-m T) <= rel, m the smallest discount margin of (A, C, r)."""
    m1, _ = stability_margins(problem.r, problem.A, problem.C)
    m = float(np.min(m1))
    if m <= 0:
        raise ModelError("discount margin is not positive; the representation is not integrable")
    return math.log(1.0 / rel) / m


def _fk_batch(problem: LyapunovProblem, i: int, T: float, h: float, seed: int, ids) -> NDArray[np.float64]:
    grids = [build_path_grid(problem.generator, i, T, h, seed, pid) for pid in ids]
    t, dW, reg, tofs, sofs = flatten_grids(grids)
    out = np.zeros((len(grids), problem.n, problem.n))
    _kernels.matrix_flow(t, dW, reg, tofs, sofs, float(problem.r), problem.A, problem.C, problem.Q, out)
    return out


def feynman_kac_estimate(
    problem: LyapunovProblem,
    i: int,
    paths: int,
    horizon: float | None = None,
    step: float = 1e-3,
    seed: int = 0,
    *,
    threads: int = 1,
    batch_size: int = DEFAULT_BATCH,
) -> tuple[NDArray[np.float64], float]:
    """Monte Carlo estimate of P(i) from the matrix flow dPhi = A Phi dt + C Phi dW.

    Returns the symmetric estimate and its standard error (largest entry of
    the per-entry sample standard deviation over sqrt(paths)).
    """
    if not 0 <= i < problem.M:
        raise IndexError(f"regime {i} out of range for {problem.M} regimes")
    if horizon is None:
        horizon = default_fk_horizon(problem)
    if not (step > 0 and horizon > 0 and step <= horizon):
        raise ValueError(f"invalid step/horizon: step={step}, horizon={horizon}")
    if paths < 1:
        raise ValueError("paths must be positive")

    def work(ids):
        return _fk_batch(problem, i, horizon, step, seed, ids)

    samples = np.concatenate(run_paths(work, paths, batch_size, threads))
    samples = 0.5 * (samples + samples.transpose(0, 2, 1))
    est = samples.mean(axis=0)
    if paths > 1:
        se = float(np.max(samples.std(axis=0, ddof=1)) / math.sqrt(paths))
    else:
        se = 0.0
    return est, se
