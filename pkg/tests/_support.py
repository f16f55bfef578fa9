"""Shared model builders for the test suite."""

from __future__ import annotations

import numpy as np

from mflq.model import MfLqModel, stability_margins


def scalar_model(
    *, A=0.0, Ahat=0.0, B=1.0, C=0.0, Chat=0.0, D=0.0, Q=1.0, Qhat=0.0, R=1.0, r=1.0
) -> MfLqModel:
    """Single-regime model with n = k = 1."""
    vals = dict(A=A, Ahat=Ahat, B=B, C=C, Chat=Chat, D=D, Q=Q, Qhat=Qhat, R=R)
    fams = {name: np.array(v, dtype=float).reshape(1, 1, 1) for name, v in vals.items()}
    return MfLqModel(n=1, k=1, M=1, r=float(r), generator=np.zeros((1, 1)), **fams)


def random_generator(rng: np.random.Generator, M: int) -> np.ndarray:
    L = rng.uniform(0.3, 2.0, (M, M))
    np.fill_diagonal(L, 0.0)
    np.fill_diagonal(L, -L.sum(axis=1))
    return L


def random_model(seed: int, M: int | None = None, n: int | None = None, k: int | None = None,
                 margin: float = 1.0) -> MfLqModel:
    """Random instance satisfying (H1) with both margins >= ``margin`` and (H2)."""
    rng = np.random.default_rng(seed)
    M = int(rng.integers(1, 4)) if M is None else M
    n = int(rng.integers(1, 3)) if n is None else n
    k = int(rng.integers(1, 3)) if k is None else k
    A = rng.normal(0, 0.6, (M, n, n))
    Ahat = rng.normal(0, 0.4, (M, n, n))
    C = rng.normal(0, 0.4, (M, n, n))
    Chat = rng.normal(0, 0.3, (M, n, n))
    B = rng.normal(0, 1.0, (M, n, k))
    D = rng.normal(0, 0.4, (M, n, k))
    G = rng.normal(0, 1.0, (M, n, n))
    Gh = rng.normal(0, 0.7, (M, n, n))
    H = rng.normal(0, 0.5, (M, k, k))
    Q = G @ G.transpose(0, 2, 1) + 0.1 * np.eye(n)
    Qhat = Gh @ Gh.transpose(0, 2, 1)
    R = H @ H.transpose(0, 2, 1) + 0.5 * np.eye(k)
    m1, m2 = stability_margins(0.0, A, C, Ahat)
    r = float(max(margin - min(np.min(m1), np.min(m2)), margin))
    return MfLqModel(n=n, k=k, M=M, r=r, generator=random_generator(rng, M), A=A, Ahat=Ahat, B=B,
                     C=C, Chat=Chat, D=D, Q=Q, Qhat=Qhat, R=R)


def scalar_are1_root(a, b, c, d, q, R, r) -> float:
    """Nonnegative root of the scalar single-regime ARE-1."""
    kappa = r - 2 * a - c * c
    alpha = kappa * d * d + (b + d * c) ** 2
    beta = kappa * R - q * d * d
    if alpha == 0:
        return q * R / beta
    return (-beta + np.sqrt(beta * beta + 4 * alpha * q * R)) / (2 * alpha)


def scalar_are3_root(P, a, ah, b, c, ch, d, q, qh, R, r) -> float:
    """Positive root of the scalar single-regime ARE-3 given the ARE-1 solution P."""
    At, Ct = a + ah, c + ch
    Rt = R + d * d * P
    alpha = b * b / Rt
    beta = r - 2 * At + 2 * b * d * P * Ct / Rt
    c0 = Ct * Ct * P + q + qh - (d * P * Ct) ** 2 / Rt
    if alpha == 0:
        return c0 / beta
    return (-beta + np.sqrt(beta * beta + 4 * alpha * c0)) / (2 * alpha)
