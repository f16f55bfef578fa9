"""Compiled per-path integration loops.

Paths are stored back to back in flat arrays; path ``a`` owns grid points
``tofs[a]:tofs[a + 1]`` and steps ``sofs[a]:sofs[a + 1]`` (one fewer).
Each path is integrated independently, so results never depend on how
paths are grouped.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _matvec_add(out, M, g, x, scale):
    # out += scale * M[g] @ x
    for a in range(M.shape[1]):
        s = 0.0
        for b in range(M.shape[2]):
            s += M[g, a, b] * x[b]
        out[a] += scale * s


@njit(cache=True, inline="always")
def _quadform(W, g, x):
    s = 0.0
    for a in range(W.shape[1]):
        row = 0.0
        for b in range(W.shape[2]):
            row += W[g, a, b] * x[b]
        s += x[a] * row
    return s


@njit(cache=True, inline="always")
def _gain(out, K, Kh, g, x, xh):
    for a in range(K.shape[1]):
        s = 0.0
        for b in range(K.shape[2]):
            s += K[g, a, b] * x[b] + Kh[g, a, b] * xh[b]
        out[a] = s


@njit(cache=True)
def closed_loop(
    t, dW, reg, tofs, sofs, reg_T, x0, r,
    F, Fh, G, Gh, K, Kh, Q, Qh, R,
    ck_idx, blowup, record,
    cost, rate_T, ck_vals, status, hist_X, hist_Xh,
):
    """Euler-Maruyama for X and the deterministic recursion for Xhat, per path.

    ``status[a]`` is -1 on success, else the grid index where the state
    first exceeded ``blowup`` or became non-finite.
    """
    p = tofs.shape[0] - 1
    n = x0.shape[0]
    k = K.shape[1]
    X = np.empty(n)
    Xh = np.empty(n)
    Xn = np.empty(n)
    Xhn = np.empty(n)
    dif = np.empty(n)
    u = np.empty(k)
    nck = ck_idx.shape[1]
    for a in range(p):
        t0 = tofs[a]
        s0 = sofs[a]
        L = sofs[a + 1] - s0
        for j in range(n):
            X[j] = x0[j]
            Xh[j] = x0[j]
        if record:
            for j in range(n):
                hist_X[t0, j] = X[j]
                hist_Xh[t0, j] = Xh[j]
        for c in range(nck):
            if ck_idx[a, c] == 0:
                sq = 0.0
                for j in range(n):
                    sq += X[j] * X[j]
                ck_vals[a, c] = sq * math.exp(-r * t[t0])
        acc = 0.0
        status[a] = -1
        for s in range(L):
            g = reg[s0 + s]
            tl = t[t0 + s]
            dt = t[t0 + s + 1] - tl
            w = dW[s0 + s]
            _gain(u, K, Kh, g, X, Xh)
            run = _quadform(Q, g, X) + _quadform(Qh, g, Xh) + _quadform(R, g, u)
            acc += 0.5 * math.exp(-r * tl) * run * dt
            for j in range(n):
                Xn[j] = X[j]
                Xhn[j] = Xh[j]
                dif[j] = 0.0
            _matvec_add(Xn, F, g, X, dt)
            _matvec_add(Xn, Fh, g, Xh, dt)
            _matvec_add(dif, G, g, X, 1.0)
            _matvec_add(dif, Gh, g, Xh, 1.0)
            _matvec_add(Xhn, F, g, Xh, dt)
            _matvec_add(Xhn, Fh, g, Xh, dt)
            bad = False
            for j in range(n):
                X[j] = Xn[j] + dif[j] * w
                Xh[j] = Xhn[j]
                if not (abs(X[j]) <= blowup):
                    bad = True
            if bad:
                status[a] = s + 1
                break
            if record:
                for j in range(n):
                    hist_X[t0 + s + 1, j] = X[j]
                    hist_Xh[t0 + s + 1, j] = Xh[j]
            for c in range(nck):
                if ck_idx[a, c] == s + 1:
                    sq = 0.0
                    for j in range(n):
                        sq += X[j] * X[j]
                    ck_vals[a, c] = sq * math.exp(-r * t[t0 + s + 1])
        if status[a] >= 0:
            return
        cost[a] = acc
        g = reg_T[a]
        _gain(u, K, Kh, g, X, Xh)
        run = _quadform(Q, g, X) + _quadform(Qh, g, Xh) + _quadform(R, g, u)
        rate_T[a] = 0.5 * math.exp(-r * t[t0 + L]) * run


@njit(cache=True)
def matrix_flow(t, dW, reg, tofs, sofs, r, A, C, Q, out):
    """Left-endpoint quadrature of e^{-rt} Phi' Q(alpha) Phi for dPhi = A Phi dt + C Phi dW, Phi(0) = I."""
    p = tofs.shape[0] - 1
    n = A.shape[1]
    Phi = np.empty((n, n))
    Phin = np.empty((n, n))
    QPhi = np.empty((n, n))
    for a in range(p):
        t0 = tofs[a]
        s0 = sofs[a]
        L = sofs[a + 1] - s0
        for i in range(n):
            for j in range(n):
                Phi[i, j] = 1.0 if i == j else 0.0
                out[a, i, j] = 0.0
        for s in range(L):
            g = reg[s0 + s]
            tl = t[t0 + s]
            dt = t[t0 + s + 1] - tl
            w = dW[s0 + s]
            wt = math.exp(-r * tl) * dt
            for i in range(n):
                for j in range(n):
                    acc = 0.0
                    for b in range(n):
                        acc += Q[g, i, b] * Phi[b, j]
                    QPhi[i, j] = acc
            for i in range(n):
                for j in range(n):
                    acc = 0.0
                    for b in range(n):
                        acc += Phi[b, i] * QPhi[b, j]
                    out[a, i, j] += wt * acc
            for i in range(n):
                for j in range(n):
                    da = 0.0
                    dc = 0.0
                    for b in range(n):
                        da += A[g, i, b] * Phi[b, j]
                        dc += C[g, i, b] * Phi[b, j]
                    Phin[i, j] = Phi[i, j] + da * dt + dc * w
            for i in range(n):
                for j in range(n):
                    Phi[i, j] = Phin[i, j]
