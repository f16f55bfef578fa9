"""Markov chain sampling and Euler-Maruyama simulation of the closed loop.

Every path owns an independent random stream seeded from ``(seed, path_id)``.
Within a stream the chain is drawn first, then the Brownian path on the
uniform grid, then Brownian-bridge values at the jump times. Batching and
threading therefore never change per-path results, and two runs with
different step sizes over the same seed share the chain and the Brownian
path (used for step-halving calibration).
"""

from __future__ import annotations

import bisect
import csv
import functools
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import _kernels
from .model import MfLqModel, ModelError

BLOWUP = 1e12
DEFAULT_BATCH = 1000


class SimulationError(RuntimeError):
    """Non-finite or exploding state encountered during integration."""


@dataclass(frozen=True)
class MarkovPath:
    jump_times: NDArray[np.float64]
    states: NDArray[np.int64]
    horizon: float

    def state_at(self, t: ArrayLike) -> NDArray[np.int64]:
        """Right-continuous regime value at time(s) ``t``."""
        return self.states[np.searchsorted(self.jump_times, t, side="right")]


@dataclass(frozen=True)
class SimConfig:
    T: float
    h: float
    seed: int = 0
    paths: int = 1

    def __post_init__(self) -> None:
        if not (self.T > 0 and self.h > 0):
            raise ValueError("horizon and step must be positive")
        if self.h > self.T:
            raise ValueError(f"step {self.h} exceeds horizon {self.T}")
        if self.paths < 1:
            raise ValueError("need at least one path")


@dataclass
class PathTrajectory:
    path_id: int
    t: NDArray[np.float64]
    regime: NDArray[np.int64]
    X: NDArray[np.float64]
    Xhat: NDArray[np.float64]
    u: NDArray[np.float64]
    dW: NDArray[np.float64]
    chain: MarkovPath


@dataclass
class TrajectorySet:
    """Recorded paths. Arrays are indexed by grid point; ``dW`` by step."""

    paths: list[PathTrajectory]
    config: SimConfig
    K: NDArray[np.float64]
    Khat: NDArray[np.float64]

    def __len__(self) -> int:
        return len(self.paths)

    def __iter__(self):
        return iter(self.paths)


def path_rng(seed: int, path_id: int) -> np.random.Generator:
    return np.random.default_rng([int(path_id), int(seed)])


def sample_markov_path(
    generator: ArrayLike, i0: int, T: float, rng: np.random.Generator
) -> MarkovPath:
    """Draw a chain path on [0, T] from exponential holding times.

    In state i the holding time is exponential with rate -lam_ii (infinite
    when that rate is 0); the next state is j with probability lam_ij / -lam_ii.
    """
    G = np.asarray(generator, dtype=np.float64)
    M = G.shape[0]
    if not 0 <= i0 < M:
        raise IndexError(f"regime {i0} out of range for {M} regimes")
    rates = [-G[i, i] for i in range(M)]
    cum = []
    for i in range(M):
        row = G[i].copy()
        row[i] = 0.0
        cum.append(np.cumsum(row).tolist())
    jumps: list[float] = []
    states = [int(i0)]
    t, i = 0.0, int(i0)
    while rates[i] > 0:
        t += rng.exponential(1.0 / rates[i])
        if t > T:
            break
        j = bisect.bisect_right(cum[i], rng.random() * cum[i][-1])
        jumps.append(t)
        states.append(j)
        i = j
    return MarkovPath(np.array(jumps), np.array(states, dtype=np.int64), float(T))


def occupation_fractions(paths: Iterable[MarkovPath], M: int | None = None) -> NDArray[np.float64]:
    """Time-weighted fraction of time spent in each regime over all paths."""
    paths = list(paths)
    if not paths:
        raise ValueError("occupation_fractions needs at least one path")
    if M is None:
        M = int(max(p.states.max() for p in paths)) + 1
    occ = np.zeros(M)
    for p in paths:
        edges = np.concatenate(([0.0], p.jump_times, [p.horizon]))
        np.add.at(occ, p.states, np.diff(edges))
    return occ / occ.sum()


@functools.lru_cache(maxsize=16)
def _uniform(T: float, h: float) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    steps = max(1, math.ceil(T / h - 1e-9))
    grid = np.minimum(np.arange(steps + 1) * h, T)
    grid[-1] = T
    grid.setflags(write=False)
    sd = np.sqrt(np.diff(grid))
    sd.setflags(write=False)
    return grid, sd


def uniform_grid(T: float, h: float) -> NDArray[np.float64]:
    return _uniform(float(T), float(h))[0].copy()


@dataclass(frozen=True)
class PathGrid:
    """Jump-refined grid for one path with the Brownian path sampled on it."""

    t: NDArray[np.float64]
    dW: NDArray[np.float64]
    regime: NDArray[np.int64]  # regime on each step (left endpoint value)
    chain: MarkovPath


def build_path_grid(
    generator: NDArray[np.float64],
    i0: int,
    T: float,
    h: float,
    seed: int,
    path_id: int,
    coarsen: int = 1,
) -> PathGrid:
    """Sample one path's chain and Brownian motion and refine the grid at jumps.

    With ``coarsen=c`` the step is ``c*h`` but the chain and Brownian path
    are exactly those of the ``h`` run with the same seed.
    """
    rng = path_rng(seed, path_id)
    chain = sample_markov_path(generator, i0, T, rng)
    base, sd = _uniform(float(T), float(h))
    wb = np.empty(base.size)
    wb[0] = 0.0
    np.cumsum(rng.standard_normal(sd.size) * sd, out=wb[1:])

    jt = chain.jump_times[chain.jump_times < T]
    if jt.size:
        pos = np.searchsorted(base, jt)
        jt = jt[base[pos] != jt]
    wj = np.empty(jt.size)
    if jt.size:
        z = rng.standard_normal(jt.size)
        k = np.searchsorted(base, jt, side="right") - 1
        prev_t, prev_w, prev_k = None, None, -1
        for m in range(jt.size):
            if k[m] == prev_k:
                tl, wl = prev_t, prev_w
            else:
                tl, wl = base[k[m]], wb[k[m]]
            tr, wr = base[k[m] + 1], wb[k[m] + 1]
            s = jt[m]
            frac = (s - tl) / (tr - tl)
            wj[m] = wl + frac * (wr - wl) + math.sqrt((s - tl) * (tr - s) / (tr - tl)) * z[m]
            prev_t, prev_w, prev_k = s, wj[m], k[m]

    if coarsen > 1:
        idx = np.arange(0, base.size, coarsen)
        if idx[-1] != base.size - 1:
            idx = np.append(idx, base.size - 1)
        base, wb = base[idx], wb[idx]

    if jt.size:
        pos = np.searchsorted(base, jt)
        t = np.insert(base, pos, jt)
        w = np.insert(wb, pos, wj)
    else:
        t, w = base.copy(), wb
    regime = chain.state_at(t[:-1])
    return PathGrid(t, np.diff(w), regime, chain)


@dataclass
class BatchResult:
    path_ids: NDArray[np.int64]
    cost: NDArray[np.float64] | None = None
    terminal_rate: NDArray[np.float64] | None = None
    checkpoints: NDArray[np.float64] | None = None  # (paths, n_checkpoints) discounted |X|^2
    records: list[PathTrajectory] = field(default_factory=list)


@dataclass(frozen=True)
class LinearFeedbackSystem:
    """Per-regime closed-loop coefficients for u = K X + Khat Xhat."""

    r: float
    generator: NDArray[np.float64]
    F: NDArray[np.float64]      # A + B K
    Fhat: NDArray[np.float64]   # Ahat + B Khat
    G: NDArray[np.float64]      # C + D K
    Ghat: NDArray[np.float64]   # Chat + D Khat
    K: NDArray[np.float64]
    Khat: NDArray[np.float64]
    Q: NDArray[np.float64]
    Qhat: NDArray[np.float64]
    R: NDArray[np.float64]

    @classmethod
    def from_model(cls, model: MfLqModel, K: ArrayLike, Khat: ArrayLike) -> "LinearFeedbackSystem":
        K = np.asarray(K, dtype=np.float64)
        Khat = np.asarray(Khat, dtype=np.float64)
        want = (model.M, model.k, model.n)
        if K.shape != want or Khat.shape != want:
            raise ModelError(f"feedback gains must have shape {want}, got {K.shape} and {Khat.shape}")
        return cls(
            r=model.r,
            generator=model.generator,
            F=model.A + model.B @ K,
            Fhat=model.Ahat + model.B @ Khat,
            G=model.C + model.D @ K,
            Ghat=model.Chat + model.D @ Khat,
            K=K,
            Khat=Khat,
            Q=model.Q,
            Qhat=model.Qhat,
            R=model.R,
        )


def flatten_grids(grids: Sequence[PathGrid]):
    """Concatenate per-path grids; returns (t, dW, regime, grid offsets, step offsets)."""
    tofs = np.zeros(len(grids) + 1, dtype=np.int64)
    tofs[1:] = np.cumsum([g.t.size for g in grids])
    sofs = tofs - np.arange(len(grids) + 1)
    t = np.concatenate([g.t for g in grids])
    dW = np.concatenate([g.dW for g in grids])
    reg = np.concatenate([g.regime for g in grids])
    return t, dW, reg, tofs, sofs


def _checkpoint_index(t: NDArray[np.float64], checkpoints: Sequence[float], T: float) -> NDArray[np.int64]:
    # index of the last grid point at or before each checkpoint
    eps = 1e-12 * max(1.0, T)
    return np.array([np.searchsorted(t, c + eps, side="right") - 1 for c in checkpoints], dtype=np.int64)


def integrate_batch(
    system: LinearFeedbackSystem,
    x0: NDArray[np.float64],
    i0: int,
    T: float,
    h: float,
    seed: int,
    path_ids: Sequence[int],
    *,
    coarsen: int = 1,
    checkpoints: Sequence[float] = (),
    record: bool = False,
) -> BatchResult:
    """Integrate a batch of paths of the linear closed loop."""
    grids = [build_path_grid(system.generator, i0, T, h, seed, pid, coarsen) for pid in path_ids]
    t, dW, reg, tofs, sofs = flatten_grids(grids)
    p, n = len(grids), x0.shape[0]
    reg_T = np.array([g.chain.state_at(T) for g in grids], dtype=np.int64)
    if checkpoints:
        ck_idx = np.stack([_checkpoint_index(g.t, checkpoints, T) for g in grids])
    else:
        ck_idx = np.zeros((p, 0), dtype=np.int64)
    cost = np.zeros(p)
    rate_T = np.zeros(p)
    ck_vals = np.zeros((p, ck_idx.shape[1]))
    status = np.full(p, -1, dtype=np.int64)
    hist_X = np.zeros((t.size if record else 0, n))
    hist_Xh = np.zeros_like(hist_X)
    _kernels.closed_loop(
        t, dW, reg, tofs, sofs, reg_T, np.ascontiguousarray(x0, dtype=np.float64), float(system.r),
        system.F, system.Fhat, system.G, system.Ghat, system.K, system.Khat,
        system.Q, system.Qhat, system.R,
        ck_idx, BLOWUP, record,
        cost, rate_T, ck_vals, status, hist_X, hist_Xh,
    )
    failed = np.flatnonzero(status >= 0)
    if failed.size:
        a = int(failed[0])
        raise SimulationError(
            f"state blow-up (|X| > {BLOWUP:g} or non-finite) on path {path_ids[a]} "
            f"at t={t[tofs[a] + status[a]]:.6g}"
        )

    res = BatchResult(
        np.asarray(path_ids, dtype=np.int64),
        cost=cost,
        terminal_rate=rate_T,
        checkpoints=ck_vals if checkpoints else None,
    )
    if record:
        for a, gr in enumerate(grids):
            sl = slice(tofs[a], tofs[a + 1])
            Xa, Xha = hist_X[sl], hist_Xh[sl]
            ra = np.append(gr.regime, reg_T[a])
            ua = np.einsum("tkn,tn->tk", system.K[ra], Xa) + np.einsum("tkn,tn->tk", system.Khat[ra], Xha)
            res.records.append(PathTrajectory(int(path_ids[a]), gr.t, ra, Xa, Xha, ua, gr.dW, gr.chain))
    return res


def run_paths(
    work: Callable[[Sequence[int]], BatchResult],
    paths: int,
    batch_size: int = DEFAULT_BATCH,
    threads: int = 1,
) -> list[BatchResult]:
    """Split ``range(paths)`` into batches and run them, returning results in path order."""
    batches = [list(range(a, min(a + batch_size, paths))) for a in range(0, paths, batch_size)]
    if threads <= 1 or len(batches) == 1:
        return [work(b) for b in batches]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(work, batches))


def _check_x0(x0: ArrayLike, n: int) -> NDArray[np.float64]:
    x = np.atleast_1d(np.asarray(x0, dtype=np.float64))
    if x.shape != (n,):
        raise ModelError(f"x0 must have length {n}, got shape {x.shape}")
    return x


def simulate_feedback(
    model: MfLqModel,
    K: ArrayLike,
    Khat: ArrayLike,
    x0: ArrayLike,
    i0: int,
    config: SimConfig,
    *,
    threads: int = 1,
    batch_size: int = DEFAULT_BATCH,
) -> TrajectorySet:
    """Simulate u = K(alpha) X + Khat(alpha) Xhat and record every path."""
    if not 0 <= i0 < model.M:
        raise IndexError(f"regime {i0} out of range for {model.M} regimes")
    system = LinearFeedbackSystem.from_model(model, K, Khat)
    x = _check_x0(x0, model.n)

    def work(ids):
        return integrate_batch(
            system, x, i0, config.T, config.h, config.seed, ids, record=True
        )

    results = run_paths(work, config.paths, batch_size, threads)
    recs = [rec for b in results for rec in b.records]
    return TrajectorySet(recs, config, system.K, system.Khat)


def simulate_closed_loop(model: MfLqModel, gains, x0: ArrayLike, i0: int, config: SimConfig, **kw) -> TrajectorySet:
    """Simulate the optimal closed loop u = Theta X + ThetaHat Xhat."""
    return simulate_feedback(model, gains.Theta, gains.ThetaHat, x0, i0, config, **kw)


def trajectories_to_csv(traj: TrajectorySet) -> str:
    """Render trajectories as CSV: path_id, t, regime (1-based), X_*, Xhat_*, u_*."""
    if not traj.paths:
        return ""
    n = traj.paths[0].X.shape[1]
    k = traj.paths[0].u.shape[1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(
        ["path_id", "t", "regime"]
        + [f"X_{j + 1}" for j in range(n)]
        + [f"Xhat_{j + 1}" for j in range(n)]
        + [f"u_{j + 1}" for j in range(k)]
    )
    fmt = "{:.15g}".format
    for p in traj.paths:
        for s in range(p.t.size):
            w.writerow(
                [p.path_id, fmt(p.t[s]), int(p.regime[s]) + 1]
                + [fmt(v) for v in p.X[s]]
                + [fmt(v) for v in p.Xhat[s]]
                + [fmt(v) for v in p.u[s]]
            )
    return buf.getvalue()
