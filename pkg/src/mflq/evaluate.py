"""Monte Carlo verification of optimality: cost estimates, decay, stationarity."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .model import MfLqModel, ModelError, stability_margins
from .riccati import AreSolution
from .simulate import (
    DEFAULT_BATCH,
    LinearFeedbackSystem,
    SimConfig,
    TrajectorySet,
    _check_x0,
    integrate_batch,
    run_paths,
)


@dataclass
class CostEstimate:
    mean: float
    standard_error: float
    paths: int
    T: float
    h: float
    tail_bound: float
    per_path: NDArray[np.float64] = field(repr=False, default_factory=lambda: np.zeros(0))


def _se(samples: NDArray[np.float64]) -> float:
    if samples.size < 2:
        return 0.0
    return float(np.std(samples, ddof=1) / math.sqrt(samples.size))


def closed_loop_margin(system: LinearFeedbackSystem) -> float:
    """Smallest discount margin of the closed-loop coefficients (both margin types)."""
    m1, m2 = stability_margins(system.r, system.F, system.G, system.Fhat)
    return float(min(np.min(m1), np.min(m2)))


def _ensemble(model, K, Khat, x0, i0, config, *, coarsen=1, checkpoints=(), threads=1, batch_size=DEFAULT_BATCH):
    if not 0 <= i0 < model.M:
        raise IndexError(f"regime {i0} out of range for {model.M} regimes")
    system = LinearFeedbackSystem.from_model(model, K, Khat)
    x = _check_x0(x0, model.n)

    def work(ids):
        return integrate_batch(
            system, x, i0, config.T, config.h, config.seed, ids,
            coarsen=coarsen, checkpoints=tuple(checkpoints),
        )

    results = run_paths(work, config.paths, batch_size, threads)
    cost = np.concatenate([b.cost for b in results])
    rate = np.concatenate([b.terminal_rate for b in results])
    ck = np.concatenate([b.checkpoints for b in results]) if checkpoints else None
    return system, cost, rate, ck


def _cost_estimate(system, cost, rate, config, h) -> CostEstimate:
    rate_sup = float(np.mean(rate) + 3 * _se(rate))
    m = closed_loop_margin(system)
    tail = rate_sup / m if m > 0 else math.inf
    return CostEstimate(float(np.mean(cost)), _se(cost), config.paths, config.T, h, tail, cost)


def estimate_cost(
    model: MfLqModel,
    K: ArrayLike,
    Khat: ArrayLike,
    x0: ArrayLike,
    i0: int,
    config: SimConfig,
    *,
    coarsen: int = 1,
    threads: int = 1,
    batch_size: int = DEFAULT_BATCH,
) -> CostEstimate:
    """Monte Carlo estimate of the discounted cost of u = K X + Khat Xhat on [0, T].

    The tail beyond T is bounded by (discounted running-cost rate at T) / m,
    where m is the closed-loop discount margin; it is infinite if m <= 0.
    """
    system, cost, rate, _ = _ensemble(
        model, K, Khat, x0, i0, config, coarsen=coarsen, threads=threads, batch_size=batch_size
    )
    return _cost_estimate(system, cost, rate, config, config.h * coarsen)


@dataclass(frozen=True)
class Comparison:
    z: float
    passed: bool
    budget: float


def compare_value(estimate: CostEstimate, analytic: float, bias_budget: float = 0.0) -> Comparison:
    """Pass iff |mean - analytic| <= 3 SE + tail bound + bias budget."""
    diff = estimate.mean - analytic
    if estimate.standard_error > 0:
        z = diff / estimate.standard_error
    else:
        z = 0.0 if diff == 0 else math.copysign(math.inf, diff)
    budget = 3 * estimate.standard_error + estimate.tail_bound + bias_budget
    passed = bool(math.isfinite(budget) and abs(diff) <= budget)
    return Comparison(float(z), passed, float(budget))


@dataclass(frozen=True)
class BiasCalibration:
    """Step-halving estimate of the O(h) discretization bias of the cost."""

    fine: float
    coarse: float
    diff_se: float

    @property
    def budget(self) -> float:
        return abs(self.coarse - self.fine) + 3 * self.diff_se


def calibrate_bias(
    model: MfLqModel, K, Khat, x0, i0, config: SimConfig, *, fine: CostEstimate | None = None, threads: int = 1
) -> BiasCalibration:
    """Compare step h with step 2h on the same chain and Brownian paths.

    With weak order one, bias(h) ~ J(2h) - J(h).
    """
    if fine is None:
        fine = estimate_cost(model, K, Khat, x0, i0, config, threads=threads)
    coarse = estimate_cost(model, K, Khat, x0, i0, config, coarsen=2, threads=threads)
    return BiasCalibration(fine.mean, coarse.mean, _se(coarse.per_path - fine.per_path))


@dataclass
class DecayResult:
    checkpoints: tuple[float, ...]
    means: NDArray[np.float64]
    standard_errors: NDArray[np.float64]

    def nonincreasing(self, k: float = 3.0) -> bool:
        m, s = self.means, self.standard_errors
        return bool(all(m[j + 1] <= m[j] + k * math.hypot(s[j], s[j + 1]) for j in range(len(m) - 1)))

    def passes(self, x0_norm2: float, final_bound: float = 0.05) -> bool:
        return self.nonincreasing() and bool(self.means[-1] <= final_bound * x0_norm2)


def decay_check(
    model: MfLqModel,
    K: ArrayLike,
    Khat: ArrayLike,
    x0: ArrayLike,
    i0: int,
    config: SimConfig,
    checkpoints: Sequence[float],
    *,
    threads: int = 1,
) -> DecayResult:
    """Estimates of e^{-rT} E|X(T)|^2 at each checkpoint, all from one ensemble."""
    checkpoints = tuple(float(c) for c in checkpoints)
    if any(c < 0 or c > config.T for c in checkpoints):
        raise ValueError(f"checkpoints must lie in [0, {config.T}]")
    _, _, _, ck = _ensemble(model, K, Khat, x0, i0, config, checkpoints=checkpoints, threads=threads)
    se = np.array([_se(ck[:, j]) for j in range(len(checkpoints))])
    return DecayResult(checkpoints, ck.mean(axis=0), se)


@dataclass
class StationarityReport:
    per_path: list[NDArray[np.float64]]
    max_norm: float
    mean_norm: float
    max_state: float

    def passes(self, rtol: float = 1e-8) -> bool:
        return self.max_norm <= rtol * (1.0 + self.max_state)


def stationarity_residual(model: MfLqModel, solution: AreSolution, trajectories: TrajectorySet) -> StationarityReport:
    """Pointwise norm of R u + B'p + D'q with p = P X + Phat Xhat, q = P (C X + Chat Xhat + D u)."""
    P = np.asarray(solution.P)
    Phat = np.asarray(solution.Phat)
    if P.shape != (model.M, model.n, model.n):
        raise ModelError(f"solution P has shape {P.shape}, model expects {(model.M, model.n, model.n)}")
    norms = []
    max_state = 0.0
    for tr in trajectories:
        if tr.X.shape[1] != model.n or tr.u.shape[1] != model.k:
            raise ModelError("trajectory dimensions do not match the model")
        g = tr.regime
        X, Xh, u = tr.X, tr.Xhat, tr.u
        p = np.einsum("tab,tb->ta", P[g], X) + np.einsum("tab,tb->ta", Phat[g], Xh)
        inner = (np.einsum("tab,tb->ta", model.C[g], X) + np.einsum("tab,tb->ta", model.Chat[g], Xh)
                 + np.einsum("tab,tb->ta", model.D[g], u))
        q = np.einsum("tab,tb->ta", P[g], inner)
        res = (np.einsum("tab,tb->ta", model.R[g], u) + np.einsum("tba,tb->ta", model.B[g], p)
               + np.einsum("tba,tb->ta", model.D[g], q))
        norms.append(np.linalg.norm(res, axis=1))
        max_state = max(max_state, float(np.max(np.linalg.norm(X, axis=1))))
    allv = np.concatenate(norms) if norms else np.zeros(0)
    return StationarityReport(
        norms,
        float(allv.max()) if allv.size else 0.0,
        float(allv.mean()) if allv.size else 0.0,
        max_state,
    )


@dataclass
class ProbeResult:
    optimal: CostEstimate
    perturbed: CostEstimate
    gap: float
    combined_se: float

    @property
    def passed(self) -> bool:
        """The perturbed cost is not below the optimal one beyond noise."""
        return self.perturbed.mean >= self.optimal.mean - 3 * self.combined_se

    @property
    def significant(self) -> bool:
        """The perturbed cost exceeds the optimal one by more than 3 combined SE."""
        return self.gap > 3 * self.combined_se


def unit_direction(model: MfLqModel) -> NDArray[np.float64]:
    """Perturbation direction with unit Frobenius norm in every regime."""
    E = np.ones((model.M, model.k, model.n)) / math.sqrt(model.k * model.n)
    return E


def suboptimality_probe(
    model: MfLqModel,
    solution: AreSolution,
    delta: float,
    x0: ArrayLike,
    i0: int,
    config: SimConfig,
    *,
    direction: ArrayLike | None = None,
    optimal: CostEstimate | None = None,
    threads: int = 1,
) -> ProbeResult:
    """Cost under (Theta + delta E, ThetaHat) vs (Theta, ThetaHat) with common random numbers.

    The combined SE is the standard error of the paired per-path difference.
    """
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    g = solution.gains
    E = unit_direction(model) if direction is None else np.asarray(direction, dtype=np.float64)
    if optimal is None:
        optimal = estimate_cost(model, g.Theta, g.ThetaHat, x0, i0, config, threads=threads)
    perturbed = estimate_cost(model, g.Theta + delta * E, g.ThetaHat, x0, i0, config, threads=threads)
    d = perturbed.per_path - optimal.per_path
    return ProbeResult(optimal, perturbed, float(perturbed.mean - optimal.mean), _se(d))
