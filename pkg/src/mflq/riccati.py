"""The two algebraic Riccati equations and the optimal feedback gains.

ARE-1 (for P):

    r P = P A + A'P + C'P C + Q - S' Rt^{-1} S + sum_j lam_ij P(j),
    Rt = R + D'P D > 0,  S = B'P + D'P C.

ARE-3 (for Pt = P + Phat), with At = A + Ahat, Ct = C + Chat, Qt = Q + Qhat:

    r Pt = Pt At + At'Pt + Ct'P Ct + Qt - St' Rt^{-1} St + sum_j lam_ij Pt(j),
    St = B'Pt + D'P Ct.

Both are solved by quasi-linearization: freeze the gain, solve a coupled
Lyapunov equation, update the gain. The iterates decrease monotonically.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np
import scipy.linalg
from numpy.typing import ArrayLike, NDArray

from .model import MfLqModel, ModelError, RegimeFamily
from .lyapunov import LyapunovProblem, solve_coupled_lyapunov

log = logging.getLogger(__name__)

Variant = Literal["exact", "paper_literal"]
VARIANTS = ("exact", "paper_literal")


class RiccatiError(RuntimeError):
    """Raised when an iteration fails to converge or Rt loses definiteness.

    On non-convergence ``trace`` holds the partial IterationTrace.
    """

    def __init__(self, message: str, trace: "IterationTrace | None" = None) -> None:
        super().__init__(message)
        self.trace = trace


def _t(X: NDArray[np.float64]) -> NDArray[np.float64]:
    return X.transpose(0, 2, 1)


def _sym(X: NDArray[np.float64]) -> NDArray[np.float64]:
    return 0.5 * (X + _t(X))


def _spd_solve(Rt: NDArray[np.float64], rhs: NDArray[np.float64]) -> NDArray[np.float64]:
    """Solve Rt(i) Y(i) = rhs(i) per regime via Cholesky; fails if Rt(i) is not positive definite."""
    out = np.empty_like(rhs)
    for i in range(Rt.shape[0]):
        try:
            fac = scipy.linalg.cho_factor(_sym(Rt[i : i + 1])[0])
        except np.linalg.LinAlgError:
            raise RiccatiError(f"Rtilde({i + 1}) = R + D'PD is not positive definite") from None
        out[i] = scipy.linalg.cho_solve(fac, rhs[i])
    return out


def _coupling(generator: NDArray[np.float64], P: NDArray[np.float64]) -> NDArray[np.float64]:
    return np.einsum("ij,jab->iab", generator, P)


def _as_family(P: ArrayLike, M: int, n: int, name: str) -> NDArray[np.float64]:
    arr = np.asarray(P, dtype=np.float64)
    if arr.ndim == 1 and n == 1:
        arr = arr.reshape(-1, 1, 1)
    if arr.shape != (M, n, n):
        raise ModelError(f"{name} has shape {arr.shape}, expected {(M, n, n)}")
    return arr


def rtilde(P: NDArray[np.float64], model: MfLqModel) -> NDArray[np.float64]:
    return model.R + _t(model.D) @ P @ model.D


def are1_defect(P: ArrayLike, model: MfLqModel) -> NDArray[np.float64]:
    P = _as_family(P, model.M, model.n, "P")
    A, C = model.A, model.C
    Rt = rtilde(P, model)
    S = _t(model.B) @ P + _t(model.D) @ P @ C
    return (
        P @ A + _t(A) @ P + _t(C) @ P @ C + model.Q + _coupling(model.generator, P)
        - _t(S) @ _spd_solve(Rt, S) - model.r * P
    )


def are1_residual(P: ArrayLike, model: MfLqModel) -> NDArray[np.float64]:
    """Per-regime Frobenius norm of the ARE-1 defect E_i(P)."""
    return np.linalg.norm(are1_defect(P, model), axis=(1, 2))


def _are3_parts(P: NDArray[np.float64], model: MfLqModel):
    At = model.A + model.Ahat
    Ct = model.C + model.Chat
    Rt = rtilde(P, model)
    Cbar = _t(model.D) @ P @ Ct
    Qbar = _t(Ct) @ P @ Ct + model.Q + model.Qhat
    return At, Rt, Cbar, Qbar


def are3_defect(Ptilde: ArrayLike, P: ArrayLike, model: MfLqModel) -> NDArray[np.float64]:
    Pt = _as_family(Ptilde, model.M, model.n, "Ptilde")
    P = _as_family(P, model.M, model.n, "P")
    At, Rt, Cbar, Qbar = _are3_parts(P, model)
    St = _t(model.B) @ Pt + Cbar
    return (
        Pt @ At + _t(At) @ Pt + Qbar + _coupling(model.generator, Pt)
        - _t(St) @ _spd_solve(Rt, St) - model.r * Pt
    )


def are3_residual(Ptilde: ArrayLike, P: ArrayLike, model: MfLqModel) -> NDArray[np.float64]:
    """Per-regime Frobenius norm of the ARE-3 defect."""
    return np.linalg.norm(are3_defect(Ptilde, P, model), axis=(1, 2))


def _literal_residual(Pt, P, model) -> NDArray[np.float64]:
    # defect of the fixed-point equation of the update without C-bar cross terms
    _, Rt, Cbar, _ = _are3_parts(P, model)
    St = _t(model.B) @ Pt + Cbar
    X = _t(St) @ _spd_solve(Rt, Cbar)
    return np.linalg.norm(are3_defect(Pt, P, model) + X + _t(X), axis=(1, 2))


@dataclass(frozen=True)
class IterationStep:
    index: int
    residuals: NDArray[np.float64]
    step_norm: float  # max_i ||P_k(i) - P_{k+1}(i)||_F
    min_eig_decrement: float  # min_i lambda_min(P_k(i) - P_{k+1}(i))


@dataclass
class IterationTrace:
    steps: list[IterationStep] = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    iterates: list[NDArray[np.float64]] = field(default_factory=list, repr=False)
    final_residuals: NDArray[np.float64] | None = None
    warnings: list[str] = field(default_factory=list)


def _record(trace: IterationTrace, k: int, res, P_old, P_new) -> None:
    dec = P_old - P_new
    trace.steps.append(
        IterationStep(
            index=k,
            residuals=res,
            step_norm=float(np.max(np.linalg.norm(dec, axis=(1, 2)))),
            min_eig_decrement=float(np.min(np.linalg.eigvalsh(_sym(dec)))),
        )
    )


def solve_are1(
    model: MfLqModel, tol: float = 1e-10, max_iter: int = 200
) -> tuple[NDArray[np.float64], IterationTrace]:
    """Quasi-linearization for ARE-1 started from the Lyapunov solution with Q."""
    A, B, C, D, R = model.A, model.B, model.C, model.D, model.R
    P = solve_coupled_lyapunov(LyapunovProblem(A, C, model.Q, model.generator, model.r))
    trace = IterationTrace(iterations=1, iterates=[P])
    for k in range(max_iter):
        res = are1_residual(P, model)
        if np.max(res) <= tol:
            trace.converged = True
            trace.final_residuals = res
            return P, trace
        if trace.iterations >= max_iter:
            break
        Theta = -_spd_solve(rtilde(P, model), _t(B) @ P + _t(D) @ P @ C)
        Ak = A + B @ Theta
        Ck = C + D @ Theta
        Qk = _sym(model.Q + _t(Theta) @ R @ Theta)
        P_new = solve_coupled_lyapunov(LyapunovProblem(Ak, Ck, Qk, model.generator, model.r))
        _record(trace, k, res, P, P_new)
        trace.iterations += 1
        trace.iterates.append(P_new)
        P = P_new
    trace.final_residuals = are1_residual(P, model)
    raise RiccatiError(
        f"ARE-1 iteration did not reach tol={tol:g} within {max_iter} iterations "
        f"(max residual {np.max(trace.final_residuals):.3e})",
        trace,
    )


def solve_are3(
    model: MfLqModel,
    P: ArrayLike,
    tol: float = 1e-10,
    max_iter: int = 200,
    variant: Variant = "exact",
) -> tuple[NDArray[np.float64], IterationTrace]:
    """Quasi-linearization for ARE-3 given the ARE-1 solution ``P``.

    ``variant="exact"`` keeps the cross terms Theta'Cbar + Cbar'Theta in the
    Lyapunov source so the limit solves ARE-3. ``"paper_literal"`` drops them;
    its limit solves a different equation and is kept only for comparison.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    P = _as_family(P, model.M, model.n, "P")
    B = model.B
    At, Rt, Cbar, Qbar = _are3_parts(P, model)
    _spd_solve(Rt, Cbar)  # definiteness check before iterating
    zero = np.zeros_like(model.C)

    def target(Pt):
        return are3_residual(Pt, P, model) if variant == "exact" else _literal_residual(Pt, P, model)

    Pt = solve_coupled_lyapunov(LyapunovProblem(At, zero, _sym(Qbar), model.generator, model.r))
    trace = IterationTrace(iterations=1, iterates=[Pt])
    if variant == "paper_literal":
        trace.warnings.append(
            "paper_literal update omits the Cbar cross terms; the ARE-3 residual need not vanish at its limit"
        )
    for k in range(max_iter):
        res = target(Pt)
        if np.max(res) <= tol:
            trace.converged = True
            trace.final_residuals = res
            return Pt, trace
        if trace.iterations >= max_iter:
            break
        Th = -_spd_solve(Rt, _t(B) @ Pt + Cbar)
        Ak = At + B @ Th
        Qk = Qbar + _t(Th) @ Rt @ Th
        if variant == "exact":
            Qk = Qk + _t(Th) @ Cbar + _t(Cbar) @ Th
        Pt_new = solve_coupled_lyapunov(LyapunovProblem(Ak, zero, _sym(Qk), model.generator, model.r))
        _record(trace, k, res, Pt, Pt_new)
        trace.iterations += 1
        trace.iterates.append(Pt_new)
        Pt = Pt_new
    trace.final_residuals = target(Pt)
    raise RiccatiError(
        f"ARE-3 ({variant}) iteration did not reach tol={tol:g} within {max_iter} iterations "
        f"(max residual {np.max(trace.final_residuals):.3e})",
        trace,
    )


@dataclass(frozen=True)
class GainSet:
    Rtilde: NDArray[np.float64]
    S: NDArray[np.float64]
    Stilde: NDArray[np.float64]
    Shat: NDArray[np.float64]
    Theta: NDArray[np.float64]
    ThetaTilde: NDArray[np.float64]
    ThetaHat: NDArray[np.float64]


def compute_gains(P: ArrayLike, Ptilde: ArrayLike, model: MfLqModel) -> GainSet:
    """Feedback gains u* = Theta X + ThetaHat Xhat from the two Riccati solutions."""
    P = _as_family(P, model.M, model.n, "P")
    Pt = _as_family(Ptilde, model.M, model.n, "Ptilde")
    B, D = model.B, model.D
    Rt = rtilde(P, model)
    S = _t(B) @ P + _t(D) @ P @ model.C
    St = _t(B) @ Pt + _t(D) @ P @ (model.C + model.Chat)
    Shat = St - S
    Theta = -_spd_solve(Rt, S)
    ThetaTilde = -_spd_solve(Rt, St)
    ThetaHat = ThetaTilde - Theta
    alt = -_spd_solve(Rt, Shat)
    scale = 1.0 + np.max(np.abs(ThetaHat))
    if np.max(np.abs(alt - ThetaHat)) > 1e-12 * scale:
        raise RiccatiError("inconsistent ThetaHat: ThetaTilde - Theta differs from -Rtilde^{-1} Shat")
    return GainSet(Rt, S, St, Shat, Theta, ThetaTilde, ThetaHat)


def value_function(Ptilde: ArrayLike, x: ArrayLike, i: int) -> float:
    """Optimal cost 1/2 x'Ptilde(i) x from initial state x in regime i."""
    Pt = np.asarray(Ptilde, dtype=np.float64)
    if Pt.ndim == 1:
        Pt = Pt.reshape(-1, 1, 1)
    if not 0 <= i < Pt.shape[0]:
        raise IndexError(f"regime {i} out of range for {Pt.shape[0]} regimes")
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    return float(0.5 * x @ Pt[i] @ x)


@dataclass
class AreSolution:
    P: RegimeFamily
    Ptilde: RegimeFamily
    Phat: RegimeFamily
    gains: GainSet
    residual1: NDArray[np.float64]
    residual3: NDArray[np.float64]
    variant: str = "exact"
    trace1: IterationTrace | None = None
    trace3: IterationTrace | None = None

    @property
    def iterations1(self) -> int:
        return self.trace1.iterations if self.trace1 else 0

    @property
    def iterations3(self) -> int:
        return self.trace3.iterations if self.trace3 else 0


def solve_model(
    model: MfLqModel, tol: float = 1e-10, max_iter: int = 200, variant: Variant = "exact"
) -> AreSolution:
    """Solve ARE-1 then ARE-3 and assemble gains and residuals."""
    P, tr1 = solve_are1(model, tol, max_iter)
    Pt, tr3 = solve_are3(model, P, tol, max_iter, variant)
    for w in tr3.warnings:
        log.warning(w)
    gains = compute_gains(P, Pt, model)
    return AreSolution(
        P=RegimeFamily(P),
        Ptilde=RegimeFamily(Pt),
        Phat=RegimeFamily(Pt - P),
        gains=gains,
        residual1=are1_residual(P, model),
        residual3=are3_residual(Pt, P, model),
        variant=variant,
        trace1=tr1,
        trace3=tr3,
    )


def solution_to_dict(sol: AreSolution) -> dict[str, Any]:
    g = sol.gains
    return {
        "P": sol.P.tolist(),
        "Ptilde": sol.Ptilde.tolist(),
        "Phat": sol.Phat.tolist(),
        "Theta": g.Theta.tolist(),
        "ThetaHat": g.ThetaHat.tolist(),
        "ThetaTilde": g.ThetaTilde.tolist(),
        "Rtilde": g.Rtilde.tolist(),
        "residual1": sol.residual1.tolist(),
        "residual3": sol.residual3.tolist(),
        "iterations1": sol.iterations1,
        "iterations3": sol.iterations3,
        "variant": sol.variant,
    }


def dump_solution(sol: AreSolution) -> str:
    return json.dumps(solution_to_dict(sol), indent=2)


def load_solution(text: str, model: MfLqModel) -> AreSolution:
    """Read a solution document. Gains are taken verbatim from the file."""
    try:
        doc = json.loads(text)
        arr = {key: np.asarray(doc[key], dtype=np.float64) for key in
               ("P", "Ptilde", "Phat", "Theta", "ThetaHat", "ThetaTilde", "Rtilde", "residual1", "residual3")}
        variant = str(doc.get("variant", "exact"))
        it1, it3 = int(doc.get("iterations1", 0)), int(doc.get("iterations3", 0))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"malformed solution document: {exc}") from None
    M, n, k = model.M, model.n, model.k
    for key, shape in (("P", (M, n, n)), ("Ptilde", (M, n, n)), ("Phat", (M, n, n)),
                       ("Theta", (M, k, n)), ("ThetaHat", (M, k, n)), ("ThetaTilde", (M, k, n)),
                       ("Rtilde", (M, k, k))):
        if arr[key].shape != shape:
            raise ModelError(f"solution field {key} has shape {arr[key].shape}, expected {shape}")
    Rt = arr["Rtilde"]
    S = -Rt @ arr["Theta"]
    St = -Rt @ arr["ThetaTilde"]
    gains = GainSet(Rt, S, St, St - S, arr["Theta"], arr["ThetaTilde"], arr["ThetaHat"])
    sol = AreSolution(
        P=RegimeFamily(arr["P"]),
        Ptilde=RegimeFamily(arr["Ptilde"]),
        Phat=RegimeFamily(arr["Phat"]),
        gains=gains,
        residual1=arr["residual1"],
        residual3=arr["residual3"],
        variant=variant,
    )
    sol.trace1 = IterationTrace(converged=True, iterations=it1)
    sol.trace3 = IterationTrace(converged=True, iterations=it3)
    return sol
