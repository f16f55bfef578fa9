"""Problem data for discounted mean-field LQ control with regime switching.

A model bundles the Markov generator, the discount rate and one coefficient
matrix per regime for the controlled state equation

    dX = [A X + Ahat Xhat + B u] dt + [C X + Chat Xhat + D u] dW

and the running cost  1/2 (X'Q X + Xhat' Qhat Xhat + u' R u).
Regimes are indexed from 0 throughout the Python API.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterator, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

GENERATOR_TOL = 1e-12
SYMMETRY_REJECT_TOL = 1e-8
PSD_TOL = 1e-12

FAMILY_NAMES = ("A", "Ahat", "B", "C", "Chat", "D", "Q", "Qhat", "R")
SYMMETRIC_FAMILIES = ("Q", "Qhat", "R")


class ModelError(ValueError):
    """Raised when a model document or model data is invalid."""


def _frozen(a: ArrayLike) -> NDArray[np.float64]:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RegimeFamily:
    """Ordered tuple of M same-shaped matrices, stored as an (M, rows, cols) array."""

    entries: NDArray[np.float64]

    def __post_init__(self) -> None:
        arr = np.array(self.entries, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None, None]
        if arr.ndim != 3:
            raise ModelError(f"regime family must be 3-dimensional, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "entries", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape[1], self.entries.shape[2]

    def __len__(self) -> int:
        return self.entries.shape[0]

    def __getitem__(self, i: int) -> NDArray[np.float64]:
        return self.entries[i]

    def __iter__(self) -> Iterator[NDArray[np.float64]]:
        return iter(self.entries)

    def __array__(self, dtype=None, copy=None) -> NDArray[np.float64]:
        return self.entries if dtype is None else self.entries.astype(dtype)

    def is_symmetric(self, tol: float = 1e-10) -> bool:
        e = self.entries
        return e.shape[1] == e.shape[2] and bool(
            np.all(np.abs(e - e.transpose(0, 2, 1)) <= tol)
        )

    def tolist(self) -> list:
        return self.entries.tolist()


@dataclass(frozen=True)
class MfLqModel:
    """Complete problem data. Families are read-only arrays of shape (M, rows, cols)."""

    n: int
    k: int
    M: int
    r: float
    generator: NDArray[np.float64]
    A: NDArray[np.float64]
    Ahat: NDArray[np.float64]
    B: NDArray[np.float64]
    C: NDArray[np.float64]
    Chat: NDArray[np.float64]
    D: NDArray[np.float64]
    Q: NDArray[np.float64]
    Qhat: NDArray[np.float64]
    R: NDArray[np.float64]

    def __post_init__(self) -> None:
        for name in ("generator",) + FAMILY_NAMES:
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        _validate(self)

    def permuted(self, perm: Sequence[int]) -> "MfLqModel":
        """Relabel regimes: new regime ``j`` is old regime ``perm[j]``."""
        p = np.asarray(perm, dtype=int)
        fams = {name: getattr(self, name)[p] for name in FAMILY_NAMES}
        return MfLqModel(self.n, self.k, self.M, self.r, self.generator[np.ix_(p, p)], **fams)

    def replace(self, **changes: Any) -> "MfLqModel":
        data = {name: getattr(self, name) for name in ("n", "k", "M", "r", "generator") + FAMILY_NAMES}
        data.update(changes)
        return MfLqModel(**data)


@dataclass(frozen=True)
class AssumptionReport:
    margin1: NDArray[np.float64]
    margin2: NDArray[np.float64]
    min_eig_Q: NDArray[np.float64]
    min_eig_Qhat: NDArray[np.float64]
    min_eig_R: NDArray[np.float64]
    pass_H1: bool
    pass_H2: bool
    messages: tuple[str, ...] = field(default=())

    @property
    def passed(self) -> bool:
        return self.pass_H1 and self.pass_H2


def _validate(m: MfLqModel) -> None:
    for name, value in (("n", m.n), ("k", m.k), ("M", m.M)):
        if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
            raise ModelError(f"{name} must be a positive integer, got {value!r}")
    if not (isinstance(m.r, (int, float)) and math.isfinite(m.r) and m.r > 0):
        raise ModelError(f"discount rate r must be positive and finite, got {m.r!r}")

    n, k, M = m.n, m.k, m.M
    shapes = {
        "A": (n, n), "Ahat": (n, n), "C": (n, n), "Chat": (n, n),
        "B": (n, k), "D": (n, k),
        "Q": (n, n), "Qhat": (n, n), "R": (k, k),
    }
    if m.generator.shape != (M, M):
        raise ModelError(f"generator has shape {m.generator.shape}, expected {(M, M)}")
    for name, shape in shapes.items():
        arr = getattr(m, name)
        if arr.shape != (M,) + shape:
            raise ModelError(f"{name} has shape {arr.shape}, expected {(M,) + shape}")
    for name in ("generator",) + FAMILY_NAMES:
        if not np.all(np.isfinite(getattr(m, name))):
            raise ModelError(f"{name} contains non-finite values")

    check_generator(m.generator)
    for name in SYMMETRIC_FAMILIES:
        arr = getattr(m, name)
        asym = np.max(np.abs(arr - arr.transpose(0, 2, 1)))
        if asym > GENERATOR_TOL:
            raise ModelError(f"{name} is not symmetric (max asymmetry {asym:.3e})")


def check_generator(generator: ArrayLike) -> NDArray[np.float64]:
    """Validate a transition-rate matrix; returns it as a float array."""
    G = np.asarray(generator, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise ModelError(f"generator must be square, got shape {G.shape}")
    off = G - np.diag(np.diag(G))
    if np.any(off < 0):
        i, j = np.argwhere(off < 0)[0]
        raise ModelError(f"generator has negative off-diagonal rate at ({i}, {j})")
    sums = G.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums) > GENERATOR_TOL)
    if bad.size:
        i = bad[0]
        raise ModelError(f"generator row sum of row {i} is {sums[i]!r}, expected 0")
    return G


def _matrix(value: Any, shape: tuple[int, int], where: str) -> NDArray[np.float64]:
    if isinstance(value, bool):
        raise ModelError(f"{where}: expected a matrix, got {value!r}")
    if isinstance(value, (int, float)) and shape == (1, 1):
        value = [[value]]
    try:
        arr = np.array(value, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ModelError(f"{where}: not a numeric matrix ({exc})") from None
    if arr.shape != shape:
        raise ModelError(f"{where}: shape mismatch, got {arr.shape}, expected {shape}")
    if not np.all(np.isfinite(arr)):
        raise ModelError(f"{where}: NaN/Inf not permitted")
    return arr


def _reject_constant(name: str) -> float:
    raise ModelError(f"non-finite literal {name} not permitted")


def model_from_dict(doc: dict) -> MfLqModel:
    """Build a validated model from a decoded document."""
    if not isinstance(doc, dict):
        raise ModelError("model document must be an object")
    missing = [key for key in ("n", "k", "M", "r", "generator") + FAMILY_NAMES if key not in doc]
    if missing:
        raise ModelError(f"missing fields: {', '.join(missing)}")
    n, k, M = doc["n"], doc["k"], doc["M"]
    for name, value in (("n", n), ("k", k), ("M", M)):
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            raise ModelError(f"{name} must be a positive integer, got {value!r}")
    r = doc["r"]
    if isinstance(r, bool) or not isinstance(r, (int, float)):
        raise ModelError(f"r must be a real number, got {r!r}")

    generator = _matrix(doc["generator"], (M, M), "generator")
    shapes = {
        "A": (n, n), "Ahat": (n, n), "C": (n, n), "Chat": (n, n),
        "B": (n, k), "D": (n, k),
        "Q": (n, n), "Qhat": (n, n), "R": (k, k),
    }
    fams = {}
    for name, shape in shapes.items():
        raw = doc[name]
        if not isinstance(raw, list) or len(raw) != M:
            raise ModelError(f"{name}: expected a list of {M} matrices")
        fams[name] = np.stack([_matrix(v, shape, f"{name}[{i}]") for i, v in enumerate(raw)])

    for name in SYMMETRIC_FAMILIES:
        arr = fams[name]
        asym = np.max(np.abs(arr - arr.transpose(0, 2, 1)))
        if asym > SYMMETRY_REJECT_TOL:
            raise ModelError(f"{name} is not symmetric (max asymmetry {asym:.3e})")
        fams[name] = 0.5 * (arr + arr.transpose(0, 2, 1))

    return MfLqModel(n=n, k=k, M=M, r=float(r), generator=generator, **fams)


def load_model(config_text: str) -> MfLqModel:
    """Parse a JSON model document and return a validated model."""
    try:
        doc = json.loads(config_text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise ModelError(f"malformed model document: {exc}") from None
    return model_from_dict(doc)


def model_to_dict(model: MfLqModel) -> dict:
    doc: dict[str, Any] = {
        "n": model.n,
        "k": model.k,
        "M": model.M,
        "r": model.r,
        "generator": model.generator.tolist(),
    }
    for name in FAMILY_NAMES:
        doc[name] = getattr(model, name).tolist()
    return doc


def dump_model(model: MfLqModel, indent: int | None = 2) -> str:
    return json.dumps(model_to_dict(model), indent=indent)


def _min_eig(mats: NDArray[np.float64]) -> NDArray[np.float64]:
    sym = 0.5 * (mats + mats.transpose(0, 2, 1))
    return np.linalg.eigvalsh(sym)[:, 0]


def stability_margins(
    r: float,
    A: NDArray[np.float64],
    C: NDArray[np.float64],
    Ahat: NDArray[np.float64] | None = None,
) -> tuple[NDArray[np.float64], NDArray[np.float64] | None]:
    """Smallest eigenvalues of rI - (A + A' + C'C) and rI - (A + A' + Ahat + Ahat') per regime."""
    n = A.shape[1]
    eye = np.eye(n)
    At = A.transpose(0, 2, 1)
    m1 = _min_eig(r * eye - (A + At + C.transpose(0, 2, 1) @ C))
    m2 = None
    if Ahat is not None:
        m2 = _min_eig(r * eye - (A + At + Ahat + Ahat.transpose(0, 2, 1)))
    return m1, m2


def check_assumptions(model: MfLqModel) -> AssumptionReport:
    """Evaluate the discount-range condition (H1) and the definiteness condition (H2)."""
    m1, m2 = stability_margins(model.r, model.A, model.C, model.Ahat)
    eq, eqh, er = _min_eig(model.Q), _min_eig(model.Qhat), _min_eig(model.R)
    pass_h1 = bool(np.min(m1) > 0 and np.min(m2) > 0)
    pass_h2 = bool(np.all(eq >= -PSD_TOL) and np.all(eqh >= -PSD_TOL) and np.all(er > 0))

    messages = []
    for i in range(model.M):
        if m1[i] <= 0:
            messages.append(f"(H1) violated: rI - (A + A' + C'C) not positive definite in regime {i + 1}")
        if m2[i] <= 0:
            messages.append(f"(H1) violated: rI - (A + A' + Ahat + Ahat') not positive definite in regime {i + 1}")
        if eq[i] < -PSD_TOL:
            messages.append(f"(H2) violated: Q({i + 1}) not positive semidefinite")
        if eqh[i] < -PSD_TOL:
            messages.append(f"(H2) violated: Qhat({i + 1}) not positive semidefinite")
        if er[i] <= 0:
            messages.append(f"(H2) violated: R({i + 1}) not positive definite")
    return AssumptionReport(m1, m2, eq, eqh, er, pass_h1, pass_h2, tuple(messages))


def paper_example() -> MfLqModel:
    """Four-regime scalar benchmark instance (n = k = 1, r = 3).

    The chain switches quickly inside the groups {1, 2} and {3, 4} (rate 2)
    and slowly between them (rate 1).
    """
    generator = [
        [-3.0, 2.0, 1.0, 0.0],
        [2.0, -3.0, 0.0, 1.0],
        [1.0, 0.0, -3.0, 2.0],
        [0.0, 1.0, 2.0, -3.0],
    ]
    table = {
        #        regime 1  regime 2  regime 3  regime 4
        "A":    [1.0, 1.0, -1.0, -1.0],
        "Ahat": [0.0, 0.0, 1.0, 1.0],
        "B":    [1.0, 1.5, 2.0, 2.5],
        "C":    [0.5, 0.5, 0.5, 0.5],
        "Chat": [0.2, 0.5, 0.2, 0.5],
        "D":    [0.4, 0.6, 0.4, 0.6],
        "Q":    [1.0, 0.5, 1.0, 0.5],
        "Qhat": [1.0, 2.0, 2.0, 1.0],
        "R":    [0.5, 0.5, 0.5, 0.5],
    }
    fams = {name: np.array(vals).reshape(4, 1, 1) for name, vals in table.items()}
    return MfLqModel(n=1, k=1, M=4, r=3.0, generator=np.array(generator), **fams)
