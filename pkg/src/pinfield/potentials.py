"""Even, uniformly convex interaction potentials V with certified bounds on V''.

Three families ship:

* ``gaussian``:  V(t) = kappa t^2 / 2
* ``cosine``:    V(t) = t^2 / 2 - beta (1 - cos t),   V'' = 1 - beta cos t
* ``logcosh``:   V(t) = t^2 / 2 + lam log cosh t,     V'' = 1 + lam sech^2 t

Each family carries ``c_V`` with ``1/c_V <= V'' <= c_V``. The numba kernels
below dispatch on an integer family code so the samplers can stay compiled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numba
import numpy as np

GAUSSIAN, COSINE, LOGCOSH = 0, 1, 2
KIND_CODES = {"gaussian": GAUSSIAN, "cosine": COSINE, "logcosh": LOGCOSH}
PARAM_NAMES = {"gaussian": "kappa", "cosine": "beta", "logcosh": "lam"}


@numba.njit(cache=True, nogil=True)
def v_value(code, p, t):
    if code == GAUSSIAN:
        return 0.5 * p * t * t
    if code == COSINE:
        return 0.5 * t * t - p * (1.0 - math.cos(t))
    # log cosh(t) = |t| + log1p(exp(-2|t|)) - log 2, stable for large |t|
    a = abs(t)
    return 0.5 * t * t + p * (a + math.log1p(math.exp(-2.0 * a)) - math.log(2.0))


@numba.njit(cache=True, nogil=True)
def v_prime(code, p, t):
    if code == GAUSSIAN:
        return p * t
    if code == COSINE:
        return t - p * math.sin(t)
    return t + p * math.tanh(t)


@numba.njit(cache=True, nogil=True)
def v_second(code, p, t):
    if code == GAUSSIAN:
        return p
    if code == COSINE:
        return 1.0 - p * math.cos(t)
    c = math.cosh(t) if abs(t) < 350.0 else math.inf
    return 1.0 + p / (c * c)


@dataclass(frozen=True)
class PotentialFamily:
    kind: str
    param: float
    c_V: float

    def __post_init__(self):
        if self.kind not in KIND_CODES:
            raise ValueError(f"unknown potential family {self.kind!r}")
        if not self.c_V >= 1.0:
            raise ValueError("c_V must be >= 1")

    @classmethod
    def gaussian(cls, kappa: float = 1.0, c_V: float | None = None) -> "PotentialFamily":
        if kappa <= 0:
            raise ValueError("kappa must be positive")
        return cls("gaussian", float(kappa), c_V if c_V is not None else max(kappa, 1.0 / kappa))

    @classmethod
    def cosine(cls, beta: float, c_V: float | None = None) -> "PotentialFamily":
        if c_V is None:
            c_V = 1.0 / (1.0 - abs(beta)) if abs(beta) < 1 else math.inf
            c_V = max(c_V, 1.0 + abs(beta))
        return cls("cosine", float(beta), c_V)

    @classmethod
    def logcosh(cls, lam: float, c_V: float | None = None) -> "PotentialFamily":
        if c_V is None:
            c_V = 1.0 + lam if lam >= 0 else (1.0 / (1.0 + lam) if lam > -1 else math.inf)
        return cls("logcosh", float(lam), c_V)

    @classmethod
    def from_config(cls, kind: str, params: dict, c_V: float | None = None) -> "PotentialFamily":
        if kind not in PARAM_NAMES:
            raise ValueError(f"unknown potential family {kind!r}")
        name = PARAM_NAMES[kind]
        extra = set(params) - {name}
        if extra:
            raise ValueError(f"unknown parameter(s) for {kind}: {sorted(extra)}")
        if name not in params:
            raise ValueError(f"family {kind} needs parameter {name!r}")
        return getattr(cls, kind)(params[name], c_V)

    @property
    def code(self) -> int:
        return KIND_CODES[self.kind]

    @property
    def constant_curvature(self) -> bool:
        """True when V'' does not depend on t (walk rates ignore the field)."""
        return self.kind == "gaussian" or self.param == 0.0

    def eval(self, t):
        """Return ``(V(t), V'(t), V''(t))``; vectorizes over numpy input."""
        t = np.asarray(t, dtype=float)
        p = self.param
        if self.kind == "gaussian":
            return 0.5 * p * t * t, p * t, np.full_like(t, p)
        if self.kind == "cosine":
            return 0.5 * t * t - p * (1 - np.cos(t)), t - p * np.sin(t), 1 - p * np.cos(t)
        a = np.abs(t)
        logcosh = a + np.log1p(np.exp(-2 * a)) - np.log(2.0)
        sech2 = 1.0 / np.cosh(np.minimum(a, 350.0)) ** 2
        return 0.5 * t * t + p * logcosh, t + p * np.tanh(t), 1 + p * sech2

    def analytic_extrema(self) -> tuple[float, float]:
        """Exact (inf, sup) of V'' over the real line."""
        p = self.param
        if self.kind == "gaussian":
            return p, p
        if self.kind == "cosine":
            # 1 - p cos t: extremes at t = 0 and t = pi
            return 1 - abs(p), 1 + abs(p)
        # 1 + p sech^2: sech^2 ranges over (0, 1]; the infimum is approached as |t| -> inf
        return min(1.0, 1 + p), max(1.0, 1 + p)

    def describe(self) -> dict:
        return {"family": self.kind, PARAM_NAMES[self.kind]: self.param, "c_V": self.c_V}


@dataclass(frozen=True)
class BoundsReport:
    family: PotentialFamily
    min_second: float
    max_second: float
    grid_min: float
    grid_max: float
    passed: bool

    def __str__(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return (
            f"{self.family.kind}({self.family.param}) c_V={self.family.c_V:g}: "
            f"V'' in [{self.min_second:.6g}, {self.max_second:.6g}] -> {verdict}"
        )


@lru_cache(maxsize=64)
def certify_bounds(family: PotentialFamily, T: float = 50.0, step: float = 1e-3) -> BoundsReport:
    """Check ``1/c_V <= V'' <= c_V`` by grid scan combined with the analytic extrema.

    A failing family yields ``passed=False``; nothing is raised.
    """
    t = np.arange(-T, T + step / 2, step)
    _, _, v2 = family.eval(t)
    gmin, gmax = float(v2.min()), float(v2.max())
    amin, amax = family.analytic_extrema()
    lo, hi = min(gmin, amin), max(gmax, amax)
    c = family.c_V
    passed = bool(lo > 0 and 1.0 / c <= lo * (1 + 1e-12) and hi <= c * (1 + 1e-12))
    return BoundsReport(family, lo, hi, gmin, gmax, passed)


def require_certified(family: PotentialFamily) -> None:
    report = certify_bounds(family)
    if not report.passed:
        raise ValueError(f"potential family is not certified: {report}")
