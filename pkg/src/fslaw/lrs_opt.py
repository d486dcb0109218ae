"""Optimal learning-rate schedules for a fitted ansatz by projected gradient descent.

A non-increasing schedule is written through its decrements,
eta_i = eta_0 - sum_{k<i} delta_k for steps i = 1..K, with feasible set
{delta >= 0, sum delta <= eta_0}. The ansatz final-step loss and its gradient
cost O(K) per evaluation.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .curve_fit import AnsatzParams, ansatz_eval
from .errors import ConfigError, NumericError
from .schedules import Tabulated

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class DecrementSchedule:
    eta0: float
    deltas: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "deltas", np.asarray(self.deltas, dtype=float))
        if self.eta0 <= 0:
            raise ConfigError("eta0 must be positive")

    @property
    def K(self) -> int:
        return self.deltas.size

    def rates(self) -> np.ndarray:
        """eta_1..eta_K."""
        return self.eta0 - np.cumsum(self.deltas)

    def feasible(self, tol: float = 0.0) -> bool:
        return bool(np.all(self.deltas >= -tol) and self.deltas.sum() <= self.eta0 * (1 + 1e-12) + tol)

    def to_schedule(self) -> Tabulated:
        return Tabulated(np.maximum(self.rates(), 0.0), initial=self.eta0)

    @classmethod
    def constant(cls, eta0: float, K: int) -> "DecrementSchedule":
        return cls(eta0, np.zeros(K))

    @classmethod
    def from_rates(cls, eta0: float, rates) -> "DecrementSchedule":
        rates = np.asarray(rates, dtype=float)
        return cls(eta0, -np.diff(np.concatenate([[eta0], rates])))


def project(deltas, eta0: float) -> np.ndarray:
    """Euclidean projection onto {delta >= 0, sum delta <= eta0}."""
    d = np.maximum(np.asarray(deltas, dtype=float), 0.0)
    if d.sum() <= eta0:
        return d
    # sorted-threshold projection onto the face sum = eta0
    u = np.sort(d)[::-1]
    css = np.cumsum(u) - eta0
    ks = np.arange(1, u.size + 1)
    rho = np.flatnonzero(u - css / ks > 0)[-1]
    theta = css[rho] / (rho + 1)
    out = np.maximum(d - theta, 0.0)
    # rounding can leave the sum an ulp above eta0; feasibility must be exact
    while out.sum() > eta0:
        theta = np.nextafter(theta, np.inf) if theta else np.finfo(float).tiny
        out = np.maximum(d - theta, 0.0)
    return out


def objective_and_gradient(
    d: DecrementSchedule, p: AnsatzParams, M: float | None = None
) -> tuple[float, np.ndarray]:
    """Final-step ansatz loss L(K) and dL/d(delta) by suffix sums."""
    if not d.feasible(tol=1e-15):
        warnings.warn("infeasible decrements; projecting first", stacklevel=2)
        d = DecrementSchedule(d.eta0, project(d.deltas, d.eta0))
    K = d.K
    eta = d.rates()
    T = np.cumsum(eta)
    if np.any(T <= 0):
        raise NumericError("intrinsic time must stay positive")
    s, g, c5 = p.s, p.gamma_exp, p.c5
    TK = T[-1]
    dt = TK - T
    base = 1.0 + c5 * dt
    powg = base**-g
    F = 1.0 - powg
    Ts = T**-s
    Q = p.c4 + Ts
    A = Q * F
    mterm = p.c2 * float(M) ** (-s * p.beta_eff) if M is not None else 0.0
    L = p.L0 + p.c1 * TK**-s + mterm - p.c3 * float(d.deltas @ A)

    # dL/dT_i for i < K from the i-th summand; T_K collects the c1 term and every
    # Delta_i with i < K (the i = K summand vanishes identically)
    dF_dTi = -g * c5 * powg / base
    G = -p.c3 * d.deltas * (-s * Ts / T * F + Q * dF_dTi)
    G[-1] = -s * p.c1 * TK ** (-s - 1) + p.c3 * float(d.deltas[:-1] @ (Q * dF_dTi)[:-1])
    # sum_{i>j} (i-j) G_i with i, j 1-based step / 0-based decrement index
    i = np.arange(1, K + 1)
    suf_G = np.cumsum(G[::-1])[::-1]
    suf_iG = np.cumsum((i * G)[::-1])[::-1]
    j = np.arange(K)
    # steps i > j correspond to 0-based positions >= j
    through_T = suf_iG[j] - j * suf_G[j]
    grad = -p.c3 * A - through_T
    return float(L), grad


def knot_matrix(K: int, P: int) -> np.ndarray:
    """(K, P) map spreading each knot's decrement uniformly over a contiguous block."""
    if not 1 <= P <= K:
        raise ConfigError("need 1 <= knots <= K")
    edges = np.linspace(0, K, P + 1).round().astype(int)
    E = np.zeros((K, P))
    for q in range(P):
        E[edges[q] : edges[q + 1], q] = 1.0 / (edges[q + 1] - edges[q])
    return E


@dataclass(frozen=True)
class OptimizerConfig:
    params: AnsatzParams
    K: int
    eta0: float
    M: float | None = None
    iterations: int = 50_000
    rates: tuple[float, ...] = tuple(np.geomspace(5e-10, 1e-8, 5))
    knots: int | None = None  # None = full dimension
    frozen_prefix: int = 0  # decrements before this step stay zero


    def __post_init__(self):
        if self.K < 2:
            raise ConfigError("horizon must be at least 2")
        if self.eta0 <= 0 or self.iterations < 1:
            raise ConfigError("eta0 and iterations must be positive")
        if not self.rates or min(self.rates) <= 0:
            raise ConfigError("PGD rates must be positive")
        if not 0 <= self.frozen_prefix < self.K:
            raise ConfigError("frozen_prefix must lie in [0, K)")


@dataclass(frozen=True, eq=False)
class OptimizationResult:
    schedule: DecrementSchedule
    objective: float
    rate: float
    trace: np.ndarray  # best-so-far objective per iteration for the chosen rate
    rate_objectives: dict = field(default_factory=dict)


def _frozen(cfg: OptimizerConfig, E: np.ndarray | None) -> np.ndarray:
    """Mask of optimization coordinates held at zero."""
    if E is None:
        mask = np.zeros(cfg.K, dtype=bool)
        mask[: cfg.frozen_prefix] = True
        return mask
    # a knot is frozen when its block starts inside the prefix
    first = np.argmax(E > 0, axis=0)
    return (first < cfg.frozen_prefix) if cfg.frozen_prefix else np.zeros(E.shape[1], dtype=bool)


def _run(cfg: OptimizerConfig, rate: float, E: np.ndarray | None):
    P = cfg.K if E is None else E.shape[1]
    x = np.zeros(P)
    frozen = _frozen(cfg, E)
    expand = (lambda v: v) if E is None else (lambda v: E @ v)
    best_x, best = x.copy(), math.inf
    trace = np.empty(cfg.iterations + 1)
    for it in range(cfg.iterations + 1):
        L, g = objective_and_gradient(DecrementSchedule(cfg.eta0, expand(x)), cfg.params, cfg.M)
        if not math.isfinite(L) or not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite objective at iteration {it}; iterate {x.tolist()}")
        if L < best:
            best, best_x = L, x.copy()
        trace[it] = best
        if it == cfg.iterations:
            break
        if E is not None:
            g = E.T @ g
        # knot masses share the plain simplex constraint because each column of E sums to 1
        g[frozen] = 0.0
        target = project(x - rate * g, cfg.eta0)
        # the ansatz needs eta_1 > 0 (T > 0); backtrack along the feasible segment
        step = 1.0
        while cfg.eta0 - expand(x + step * (target - x))[0] <= 0:
            step *= 0.5
            if step < 1e-12:
                raise NumericError(f"PGD cannot keep eta_1 positive at iteration {it}")
        x = x + step * (target - x)
    return best, expand(best_x), trace


def optimize(cfg: OptimizerConfig) -> OptimizationResult:
    """PGD from the constant schedule for every candidate rate; keeps the best final iterate."""
    E = None if cfg.knots is None else knot_matrix(cfg.K, cfg.knots)
    results = {}
    best = None
    for rate in cfg.rates:
        obj, deltas, trace = _run(cfg, float(rate), E)
        results[float(rate)] = obj
        log.info("PGD rate %.3g -> %.10g", rate, obj)
        if best is None or obj < best[0]:
            best = (obj, deltas, trace, float(rate))
    obj, deltas, trace, rate = best
    return OptimizationResult(DecrementSchedule(cfg.eta0, deltas), obj, rate, trace, results)


def final_loss(p: AnsatzParams, schedule, M: float | None = None) -> float:
    """Final-step ansatz loss of any schedule with a horizon."""
    K = schedule.horizon
    return float(ansatz_eval(p, schedule, [K], M)[0])
