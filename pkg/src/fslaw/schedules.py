"""Learning-rate and batch-size schedules and the intrinsic-time transform.

Steps are 1-based: a schedule of horizon K exposes rates eta_1..eta_K. The
intrinsic time T(tau) = int_0^tau phi(r) dr is exact for the analytic kinds
(constant, exponential decay, WSD). For the remaining kinds phi is taken
piecewise constant, phi(u) = eta_k on (k-1, k], so T(k) is the cumulative
rate sum and T is piecewise linear in between.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class Schedule:
    """Base class; subclasses are frozen dataclasses."""

    kind: str = "schedule"

    @property
    def horizon(self) -> int | None:
        return getattr(self, "K", None)

    def _require_horizon(self) -> int:
        if self.horizon is None:
            raise ValueError(f"{self.kind} schedule has no finite horizon")
        return int(self.horizon)

    def _rates(self, k: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def eta_at(self, k: int) -> float:
        K = self.horizon
        if k < 1 or (K is not None and k > K):
            raise IndexError(f"step {k} outside 1..{K}")
        return float(self._rates(np.array([k]))[0])

    def rates(self, K: int | None = None) -> np.ndarray:
        """Per-step rates eta_1..eta_K."""
        if K is None:
            K = self._require_horizon()
        elif self.horizon is not None and K > self.horizon:
            raise IndexError(f"requested {K} steps beyond horizon {self.horizon}")
        return self._rates(np.arange(1, K + 1))

    @property
    def eta0(self) -> float:
        """Reference rate before step 1; equals eta_1 unless a kind says otherwise."""
        return self.eta_at(1)

    def step_times(self, K: int | None = None) -> np.ndarray:
        """Discrete intrinsic grid t_0 = 0, t_k = sum_{j<=k} eta_j (length K+1)."""
        return np.concatenate([[0.0], np.cumsum(self.rates(K))])

    # continuous clock; h = 1 here, IntrinsicClock handles other step sizes
    def intrinsic_time(self, tau):
        K = self._require_horizon()
        tau = np.asarray(tau, dtype=float)
        if np.any(tau > K):
            raise ValueError(f"physical time beyond horizon {K}")
        return np.interp(tau, np.arange(K + 1), self.step_times())

    def inverse_intrinsic_time(self, t):
        K = self._require_horizon()
        grid = self.step_times()
        t = np.asarray(t, dtype=float)
        if np.any(t > grid[-1] * (1 + 1e-12)):
            raise ValueError("intrinsic time beyond total")
        t = np.minimum(t, grid[-1])
        # first k with grid[k] >= t, then linear inverse inside (k-1, k]
        k = np.clip(np.searchsorted(grid, t, side="left"), 1, K)
        rate = grid[k] - grid[k - 1]
        frac = np.where(rate > 0, (t - grid[k - 1]) / np.where(rate > 0, rate, 1.0), 1.0)
        return np.where(t <= 0, 0.0, k - 1 + frac)

    def phi(self, tau):
        """Continuous rate function (h = 1)."""
        K = self._require_horizon()
        tau = np.asarray(tau, dtype=float)
        k = np.clip(np.ceil(tau).astype(int), 1, K)
        return self._rates(k)

    def total_intrinsic_time(self) -> float:
        return float(self.intrinsic_time(self._require_horizon()))

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Constant(Schedule):
    eta: float
    K: int | None = None
    kind = "constant"

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("learning rate must be nonnegative")

    def _rates(self, k):
        return np.full(np.shape(k), float(self.eta))

    def intrinsic_time(self, tau):
        tau = np.asarray(tau, dtype=float)
        return self.eta * tau

    def inverse_intrinsic_time(self, t):
        t = np.asarray(t, dtype=float)
        if self.K is not None and np.any(t > self.eta * self.K * (1 + 1e-12)):
            raise ValueError("intrinsic time beyond total")
        return t / self.eta

    def phi(self, tau):
        return np.full(np.shape(tau), float(self.eta))

    def total_intrinsic_time(self) -> float:
        return self.eta * self._require_horizon()

    def to_dict(self):
        return {"kind": self.kind, "eta": self.eta, "K": self.K}


@dataclass(frozen=True)
class ExpDecay(Schedule):
    """eta_k = a exp(-lam k) with lam = log(a/b)/K, so eta_K = b."""

    a: float
    b: float
    K: int
    kind = "exp_decay"

    def __post_init__(self):
        if not (self.a >= self.b > 0):
            raise ValueError("exp-decay needs a >= b > 0")
        if self.K < 1:
            raise ValueError("K must be positive")

    @property
    def lam(self) -> float:
        return math.log(self.a / self.b) / self.K

    def _rates(self, k):
        return self.a * np.exp(-self.lam * np.asarray(k, dtype=float))

    def intrinsic_time(self, tau):
        tau = np.asarray(tau, dtype=float)
        if self.lam == 0.0:
            return self.a * tau
        return self.a / self.lam * -np.expm1(-self.lam * tau)

    def inverse_intrinsic_time(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t > self.total_intrinsic_time() * (1 + 1e-12)):
            raise ValueError("intrinsic time beyond total")
        if self.lam == 0.0:
            return t / self.a
        return -np.log1p(-self.lam * t / self.a) / self.lam

    def phi(self, tau):
        return self.a * np.exp(-self.lam * np.asarray(tau, dtype=float))

    def total_intrinsic_time(self) -> float:
        if self.a == self.b:
            return self.a * self.K
        return (self.a - self.b) * self.K / math.log(self.a / self.b)

    def to_dict(self):
        return {"kind": self.kind, "a": self.a, "b": self.b, "K": self.K}


@dataclass(frozen=True)
class WSD(Schedule):
    """Stable at ``a`` for K1 steps, then exponential decay reaching ``b`` at K1 + K2."""

    a: float
    b: float
    K1: int
    K2: int
    kind = "wsd"

    def __post_init__(self):
        if not (self.a >= self.b > 0):
            raise ValueError("WSD needs a >= b > 0")
        if self.K1 < 0 or self.K2 < 0 or self.K1 + self.K2 < 1:
            raise ValueError("invalid phase lengths")

    @property
    def K(self) -> int:
        return self.K1 + self.K2

    @property
    def lam(self) -> float:
        return math.log(self.a / self.b) / self.K2 if self.K2 else 0.0

    def _rates(self, k):
        k = np.asarray(k, dtype=float)
        return self.a * np.exp(-self.lam * np.maximum(k - self.K1, 0.0))

    @property
    def stable_time(self) -> float:
        return self.a * self.K1

    @property
    def decay_time(self) -> float:
        if self.K2 == 0:
            return 0.0
        if self.a == self.b:
            return self.a * self.K2
        return (self.a - self.b) * self.K2 / math.log(self.a / self.b)

    def intrinsic_time(self, tau):
        tau = np.asarray(tau, dtype=float)
        stable = self.a * np.minimum(tau, self.K1)
        over = np.maximum(tau - self.K1, 0.0)
        if self.lam == 0.0:
            return stable + self.a * over
        return stable + self.a / self.lam * -np.expm1(-self.lam * over)

    def inverse_intrinsic_time(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t > self.total_intrinsic_time() * (1 + 1e-12)):
            raise ValueError("intrinsic time beyond total")
        t1 = self.stable_time
        extra = np.maximum(t - t1, 0.0)
        if self.lam == 0.0:
            decay = extra / self.a
        else:
            decay = -np.log1p(-self.lam * extra / self.a) / self.lam
        return np.where(t <= t1, t / self.a, self.K1 + decay)

    def phi(self, tau):
        tau = np.asarray(tau, dtype=float)
        return self.a * np.exp(-self.lam * np.maximum(tau - self.K1, 0.0))

    def total_intrinsic_time(self) -> float:
        return self.stable_time + self.decay_time

    def to_dict(self):
        return {"kind": self.kind, "a": self.a, "b": self.b, "K1": self.K1, "K2": self.K2}


@dataclass(frozen=True)
class Cosine(Schedule):
    """Cosine annealing from eta_max at step 1 to rho * eta_max at step K."""

    eta_max: float
    K: int
    rho: float = 0.1
    kind = "cosine"

    def __post_init__(self):
        if self.eta_max < 0 or not 0 <= self.rho <= 1:
            raise ValueError("invalid cosine parameters")

    def _rates(self, k):
        k = np.asarray(k, dtype=float)
        frac = (k - 1) / (self.K - 1) if self.K > 1 else np.zeros_like(k)
        return self.eta_max * ((1 + self.rho) / 2 + (1 - self.rho) / 2 * np.cos(np.pi * frac))

    def to_dict(self):
        return {"kind": self.kind, "eta_max": self.eta_max, "K": self.K, "rho": self.rho}


@dataclass(frozen=True)
class MultiStep(Schedule):
    """Piecewise-constant stages: eta_k = stage_rates[i] for boundaries[i-1] < k <= boundaries[i]."""

    boundaries: tuple[int, ...]
    stage_rates: tuple[float, ...]
    kind = "multistep"

    def __post_init__(self):
        object.__setattr__(self, "boundaries", tuple(int(b) for b in self.boundaries))
        object.__setattr__(self, "stage_rates", tuple(float(r) for r in self.stage_rates))
        if len(self.boundaries) != len(self.stage_rates) or not self.boundaries:
            raise ValueError("need one rate per stage")
        if any(b1 >= b2 for b1, b2 in zip((0,) + self.boundaries, self.boundaries)):
            raise ValueError("stage boundaries must increase from above 0")
        if any(r < 0 for r in self.stage_rates):
            raise ValueError("rates must be nonnegative")
        if any(r2 > r1 for r1, r2 in zip(self.stage_rates, self.stage_rates[1:])):
            raise ValueError("multi-step rates must be non-increasing")

    @classmethod
    def eight_one_one(cls, eta_max: float, K: int) -> "MultiStep":
        """Rate divided by sqrt(10) at 80% and again at 90% of training."""
        k1, k2 = round(0.8 * K), round(0.9 * K)
        return cls((k1, k2, K), (eta_max, eta_max / math.sqrt(10), eta_max / 10))

    @property
    def K(self) -> int:
        return self.boundaries[-1]

    def _rates(self, k):
        idx = np.searchsorted(np.asarray(self.boundaries), np.asarray(k), side="left")
        return np.asarray(self.stage_rates)[idx]

    def to_dict(self):
        return {
            "kind": self.kind,
            "boundaries": list(self.boundaries),
            "stage_rates": list(self.stage_rates),
        }


@dataclass(frozen=True, eq=False)
class Tabulated(Schedule):
    """Explicit per-step rates. ``initial`` optionally pins eta_0 (default eta_1)."""

    values: np.ndarray
    initial: float | None = None
    kind = "tabulated"

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        if vals.ndim != 1 or vals.size == 0:
            raise ValueError("tabulated schedule needs a non-empty 1-d rate vector")
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise ValueError("rates must be finite and nonnegative")

    @property
    def K(self) -> int:
        return int(self.values.size)

    @property
    def eta0(self) -> float:
        return float(self.values[0]) if self.initial is None else float(self.initial)

    def _rates(self, k):
        return self.values[np.asarray(k) - 1]

    def to_dict(self):
        out = {"kind": self.kind, "values": self.values.tolist()}
        if self.initial is not None:
            out["initial"] = self.initial
        return out


@dataclass(frozen=True)
class ConstantBatch:
    B: int = 1

    def __post_init__(self):
        if int(self.B) < 1:
            raise ValueError("batch size must be >= 1")

    def sizes(self, K: int) -> np.ndarray:
        return np.full(K, int(self.B), dtype=int)

    def at(self, k):
        return np.full(np.shape(k), int(self.B), dtype=int)

    def to_dict(self):
        return {"kind": "constant", "B": int(self.B)}


@dataclass(frozen=True, eq=False)
class TabulatedBatch:
    values: np.ndarray = field(default_factory=lambda: np.ones(1, dtype=int))

    def __post_init__(self):
        vals = np.array(self.values, dtype=int)
        if vals.ndim != 1 or np.any(vals < 1):
            raise ValueError("batch sizes must be integers >= 1")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def sizes(self, K: int) -> np.ndarray:
        if K > self.values.size:
            raise IndexError("batch schedule shorter than horizon")
        return self.values[:K]

    def at(self, k):
        k = np.clip(np.asarray(k), 1, self.values.size)
        return self.values[k - 1]

    def to_dict(self):
        return {"kind": "tabulated", "values": self.values.tolist()}


BatchSchedule = ConstantBatch | TabulatedBatch


@dataclass(frozen=True)
class IntrinsicClock:
    """Intrinsic clock of a schedule discretized with step size ``h``.

    Physical time tau corresponds to tau / h optimizer steps and phi(tau) =
    eta(tau / h) / h, so T(k h) is independent of h.
    """

    schedule: Schedule
    h: float = 1.0

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError("h must be positive")

    def __call__(self, tau):
        return intrinsic_time(self, tau)


def eta_at(s: Schedule, k: int) -> float:
    return s.eta_at(k)


def intrinsic_time(c: IntrinsicClock, tau):
    """T(tau) for physical time tau >= 0."""
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0):
        raise ValueError("physical time must be nonnegative")
    out = c.schedule.intrinsic_time(tau / c.h)
    return float(out) if np.ndim(out) == 0 else out


def total_intrinsic_time(s: Schedule) -> float:
    return s.total_intrinsic_time()


def inverse_intrinsic_time(c: IntrinsicClock, t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("intrinsic time must be nonnegative")
    out = c.schedule.inverse_intrinsic_time(t) * c.h
    return float(out) if np.ndim(out) == 0 else out


def gamma_adjust(s: Schedule, b: BatchSchedule, h: float, t):
    """Effective noise intensity h phi(T^-1(t)) / b(T^-1(t)) = eta / B at that moment."""
    clock = IntrinsicClock(s, h)
    tau = np.asarray(inverse_intrinsic_time(clock, t)) / h
    eta = s.phi(tau)
    steps = np.clip(np.ceil(tau).astype(int), 1, None)
    out = eta / b.at(steps)
    return float(out) if np.ndim(out) == 0 else out


# -- construction and IO ------------------------------------------------------

def schedule_from_dict(d: dict) -> Schedule:
    d = dict(d)
    kind = d.pop("kind")
    if kind == "constant":
        return Constant(**d)
    if kind == "exp_decay":
        return ExpDecay(**d)
    if kind == "wsd":
        return WSD(**d)
    if kind == "cosine":
        return Cosine(**d)
    if kind == "multistep":
        return MultiStep(tuple(d["boundaries"]), tuple(d["stage_rates"]))
    if kind == "eight_one_one":
        return MultiStep.eight_one_one(d["eta_max"], d["K"])
    if kind == "tabulated":
        if "path" in d:
            return load_schedule_csv(d["path"])
        return Tabulated(np.asarray(d["values"]), d.get("initial"))
    raise ValueError(f"unknown schedule kind {kind!r}")


def batch_from_dict(d: dict) -> BatchSchedule:
    if d.get("kind", "constant") == "constant":
        return ConstantBatch(int(d.get("B", 1)))
    return TabulatedBatch(np.asarray(d["values"]))


def load_schedule_csv(path: str | Path) -> Tabulated:
    """Read a ``step,lr`` CSV. An optional step-0 row sets the reference rate eta_0."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"step", "lr"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"schedule CSV missing column(s): {', '.join(sorted(missing))}")
        rows = [(int(r["step"]), float(r["lr"])) for r in reader]
    initial = None
    if rows and rows[0][0] == 0:
        initial = rows.pop(0)[1]
    steps = [s for s, _ in rows]
    if steps != list(range(1, len(steps) + 1)):
        raise ValueError("schedule CSV steps must ascend from 1 without gaps")
    return Tabulated(np.array([lr for _, lr in rows]), initial)


def save_schedule_csv(path: str | Path, rates: Sequence[float], eta0: float | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr"])
        if eta0 is not None:
            w.writerow([0, repr(float(eta0))])
        for k, lr in enumerate(rates, start=1):
            w.writerow([k, repr(float(lr))])
