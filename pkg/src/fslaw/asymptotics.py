"""Closed-form scaling-law calculators for the constant, exp-decay and WSD families.

Budgets enter as power laws with an optional logarithmic factor,
X^p (log X)^q, stored as ``PowerLaw(p, q)``. ``(X / log X)^p`` is therefore
``PowerLaw(p, -p)``. All hidden constants are set to 1.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .schedules import WSD, Constant, ExpDecay, Schedule

KINDS = ("constant", "exp_decay", "wsd")


@dataclass(frozen=True)
class Regime:
    label: str  # "Easy" or "Hard"
    threshold: float

    @property
    def easy(self) -> bool:
        return self.label == "Easy"


def classify_regime(s: float, beta: float) -> Regime:
    """Easy iff s >= 1 - 1/beta (ties count as easy)."""
    if beta <= 1 or s <= 0:
        raise ValueError("need beta > 1 and s > 0")
    thr = 1.0 - 1.0 / beta
    return Regime("Easy" if s >= thr else "Hard", thr)


@dataclass(frozen=True)
class PowerLaw:
    exponent: float
    log_exponent: float = 0.0
    relation: str = "~"  # ">~" marks a lower bound

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return x**self.exponent * np.log(x) ** self.log_exponent

    @classmethod
    def over_log(cls, p: float, relation: str = "~") -> "PowerLaw":
        """(X / log X)^p."""
        return cls(p, -p, relation)


@dataclass(frozen=True)
class ScalingPrediction:
    """Optimal risk and hyperparameters as power laws of the budget.

    ``model_size`` is None when the optimum is M = infinity; ``decay_fraction``
    is only set for WSD.
    """

    kind: str
    budget: str  # "D" or "C"
    regime: Regime
    risk: PowerLaw
    gamma: PowerLaw
    model_size: PowerLaw | None
    data: PowerLaw | None = None
    decay_fraction: PowerLaw | None = None
    notes: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        vals = [self.risk.exponent, self.risk.log_exponent, self.gamma.exponent]
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("non-finite exponent")
        if not self.risk.exponent < 0:
            raise ValueError("risk exponent must be negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["regime"] = {"label": self.regime.label, "threshold": self.regime.threshold}
        return d


def _check_kind(kind: str) -> None:
    if kind not in KINDS:
        raise ValueError(f"unknown schedule family {kind!r}; expected one of {KINDS}")


def data_optimal(kind: str, s: float, beta: float) -> ScalingPrediction:
    """Optimal excess risk and effective learning rate at fixed data D = BK."""
    _check_kind(kind)
    reg = classify_regime(s, beta)
    a = s * beta
    if kind == "constant":
        return ScalingPrediction(
            kind, "D", reg,
            risk=PowerLaw(-s / (s + 1)),
            gamma=PowerLaw(-s / (s + 1)),
            model_size=PowerLaw(1 / ((1 + s) * beta), relation=">~"),
        )
    if kind == "exp_decay":
        if reg.easy:
            return ScalingPrediction(
                kind, "D", reg,
                risk=PowerLaw.over_log(-a / (1 + a)),
                gamma=PowerLaw.over_log(-(1 + a - beta) / (1 + a)),
                model_size=None,
            )
        return ScalingPrediction(kind, "D", reg, risk=PowerLaw.over_log(-s), gamma=PowerLaw(0.0), model_size=None)
    if reg.easy:
        return ScalingPrediction(
            kind, "D", reg,
            risk=PowerLaw(-a / (1 + a), (a - s) / (1 + a)),
            gamma=PowerLaw(-(1 + a - beta) / (1 + a), (beta - 1) / (1 + a)),
            model_size=None,
            decay_fraction=PowerLaw(0.0),
            notes=("r_opt is an interior constant in (0, 1)",),
        )
    return ScalingPrediction(
        kind, "D", reg,
        risk=PowerLaw(-s),
        gamma=PowerLaw(0.0),
        model_size=None,
        decay_fraction=PowerLaw(-(beta - 1 - a) / (beta - 1), 1.0, ">~"),
    )


def compute_optimal(kind: str, s: float, beta: float) -> ScalingPrediction:
    """Optimal excess risk and allocation at fixed compute C = MD."""
    _check_kind(kind)
    reg = classify_regime(s, beta)
    a = s * beta
    if kind == "constant":
        den = 1 + (s + 1) * beta
        return ScalingPrediction(
            kind, "C", reg,
            risk=PowerLaw(-a / (1 + a + beta)),
            gamma=PowerLaw(-a / den),
            model_size=PowerLaw(1 / den),
            data=PowerLaw((s + 1) * beta / den),
        )
    decay = None
    if kind == "wsd":
        decay = PowerLaw(0.0) if reg.easy else PowerLaw(-(beta - 1 - a) / (beta - 1), 1.0, ">~")
    if reg.easy:
        risk = (
            PowerLaw.over_log(-a / (2 + a)) if kind == "exp_decay"
            else PowerLaw(-a / (2 + a), (a - s) / (2 + a))
        )
        return ScalingPrediction(
            kind, "C", reg,
            risk=risk,
            gamma=PowerLaw.over_log(-(1 + a - beta) / (2 + a)),
            model_size=PowerLaw.over_log(1 / (2 + a)),
            data=PowerLaw((1 + a) / (2 + a), 1 / (2 + a)),
            decay_fraction=decay,
        )
    if kind == "exp_decay":
        return ScalingPrediction(
            kind, "C", reg,
            risk=PowerLaw.over_log(-a / (1 + beta)),
            gamma=PowerLaw(0.0),
            model_size=PowerLaw.over_log(1 / (1 + beta)),
            data=PowerLaw(beta / (1 + beta), 1 / (1 + beta)),
        )
    return ScalingPrediction(
        kind, "C", reg,
        risk=PowerLaw(-a / (1 + beta)),
        gamma=PowerLaw(0.0),
        model_size=PowerLaw(1 / (1 + beta)),
        data=PowerLaw(beta / (1 + beta)),
        decay_fraction=decay,
    )


TABLE1_COLUMNS = tuple(
    f"{kind}_{budget}_{part}"
    for kind in KINDS
    for budget in ("data", "compute")
    for part in ("exp", "log")
)


def table1_row(s: float, beta: float) -> dict:
    """Risk exponents of all six (family, budget) cells at one (s, beta)."""
    row = {"s": s, "beta": beta, "regime": classify_regime(s, beta).label}
    for kind in KINDS:
        for budget, fn in (("data", data_optimal), ("compute", compute_optimal)):
            r = fn(kind, s, beta).risk
            row[f"{kind}_{budget}_exp"] = r.exponent
            row[f"{kind}_{budget}_log"] = r.log_exponent
    return row


def table1(s_values, beta_values) -> list[dict]:
    return [table1_row(float(s), float(b)) for b in beta_values for s in s_values]


@dataclass(frozen=True)
class ClosedFormRisk:
    total: float
    approx: float
    full_batch: float
    noise: float
    warnings: tuple[str, ...] = ()


def risk_formula(
    schedule: Schedule,
    s: float,
    beta: float,
    M: float = math.inf,
    B: float = 1.0,
    sigma: float = 1.0,
    include_fit_noise: bool = True,
) -> ClosedFormRisk:
    """Closed-form final-step excess risk for a constant, exp-decay or WSD schedule.

    ``include_fit_noise`` only affects the constant family, whose formula carries
    the extra (eta K)^-(2 - 1/beta) noise contribution.
    """
    warns = []
    if not 0 < s <= 2 - 1 / beta:
        warns.append(f"s={s} outside (0, 2 - 1/beta]; closed form not covered")
        warnings.warn(warns[-1], stacklevel=2)
    approx = 0.0 if math.isinf(M) else float(M) ** (-s * beta)

    if isinstance(schedule, Constant):
        if schedule.K is None:
            raise ValueError("constant schedule needs a horizon")
        T = schedule.eta * schedule.K
        fit = T ** (-(2 - 1 / beta)) if include_fit_noise else 0.0
        noise = schedule.eta / B * (sigma**2 + fit)
        return ClosedFormRisk(approx + T**-s + noise, approx, T**-s, noise, tuple(warns))
    if isinstance(schedule, ExpDecay):
        T = schedule.total_intrinsic_time()
        decay_T = T
    elif isinstance(schedule, WSD):
        T = schedule.stable_time + schedule.decay_time
        decay_T = schedule.decay_time
    else:
        raise TypeError(f"no closed form for schedule kind {schedule.kind!r}")
    a, b = schedule.a, schedule.b
    tail = 0.0 if decay_T == 0 else (a - b) * min(M, decay_T ** (1 / beta)) / (B * decay_T)
    noise = sigma**2 * (b / B + tail)
    return ClosedFormRisk(approx + T**-s + noise, approx, T**-s, noise, tuple(warns))


def sweep_peak_rate(kind: str, s: float, beta: float, D: float, base: float = 0.05) -> float:
    """eta_max = base * D^-r, with r the data-optimal learning-rate exponent (logs dropped)."""
    return base * D ** data_optimal(kind, s, beta).gamma.exponent


def sweep_schedule(
    kind: str, s: float, beta: float, D: int, base: float = 0.05, decay_fraction: float = 0.2
) -> Schedule:
    """Schedule of the data-optimal sweep at B = 1 (K = D); decay families end at a / D."""
    _check_kind(kind)
    D = int(D)
    a = sweep_peak_rate(kind, s, beta, D, base)
    if kind == "constant":
        return Constant(a, D)
    if kind == "exp_decay":
        return ExpDecay(a, a / D, D)
    K2 = max(1, int(round(decay_fraction * D)))
    return WSD(a, a / D, D - K2, K2)


def loglog_slope(x, y) -> float:
    """Least-squares slope of log y against log x."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two points")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


__all__ = [
    "KINDS", "Regime", "classify_regime", "PowerLaw", "ScalingPrediction", "data_optimal",
    "compute_optimal", "table1", "table1_row", "TABLE1_COLUMNS", "ClosedFormRisk", "risk_formula",
    "sweep_peak_rate", "sweep_schedule", "loglog_slope",
]
