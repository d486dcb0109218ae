"""Practical discrete FSL ansatz and its nine-parameter fit.

    R_k = L0 + c1 T(k)^-s + c2 M^-(s beta)
          - c3 sum_{i=1}^k (eta_{i-1} - eta_i)(c4 + T(i)^-s)(1 - (1 + c5 (T(k) - T(i)))^-gamma)

with T(k) = eta_1 + ... + eta_k. Only indices where the rate changes enter the
sum, so piecewise-constant schedules are cheap; the general cost is
O(K * checkpoints).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .errors import ConfigError, NumericError
from .fsl import r2_log
from .schedules import Schedule, Tabulated

log = logging.getLogger(__name__)

PARAM_NAMES = ("L0", "c1", "c2", "c3", "c4", "c5", "s", "beta_eff", "gamma_exp")
EXPONENTS = ("s", "beta_eff", "gamma_exp")
HUBER_DELTA = 1e-3
BARRIER = 1e10
_CHUNK = 2_000_000  # matrix entries per checkpoint block


@dataclass(frozen=True)
class AnsatzParams:
    L0: float
    c1: float
    c2: float
    c3: float
    c4: float
    c5: float
    s: float
    beta_eff: float
    gamma_exp: float

    def __post_init__(self):
        if self.L0 < 0 or self.c2 < 0 or self.c4 < 0:
            raise ValueError("L0, c2 and c4 must be nonnegative")
        for name in ("c1", "c3", "c5", "s", "gamma_exp", "beta_eff"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def vector(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PARAM_NAMES], dtype=float)

    @classmethod
    def from_vector(cls, v) -> "AnsatzParams":
        return cls(**{n: float(x) for n, x in zip(PARAM_NAMES, v)})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class LossCurve:
    """Per-step learning rates and losses; the fit ignores steps before ``warmup_trim``."""

    steps: np.ndarray
    lrs: np.ndarray
    losses: np.ndarray
    warmup_trim: int = 1

    def __post_init__(self):
        steps = np.asarray(self.steps, dtype=int)
        lrs = np.asarray(self.lrs, dtype=float)
        losses = np.asarray(self.losses, dtype=float)
        if not (steps.shape == lrs.shape == losses.shape) or steps.ndim != 1:
            raise ConfigError("steps, lrs and losses must be equal-length vectors")
        if steps.size and (steps[0] < 1 or np.any(np.diff(steps) <= 0)):
            raise ConfigError("steps must be positive and strictly increasing")
        if np.any(losses <= 0) or not np.all(np.isfinite(losses)):
            raise ConfigError("losses must be finite and positive")
        if np.any(lrs < 0):
            raise ConfigError("learning rates must be nonnegative")
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "lrs", lrs)
        object.__setattr__(self, "losses", losses)

    @property
    def contiguous(self) -> bool:
        return bool(self.steps.size) and self.steps[0] == 1 and np.all(np.diff(self.steps) == 1)

    def schedule(self) -> Tabulated:
        """Per-step schedule implied by the curve.

        With gaps, each logged rate is held over the steps since the previous
        record, which is exact for piecewise-constant schedules logged at their
        change points and an approximation otherwise.
        """
        if self.contiguous:
            return Tabulated(self.lrs.copy())
        log.warning("curve has gaps; holding each logged rate back to the previous record")
        reps = np.diff(np.concatenate([[0], self.steps]))
        return Tabulated(np.repeat(self.lrs, reps))

    def fit_mask(self, every: int | None = None) -> np.ndarray:
        keep = self.steps >= self.warmup_trim
        if every is None:
            every = 10 if self.steps[-1] > 5000 else 1
        if every > 1:
            idx = np.flatnonzero(keep)
            sub = np.zeros_like(keep)
            sub[idx[::every]] = True
            sub[idx[-1]] = True
            keep = sub
        return keep


def load_loss_curve(path: str | Path, warmup_trim: int = 1) -> LossCurve:
    """Read ``step,lr,loss``; ``mean_risk`` (simulator) or ``pred_risk`` (FSL) stand in for ``loss``."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        value = next((c for c in ("loss", "mean_risk", "pred_risk") if c in cols), None)
        missing = [c for c in ("step", "lr") if c not in cols] + (["loss"] if value is None else [])
        if missing:
            raise ConfigError(f"{path}: missing column(s) {', '.join(missing)}")
        try:
            rows = [(int(r["step"]), float(r["lr"]), float(r[value])) for r in reader]
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: malformed row ({exc})") from exc
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    arr = np.array(rows, dtype=float)
    return LossCurve(arr[:, 0].astype(int), arr[:, 1], arr[:, 2], warmup_trim)


def save_loss_curve(curve: LossCurve, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "loss"])
        for k, lr, loss in zip(curve.steps, curve.lrs, curve.losses):
            w.writerow([int(k), repr(float(lr)), repr(float(loss))])


@dataclass(frozen=True, eq=False)
class _Grid:
    T: np.ndarray  # T(1..K)
    idx: np.ndarray  # 0-based positions i-1 with a rate change
    drop: np.ndarray  # eta_{i-1} - eta_i at those positions


def _grid(schedule: Schedule, K: int) -> _Grid:
    rates = schedule.rates(K)
    T = np.cumsum(rates)
    if np.any(T <= 0):
        raise NumericError("intrinsic time must be positive at every step")
    drop = np.concatenate([[schedule.eta0], rates[:-1]]) - rates
    idx = np.flatnonzero(drop != 0)
    return _Grid(T, idx, drop[idx])


def _ansatz(p: np.ndarray, grid: _Grid, ck: np.ndarray, M: float | None, jac: bool):
    """Predictions at 0-based checkpoints ``ck`` and, optionally, dR/dp (len(ck), 9)."""
    L0, c1, c2, c3, c4, c5, s, beta, gam = p
    Tk = grid.T[ck]
    lnTk = np.log(Tk)
    A = np.exp(-s * lnTk)
    has_m = M is not None
    mterm = float(M) ** (-s * beta) if has_m else 0.0
    lnM = math.log(M) if has_m else 0.0

    Ti = grid.T[grid.idx]
    lnTi = np.log(Ti)
    Ai = np.exp(-s * lnTi)
    Q = c4 + Ai
    S = np.zeros(ck.size)
    if jac:
        dS = np.zeros((ck.size, 4))  # d/dc4, d/dc5, d/dgamma, d/ds
    rows = max(1, _CHUNK // max(1, grid.idx.size))
    for a in range(0, ck.size, rows):
        b = min(ck.size, a + rows)
        live = grid.idx[None, :] <= ck[a:b, None]
        dt = np.where(live, Tk[a:b, None] - Ti[None, :], 0.0)
        base = 1.0 + c5 * dt
        powg = np.exp(-gam * np.log(base))
        F = np.where(live, 1.0 - powg, 0.0)
        S[a:b] = F @ (grid.drop * Q)
        if jac:
            dS[a:b, 0] = F @ grid.drop
            dS[a:b, 1] = np.where(live, gam * dt * powg / base, 0.0) @ (grid.drop * Q)
            dS[a:b, 2] = np.where(live, powg * np.log(base), 0.0) @ (grid.drop * Q)
            dS[a:b, 3] = F @ (grid.drop * (-lnTi * Ai))
    R = L0 + c1 * A + c2 * mterm - c3 * S
    if not jac:
        return R, None
    J = np.empty((ck.size, 9))
    J[:, 0] = 1.0
    J[:, 1] = A
    J[:, 2] = mterm
    J[:, 3] = -S
    J[:, 4] = -c3 * dS[:, 0]
    J[:, 5] = -c3 * dS[:, 1]
    J[:, 6] = -c1 * A * lnTk - c2 * mterm * beta * lnM - c3 * dS[:, 3]
    J[:, 7] = -c2 * mterm * s * lnM
    J[:, 8] = -c3 * dS[:, 2]
    return R, J


def _checkpoints(schedule: Schedule, checkpoints) -> tuple[np.ndarray, int]:
    ck = np.asarray(checkpoints, dtype=int)
    if ck.size == 0:
        raise ConfigError("no checkpoints requested")
    K = schedule.horizon
    if np.any(ck < 1) or (K is not None and np.any(ck > K)):
        raise ConfigError("checkpoints must lie within the schedule horizon")
    return ck - 1, int(ck.max())


def ansatz_eval(p: AnsatzParams, schedule: Schedule, checkpoints, M: float | None = None) -> np.ndarray:
    """Ansatz loss at each checkpoint step (1-based); the M term is omitted when M is None."""
    ck, K = _checkpoints(schedule, checkpoints)
    R, _ = _ansatz(p.vector(), _grid(schedule, K), ck, M, jac=False)
    return R


def huber(r, delta: float = HUBER_DELTA):
    r = np.abs(np.asarray(r, dtype=float))
    return np.where(r <= delta, 0.5 * r**2, delta * (r - 0.5 * delta))


def huber_grad(r, delta: float = HUBER_DELTA):
    r = np.asarray(r, dtype=float)
    return np.clip(r, -delta, delta)


@dataclass(frozen=True)
class Objective:
    value: float
    barrier: bool = False


class _Problem:
    """Huber objective on log residuals, in log-parameter coordinates."""

    def __init__(self, curve: LossCurve, schedule: Schedule, M, every, delta):
        mask = curve.fit_mask(every)
        if mask.sum() < 20:
            raise ConfigError(f"need at least 20 checkpoints after trim, got {int(mask.sum())}")
        self.steps = curve.steps[mask]
        self.target = np.log(curve.losses[mask])
        self.ck, K = _checkpoints(schedule, self.steps)
        self.grid = _grid(schedule, K)
        self.M = M
        self.delta = delta

    def predict(self, p):
        return _ansatz(p, self.grid, self.ck, self.M, jac=False)[0]

    def __call__(self, p, grad: bool = True):
        """(objective, gradient in raw parameters or None)."""
        R, J = _ansatz(p, self.grid, self.ck, self.M, jac=grad)
        if np.any(R <= 0) or not np.all(np.isfinite(R)):
            return Objective(BARRIER, True), None
        r = np.log(R) - self.target
        val = float(np.sum(huber(r, self.delta)))
        if not grad:
            return Objective(val), None
        return Objective(val), (huber_grad(r, self.delta) / R) @ J


def huber_objective(
    p: AnsatzParams, curve: LossCurve, schedule: Schedule | None = None, M: float | None = None,
    every: int | None = None, delta: float = HUBER_DELTA,
) -> Objective:
    prob = _Problem(curve, schedule or curve.schedule(), M, every, delta)
    return prob(p.vector(), grad=False)[0]


def huber_gradient(
    p: AnsatzParams, curve: LossCurve, schedule: Schedule | None = None, M: float | None = None,
    every: int | None = None, delta: float = HUBER_DELTA,
) -> np.ndarray:
    """Gradient of the Huber objective with respect to the raw (not log) parameters."""
    prob = _Problem(curve, schedule or curve.schedule(), M, every, delta)
    obj, g = prob(p.vector())
    if obj.barrier:
        raise NumericError("ansatz prediction is nonpositive; gradient undefined")
    return g


@dataclass(frozen=True)
class FitOptions:
    steps: int = 10_000
    lr_exponents: float = 5e-2
    lr_coefficients: float = 5e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    every: int | None = None  # checkpoint stride; None = 10 when K > 5000
    delta: float = HUBER_DELTA
    polish: bool = True  # L-BFGS refinement after the Adam phase


@dataclass(frozen=True, eq=False)
class FitReport:
    params: AnsatzParams
    objective: float
    steps: np.ndarray
    residuals: np.ndarray  # log prediction - log loss at fitted checkpoints
    r2_log: float
    iterations: int
    M: float | None = None
    history: np.ndarray = field(default_factory=lambda: np.empty(0))

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "objective": self.objective,
            "r2_log": self.r2_log,
            "iterations": self.iterations,
            "M": self.M,
            "steps": self.steps.tolist(),
            "residuals": self.residuals.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitReport":
        return cls(
            AnsatzParams(**d["params"]), float(d["objective"]), np.asarray(d.get("steps", []), dtype=int),
            np.asarray(d.get("residuals", []), dtype=float), float(d.get("r2_log", float("nan"))),
            int(d.get("iterations", 0)), d.get("M"),
        )


def default_init(curve: LossCurve, M: float | None = None) -> AnsatzParams:
    lo, hi = float(curve.losses.min()), float(curve.losses.max())
    span = max(hi - lo, 1e-3 * hi)
    return AnsatzParams(
        L0=0.9 * lo, c1=span, c2=span if M is not None else 0.0, c3=1.0, c4=0.1, c5=1.0,
        s=0.5, beta_eff=1.5, gamma_exp=0.5,
    )


def _free_mask(p: AnsatzParams, M) -> np.ndarray:
    free = np.ones(9, dtype=bool)
    if M is None:
        free[PARAM_NAMES.index("c2")] = False
        free[PARAM_NAMES.index("beta_eff")] = False
    return free


def _log_params(p: AnsatzParams, free: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    v = p.vector()
    bad = free & (v <= 0)
    if np.any(bad):
        names = [PARAM_NAMES[i] for i in np.flatnonzero(bad)]
        raise ConfigError(f"initial value must be positive for fitted parameter(s) {names}")
    # frozen zeros get a placeholder; they never change and their gradient is dropped
    return np.log(np.where(v > 0, v, 1.0)), v


def fit(
    curve: LossCurve,
    init: AnsatzParams | None = None,
    options: FitOptions | None = None,
    schedule: Schedule | None = None,
    M: float | None = None,
) -> FitReport:
    """Adam on log-parameters with separate rates for exponents and coefficients.

    Steps that would leave the domain (a nonpositive prediction) are retried
    with half the step size; after the Adam phase an optional L-BFGS pass
    refines the same objective. Deterministic for fixed inputs.
    """
    opt = options or FitOptions()
    schedule = schedule or curve.schedule()
    init = init or default_init(curve, M)
    prob = _Problem(curve, schedule, M, opt.every, opt.delta)
    free = _free_mask(init, M)
    z, raw = _log_params(init, free)
    fixed = ~free

    def restore(zz):
        p = np.exp(zz)
        p[fixed] = raw[fixed]
        return p

    def evaluate(zz):
        # line-search probes may overflow; they land on the barrier below
        with np.errstate(over="ignore", invalid="ignore"):
            p = restore(zz)
            obj, g = prob(p)
        if obj.barrier:
            return BARRIER, None
        g = g * p
        g[fixed] = 0.0
        bad = ~np.isfinite(g)
        if np.any(bad):
            raise NumericError(f"non-finite gradient for {PARAM_NAMES[int(np.flatnonzero(bad)[0])]}")
        return obj.value, g

    f, g = evaluate(z)
    if g is None:
        raise NumericError("initial parameters give a nonpositive prediction")
    lr = np.where([n in EXPONENTS for n in PARAM_NAMES], opt.lr_exponents, opt.lr_coefficients)
    m = np.zeros(9)
    v = np.zeros(9)
    b1, b2 = opt.betas
    history = np.empty(opt.steps)
    best_z, best_f = z.copy(), f
    for it in range(1, opt.steps + 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        step = lr * (m / (1 - b1**it)) / (np.sqrt(v / (1 - b2**it)) + opt.eps)
        scale = 1.0
        for _ in range(30):
            f_new, g_new = evaluate(z - scale * step)
            if g_new is not None:
                break
            scale *= 0.5
        else:
            raise NumericError("optimizer cannot leave the barrier region")
        z = z - scale * step
        f, g = f_new, g_new
        history[it - 1] = f
        if f < best_f:
            best_z, best_f = z.copy(), f
    z, f = best_z, best_f

    iterations = opt.steps
    if opt.polish and free.any():
        zf = z[free]

        def fun(x):
            zz = z.copy()
            zz[free] = x
            val, grad = evaluate(zz)
            if grad is None:
                return BARRIER, np.zeros_like(x)
            return val, grad[free]

        res = minimize(fun, zf, jac=True, method="L-BFGS-B", options={"maxiter": 2000, "ftol": 1e-16, "gtol": 1e-14})
        if res.fun < f:
            z[free] = res.x
            f = float(res.fun)
        iterations += int(res.nit)

    p = restore(z)
    pred = prob.predict(p)
    resid = np.log(pred) - prob.target
    return FitReport(
        AnsatzParams.from_vector(p), float(f), prob.steps, resid,
        r2_log(np.exp(prob.target), pred), iterations, M, history,
    )


def predict_unseen(report: FitReport, schedule: Schedule, checkpoints, M: float | None = None) -> np.ndarray:
    """Ansatz prediction for a new schedule with the fitted parameters frozen."""
    return ansatz_eval(report.params, schedule, checkpoints, report.M if M is None else M)
