"""Functional scaling law: risk prediction for an arbitrary schedule.

Predicted excess risk after k steps is

    c_approx M^-(s beta) + c_full e(t_k)
        + int_0^{t_k} K(t_k - r) (c_fit e(r) + c_label sigma^2) gamma(r) dr

on the non-uniform intrinsic grid t_k = sum_{j<=k} eta_j. The convolution is
evaluated by the trapezoid rule on that grid, with gamma = eta_j / B_j at node
j (node 0 uses eta_0).
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls

from .schedules import BatchSchedule, ConstantBatch, Schedule
from .special import GContext, forgetting_kernel, risk_decay
from .task import TaskSpec, approximation_error, build_spectrum

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FSLWeights:
    c_full: float = 1.0
    c_fit: float = 1.0
    c_label: float = 1.0
    c_approx: float = 1.0

    def __post_init__(self):
        if min(self.c_full, self.c_fit, self.c_label, self.c_approx) < 0:
            raise ValueError("FSL weights must be nonnegative")


@dataclass(frozen=True, eq=False)
class FSLEvaluation:
    steps: np.ndarray
    times: np.ndarray
    lrs: np.ndarray
    full_batch: np.ndarray
    noise: np.ndarray
    approx: np.ndarray
    total: np.ndarray
    noise_fit: np.ndarray  # unweighted int K (e) gamma
    noise_label: np.ndarray  # unweighted int K gamma (times sigma^2 gives the label part)
    warnings: tuple[str, ...] = ()


@dataclass(frozen=True, eq=False)
class NoiseTerms:
    fit: np.ndarray
    label: np.ndarray


def _grid(schedule: Schedule, batch: BatchSchedule, K: int):
    rates = schedule.rates(K)
    times = np.concatenate([[0.0], np.cumsum(rates)])
    sizes = batch.sizes(K)
    gam = np.concatenate([[schedule.eta0 / sizes[0]], rates / sizes])
    return rates, times, gam


def noise_functional(
    ctx: GContext,
    s: float,
    schedule: Schedule,
    batch: BatchSchedule | None = None,
    steps=None,
    refine: int = 1,
) -> NoiseTerms:
    """Trapezoid evaluation of int_0^{t_k} K(t_k - r) {e(r), 1} gamma(r) dr at each requested step.

    Returns the fit-dependent and label-noise convolutions separately so the
    caller can weight them (the label part still needs the sigma^2 factor).
    """
    batch = batch or ConstantBatch()
    K = schedule.horizon if steps is None else int(np.max(steps))
    if K is None or K < 1:
        raise ValueError("noise functional needs a grid of at least 2 nodes")
    steps = np.arange(1, K + 1) if steps is None else np.asarray(steps, dtype=int)
    rates, times, gam = _grid(schedule, batch, K)
    if refine < 1:
        raise ValueError("refine must be a positive integer")
    if refine > 1:
        # split every step into equal sub-panels that keep the step's gamma
        frac = np.arange(1, refine + 1) / refine
        times = np.concatenate([[0.0], (times[:-1, None] + frac * rates[:, None]).ravel()])
        gam = np.concatenate([gam[:1], np.repeat(gam[1:], refine)])
        steps = steps * refine
    e_nodes = np.asarray(risk_decay(ctx, s, times))
    fit = np.empty(steps.size)
    label = np.empty(steps.size)
    for i, k in enumerate(steps):
        t = times[: k + 1]
        kern = np.asarray(forgetting_kernel(ctx, np.maximum(times[k] - t, 0.0)))
        dt = np.diff(t)
        f_label = kern * gam[: k + 1]
        f_fit = f_label * e_nodes[: k + 1]
        label[i] = 0.5 * np.sum((f_label[1:] + f_label[:-1]) * dt)
        fit[i] = 0.5 * np.sum((f_fit[1:] + f_fit[:-1]) * dt)
    return NoiseTerms(fit, label)


def scope_warnings(task: TaskSpec, beta: float | None = None) -> tuple[str, ...]:
    beta = task.beta if beta is None else beta
    out = []
    if task.s > 2 - 1 / beta:
        out.append(f"s={task.s} exceeds 2 - 1/beta; FSL guarantee does not cover this regime")
    if task.projector == "random" and task.s > 1:
        out.append("random-feature FSL is only established for s <= 1")
    return tuple(out)


def fsl_predict(
    ctx: GContext,
    task: TaskSpec,
    schedule: Schedule,
    batch: BatchSchedule | None = None,
    weights: FSLWeights | None = None,
    steps=None,
    refine: int = 1,
) -> FSLEvaluation:
    """Evaluate the FSL at the requested steps (default: every step of the horizon).

    ``refine`` subdivides each step of the convolution grid, for convergence checks.
    """
    batch = batch or ConstantBatch()
    weights = weights or FSLWeights()
    K = schedule.horizon if steps is None else int(np.max(steps))
    steps = np.arange(1, K + 1) if steps is None else np.asarray(steps, dtype=int)
    warns = scope_warnings(task, ctx.beta)
    for w in warns:
        warnings.warn(w, stacklevel=2)
    rates, times, _ = _grid(schedule, batch, K)
    tk = times[steps]
    full = weights.c_full * np.asarray(risk_decay(ctx, task.s, tk))
    approx_val = 0.0 if math.isinf(ctx.M) else float(ctx.M) ** (-task.s * ctx.beta)
    approx = np.full(steps.size, weights.c_approx * approx_val)
    nt = noise_functional(ctx, task.s, schedule, batch, steps, refine)
    noise = weights.c_fit * nt.fit + weights.c_label * task.sigma**2 * nt.label
    total = approx + full + noise
    return FSLEvaluation(steps, tk, rates[steps - 1], full, noise, approx, total, nt.fit, nt.label, warns)


def gradient_flow_risk(task: TaskSpec, t):
    """1/2 sum_{j<=M} lambda_j theta_j^2 exp(-2 lambda_j t) + approximation error (top-M only)."""
    if task.projector != "top_m":
        raise ValueError("gradient-flow closed form needs the top-M projector")
    inst = build_spectrum(task)
    lam = inst.lambdas[: task.M]
    mass = lam * inst.thetas[: task.M] ** 2
    t_arr = np.asarray(t, dtype=float)
    out = 0.5 * (np.exp(-2.0 * np.multiply.outer(t_arr, lam)) @ mass) + approximation_error(task)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True, eq=False)
class ThreeConstantFit:
    """Least-squares fit of c1 e(T) + c2 N_fit + c3 sigma^2 N_label to a risk curve."""

    c: np.ndarray
    prediction: np.ndarray
    r2_log: float
    mse: float


def fit_three_constant(
    ctx: GContext,
    task: TaskSpec,
    schedule: Schedule,
    steps,
    risks,
    batch: BatchSchedule | None = None,
) -> ThreeConstantFit:
    """Fit the three FSL constants to an observed excess-risk trajectory.

    Ordinary least squares on the linear-scale risk, restricted to nonnegative
    constants; quality is reported as R^2 of log risk.
    """
    steps = np.asarray(steps, dtype=int)
    risks = np.asarray(risks, dtype=float)
    ev = fsl_predict(ctx, task, schedule, batch, FSLWeights(1, 1, 1, 0), steps)
    X = np.column_stack([ev.full_batch, ev.noise_fit, task.sigma**2 * ev.noise_label])
    # equal column scaling keeps nnls well conditioned
    scale = np.linalg.norm(X, axis=0)
    scale[scale == 0] = 1.0
    coef, _ = nnls(X / scale, risks)
    coef = coef / scale
    pred = X @ coef
    return ThreeConstantFit(coef, pred, r2_log(risks, pred), float(np.mean((risks - pred) ** 2)))


def r2_log(observed, predicted) -> float:
    """Coefficient of determination between log curves."""
    y = np.log(np.asarray(observed, dtype=float))
    with np.errstate(divide="ignore", invalid="ignore"):
        yhat = np.log(np.asarray(predicted, dtype=float))
    if not np.all(np.isfinite(yhat)):
        return -math.inf
    ss_res = np.sum((y - yhat) ** 2)
    ss_tot = np.sum((y - y.mean()) ** 2)
    return float(1.0 - ss_res / ss_tot) if ss_tot > 0 else float("nan")
