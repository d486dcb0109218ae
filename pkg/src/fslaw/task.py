"""Teacher-student kernel regression in eigencoordinates.

Features are sampled directly as phi ~ N(0, diag(lambda)); the student sees
W phi with W either the top-M coordinate selector or a Gaussian random
projection. All proportionality constants are 1:
lambda_j = j^-beta and theta*_j = j^-1/2 lambda_j^((s-1)/2), so the
per-mode initial risk lambda_j theta*_j^2 equals j^-(s beta + 1).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import eigh


@dataclass(frozen=True)
class TaskSpec:
    s: float
    beta: float
    M: int
    N: float = 128
    sigma: float = 0.0
    projector: str = "top_m"  # or "random"
    seed: int = 0

    def __post_init__(self):
        if self.beta <= 1:
            raise ValueError("beta must exceed 1")
        if self.s <= 0:
            raise ValueError("s must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.M < 1 or self.M > self.N:
            raise ValueError("need 1 <= M <= N")
        if self.projector not in ("top_m", "random"):
            raise ValueError(f"unknown projector {self.projector!r}")

    @property
    def finite(self) -> bool:
        return not math.isinf(self.N)

    def to_dict(self) -> dict:
        d = asdict(self)
        if not self.finite:
            d["N"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        if d.get("N") in ("inf", "infinity", None) and "N" in d:
            d["N"] = math.inf
        return cls(**d)


def load_task(path: str | Path) -> TaskSpec:
    return TaskSpec.from_dict(json.loads(Path(path).read_text()))


def save_task(task: TaskSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(task.to_dict(), indent=2))


@dataclass(frozen=True, eq=False)
class SpectrumInstance:
    task: TaskSpec
    lambdas: np.ndarray
    thetas: np.ndarray
    W: np.ndarray | None  # None means top-M selector

    @property
    def M(self) -> int:
        return self.task.M

    @property
    def N(self) -> int:
        return self.lambdas.size

    def projector(self) -> np.ndarray:
        """Dense M x N projection matrix."""
        if self.W is not None:
            return self.W
        P = np.zeros((self.M, self.N))
        P[np.arange(self.M), np.arange(self.M)] = 1.0
        return P

    def lift(self, v: np.ndarray) -> np.ndarray:
        """W^T v, the student's weight expressed in feature coordinates."""
        v = np.asarray(v, dtype=float)
        if self.W is not None:
            return v @ self.W
        out = np.zeros(v.shape[:-1] + (self.N,))
        out[..., : self.M] = v
        return out


@dataclass(frozen=True)
class RiskReport:
    excess: float
    population: float


def build_spectrum(task: TaskSpec) -> SpectrumInstance:
    if not task.finite:
        if task.projector == "random":
            raise ValueError("random projector requires finite N")
        raise ValueError("explicit spectra need finite N; use GContext with M=inf for closed forms")
    j = np.arange(1, int(task.N) + 1, dtype=float)
    lambdas = j ** (-task.beta)
    thetas = j ** (-(1 + task.s * task.beta - task.beta) / 2)
    W = None
    if task.projector == "random":
        rng = np.random.default_rng(task.seed)
        W = rng.normal(0.0, 1.0 / math.sqrt(task.M), size=(task.M, int(task.N)))
    return SpectrumInstance(task, lambdas, thetas, W)


def excess_risk(inst: SpectrumInstance, v) -> RiskReport:
    """E(v) = 1/2 sum_j lambda_j ((W^T v)_j - theta*_j)^2 and R(v) = E(v) + sigma^2/2."""
    v = np.asarray(v, dtype=float)
    if v.shape != (inst.M,):
        raise ValueError(f"expected weights of length {inst.M}, got shape {v.shape}")
    if inst.W is None:
        M = inst.M
        learned = 0.5 * np.sum(inst.lambdas[:M] * (v - inst.thetas[:M]) ** 2)
        excess = float(learned) + approximation_error(inst.task)
    else:
        w = inst.lift(v) - inst.thetas
        excess = float(0.5 * np.sum(inst.lambdas * w**2))
    return RiskReport(excess, excess + inst.task.sigma**2 / 2)


def batch_excess_risk(inst: SpectrumInstance, V: np.ndarray) -> np.ndarray:
    """Excess risk for each row of a (runs, M) weight matrix."""
    if inst.W is None:
        M = inst.M
        d = V - inst.thetas[:M]
        return 0.5 * (d**2 @ inst.lambdas[:M]) + approximation_error(inst.task)
    w = V @ inst.W - inst.thetas
    return 0.5 * (w**2 @ inst.lambdas)


def approximation_error(task: TaskSpec) -> float:
    """1/2 sum_{M<j<=N} j^-(s beta + 1), the risk of the unlearned sub-tasks."""
    if task.M >= task.N:
        return 0.0
    p = task.s * task.beta + 1
    if task.finite:
        j = np.arange(task.M + 1, int(task.N) + 1, dtype=float)
        return float(0.5 * np.sum(j[::-1] ** (-p)))
    from scipy.special import zeta

    return float(0.5 * zeta(p, task.M + 1))


@dataclass(frozen=True, eq=False)
class NoiseCovarianceReport:
    """Monte-Carlo gradient-noise covariance against its Gaussian closed form."""

    sigma_mc: np.ndarray
    sigma_exact: np.ndarray
    stderr: np.ndarray
    min_ratio: float
    max_ratio: float
    excess: float
    samples: int
    low_sample_warning: bool


def noise_covariance_exact(inst: SpectrumInstance, v) -> np.ndarray:
    """Per-sample gradient covariance for Gaussian features.

    With w = W^T v - theta*, the Gaussian fourth moment gives
    Sigma(v) = (w^T H w + sigma^2) W H W^T + W H w w^T H W^T.
    """
    W = inst.projector()
    w = inst.lift(np.asarray(v, dtype=float)) - inst.thetas
    H = inst.lambdas
    WH = W * H
    base = WH @ W.T
    Hw = WH @ w
    return (float(w @ (H * w)) + inst.task.sigma**2) * base + np.outer(Hw, Hw)


def noise_covariance_check(inst: SpectrumInstance, v, samples: int, seed: int = 0) -> NoiseCovarianceReport:
    """Estimate Sigma(v) from per-sample gradients and bracket it against (2E + sigma^2) W H W^T.

    Sandwich bounds hold when every generalized eigenvalue lies in
    [C1, C2]; for Gaussian features the exact bracket is [1, 1 + 2E/(2E + sigma^2)].
    """
    low = samples < 100
    if low:
        warnings.warn("fewer than 100 samples; covariance estimate is unreliable", stacklevel=2)
    v = np.asarray(v, dtype=float)
    rng = np.random.default_rng(seed)
    W = inst.projector()
    phi = rng.standard_normal((samples, inst.N)) * np.sqrt(inst.lambdas)
    eps = inst.task.sigma * rng.standard_normal(samples)
    w = inst.lift(v) - inst.thetas
    resid = phi @ w - eps
    feats = phi @ W.T
    grads = feats * resid[:, None]
    mean_grad = (W * inst.lambdas) @ w
    centered = grads - mean_grad
    outer = np.einsum("ni,nj->nij", centered, centered)
    sigma_mc = outer.mean(axis=0)
    stderr = outer.std(axis=0, ddof=1) / math.sqrt(samples)

    E = excess_risk(inst, v).excess
    ref = (2 * E + inst.task.sigma**2) * ((W * inst.lambdas) @ W.T)
    if 2 * E + inst.task.sigma**2 > 0:
        ev = eigh(sigma_mc, ref, eigvals_only=True)
        lo, hi = float(ev.min()), float(ev.max())
    else:
        lo = hi = 0.0
    return NoiseCovarianceReport(
        sigma_mc, noise_covariance_exact(inst, v), stderr, lo, hi, E, samples, low
    )
