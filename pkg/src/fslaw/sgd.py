"""Online minibatch SGD on the teacher-student task.

Runs in an ensemble are advanced together as a (runs, M) weight matrix. Each
run owns two counter-based (Philox) streams, one for features and one for
label noise, spawned from the ensemble seed; draws are made in blocks of
steps, and because each stream is consumed strictly in step order the output
does not depend on the block size.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ResourceError
from .schedules import BatchSchedule, ConstantBatch, Schedule
from .task import SpectrumInstance, TaskSpec, batch_excess_risk, build_spectrum

log = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1e6


@dataclass(frozen=True)
class SimConfig:
    task: TaskSpec
    schedule: Schedule
    batch: BatchSchedule = field(default_factory=ConstantBatch)
    steps: int | None = None
    runs: int = 200
    seed: int = 0
    record_every: int = 1
    max_work: float = 2e12  # cap on steps * N * runs * mean batch

    @property
    def K(self) -> int:
        K = self.steps if self.steps is not None else self.schedule.horizon
        if K is None:
            raise ValueError("number of steps not given and schedule has no horizon")
        return int(K)

    def record_steps(self) -> np.ndarray:
        K = self.K
        steps = np.arange(self.record_every, K + 1, self.record_every)
        if steps.size == 0 or steps[-1] != K:
            steps = np.append(steps, K)
        return steps


@dataclass(frozen=True, eq=False)
class Trajectory:
    steps: np.ndarray
    lrs: np.ndarray
    risks: np.ndarray
    stderr: np.ndarray
    diverged: int = 0
    runs: int = 0

    def __len__(self):
        return self.steps.size


def sgd_step(inst: SpectrumInstance, v: np.ndarray, phi: np.ndarray, y: np.ndarray, eta: float) -> np.ndarray:
    """One update v <- v - eta/B sum_z W phi (<v, W phi> - y) on a fresh batch.

    ``phi`` is (B, N) and ``y`` is (B,).
    """
    feats = phi[:, : inst.M] if inst.W is None else phi @ inst.W.T
    resid = feats @ v - y
    return v - eta / len(y) * (resid @ feats)


def _streams(seed: int, runs: int) -> list[tuple[np.random.Generator, np.random.Generator]]:
    out = []
    for child in np.random.SeedSequence(seed).spawn(runs):
        fs, ns = child.spawn(2)
        out.append((np.random.Generator(np.random.Philox(fs)), np.random.Generator(np.random.Philox(ns))))
    return out


def run_ensemble(cfg: SimConfig, block_floats: int = 4_000_000) -> Trajectory:
    """Average exact excess-risk trajectories over ``cfg.runs`` independent runs from v0 = 0."""
    inst = build_spectrum(cfg.task)
    K, R, N, M = cfg.K, cfg.runs, inst.N, inst.M
    rates = cfg.schedule.rates(K)
    sizes = cfg.batch.sizes(K)
    work = float(K) * N * R * sizes.mean()
    if work > cfg.max_work:
        raise ResourceError(f"simulation work {work:.3g} exceeds cap {cfg.max_work:.3g}")

    record = cfg.record_steps()
    rec_pos = {int(k): i for i, k in enumerate(record)}
    risks = np.empty((R, record.size))
    sqrt_lam = np.sqrt(inst.lambdas)
    theta = inst.thetas
    sigma = cfg.task.sigma
    streams = _streams(cfg.seed, R)
    V = np.zeros((R, M))
    alive = np.ones(R, dtype=bool)

    # steps per block so that R * (samples in block) * N stays under block_floats
    per_step = max(1, int(R * sizes.max() * N))
    block = max(1, block_floats // per_step)
    # diverging runs overflow before they are flagged
    with np.errstate(over="ignore", invalid="ignore"):
        k = 0
        while k < K:
            stop = min(K, k + block)
            bs = sizes[k:stop]
            n = int(bs.sum())
            phis = np.empty((R, n, N))
            eps = np.empty((R, n))
            for r, (fs, ns) in enumerate(streams):
                phis[r] = fs.standard_normal((n, N))
                eps[r] = ns.standard_normal(n)
            phis *= sqrt_lam
            offs = np.concatenate([[0], np.cumsum(bs)])
            for i in range(stop - k):
                step = k + i + 1
                a, b = offs[i], offs[i + 1]
                phi = phis[:, a:b, :]
                feats = phi[:, :, :M] if inst.W is None else phi @ inst.W.T
                y = phi @ theta + sigma * eps[:, a:b]
                resid = np.einsum("rbm,rm->rb", feats, V) - y
                V -= (rates[i + k] / (b - a)) * np.einsum("rb,rbm->rm", resid, feats)
                if step in rec_pos:
                    e = batch_excess_risk(inst, V)
                    bad = ~np.isfinite(e) | (e > DIVERGENCE_THRESHOLD)
                    if np.any(bad & alive):
                        alive &= ~bad
                        V[~alive] = 0.0
                    risks[:, rec_pos[step]] = e
            k = stop

    n_div = int((~alive).sum())
    if n_div:
        log.warning("%d of %d runs diverged and were excluded", n_div, R)
    kept = risks[alive]
    if kept.shape[0] == 0:
        mean = np.full(record.size, np.nan)
        se = np.full(record.size, np.nan)
    else:
        mean = kept.mean(axis=0)
        se = kept.std(axis=0, ddof=1) / np.sqrt(kept.shape[0]) if kept.shape[0] > 1 else np.zeros(record.size)
    return Trajectory(record, rates[record - 1], mean, se, n_div, R)


def final_risk_sweep(cfgs: list[SimConfig]) -> np.ndarray:
    """Rows of (D, final mean excess risk, stderr) with D = total samples seen."""
    if not cfgs:
        raise ValueError("empty sweep")
    rows = []
    for cfg in cfgs:
        traj = run_ensemble(cfg)
        D = int(cfg.batch.sizes(cfg.K).sum())
        rows.append((D, traj.risks[-1], traj.stderr[-1]))
    return np.array(rows)
