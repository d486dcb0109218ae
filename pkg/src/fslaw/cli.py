"""Command-line entry point: ``fslaw {simulate,predict,fit,optimize,table1} --config cfg.json``.

Every output file gets a ``<name>.meta.json`` sidecar with the config hash,
package version and wall time. Exit codes: 0 ok, 2 config, 3 numeric, 4 resource.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path
from typing import Annotated, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from threadpoolctl import threadpool_limits

from . import __version__
from .errors import ConfigError, NumericError, ResourceError

log = logging.getLogger("fslaw")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_RESOURCE = 0, 2, 3, 4


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TaskModel(_Strict):
    s: float = Field(gt=0)
    beta: float = Field(gt=1)
    M: int = Field(ge=1)
    N: Union[int, Literal["inf"]] = 128
    sigma: float = Field(0.0, ge=0)
    projector: Literal["top_m", "random"] = "top_m"
    seed: int = 0


class ConstantModel(_Strict):
    kind: Literal["constant"]
    eta: float = Field(gt=0)
    K: int | None = Field(None, ge=1)


class ExpDecayModel(_Strict):
    kind: Literal["exp_decay"]
    a: float = Field(gt=0)
    b: float = Field(gt=0)
    K: int = Field(ge=1)


class WSDModel(_Strict):
    kind: Literal["wsd"]
    a: float = Field(gt=0)
    b: float = Field(gt=0)
    K1: int = Field(ge=0)
    K2: int = Field(ge=0)


class CosineModel(_Strict):
    kind: Literal["cosine"]
    eta_max: float = Field(gt=0)
    K: int = Field(ge=2)
    rho: float = Field(0.1, ge=0, le=1)


class MultiStepModel(_Strict):
    kind: Literal["multistep"]
    boundaries: list[int]
    stage_rates: list[float]


class EightOneOneModel(_Strict):
    kind: Literal["eight_one_one"]
    eta_max: float = Field(gt=0)
    K: int = Field(ge=10)


class TabulatedModel(_Strict):
    kind: Literal["tabulated"]
    values: list[float] | None = None
    path: str | None = None
    initial: float | None = None


ScheduleModel = Annotated[
    Union[ConstantModel, ExpDecayModel, WSDModel, CosineModel, MultiStepModel, EightOneOneModel, TabulatedModel],
    Field(discriminator="kind"),
]


class BatchModel(_Strict):
    kind: Literal["constant", "tabulated"] = "constant"
    B: int = Field(1, ge=1)
    values: list[int] | None = None


class SimulateConfig(_Strict):
    task: TaskModel
    schedule: ScheduleModel
    batch: BatchModel = BatchModel()
    steps: int | None = Field(None, ge=1)
    runs: int = Field(200, ge=1)
    seed: int = 0
    record_every: int = Field(1, ge=1)
    max_work: float = Field(2e12, gt=0)


class WeightsModel(_Strict):
    c_full: float = Field(1.0, ge=0)
    c_fit: float = Field(1.0, ge=0)
    c_label: float = Field(1.0, ge=0)
    c_approx: float = Field(1.0, ge=0)


class SweepModel(_Strict):
    kind: Literal["constant", "exp_decay", "wsd"]
    D: list[int] = Field(min_length=2)
    base: float = Field(0.05, gt=0)
    decay_fraction: float = Field(0.2, gt=0, lt=1)


class PredictConfig(_Strict):
    mode: Literal["fsl", "ansatz"] = "fsl"
    task: TaskModel | None = None
    schedule: ScheduleModel | None = None
    batch: BatchModel = BatchModel()
    M: Union[int, Literal["inf"], None] = None  # FSL model size; defaults to task.M
    weights: WeightsModel = WeightsModel()
    steps: list[int] | None = None
    record_every: int = Field(1, ge=1)
    quadrature_nodes: int = Field(32, ge=4)
    sweep: SweepModel | None = None
    fit: str | None = None  # fit JSON for ansatz mode


class FitOptionsModel(_Strict):
    steps: int = Field(10_000, ge=0)
    lr_exponents: float = Field(5e-2, gt=0)
    lr_coefficients: float = Field(5e-3, gt=0)
    every: int | None = Field(None, ge=1)
    delta: float = Field(1e-3, gt=0)
    polish: bool = True


class ParamsModel(_Strict):
    L0: float
    c1: float
    c2: float
    c3: float
    c4: float
    c5: float
    s: float
    beta_eff: float
    gamma_exp: float


class FitConfig(_Strict):
    curve: str
    warmup_trim: int = Field(1, ge=1)
    schedule: ScheduleModel | None = None
    M: float | None = Field(None, gt=0)
    options: FitOptionsModel = FitOptionsModel()
    init: ParamsModel | None = None


class OptimizeConfig(_Strict):
    fit: str
    K: int = Field(ge=2)
    eta0: float = Field(gt=0)
    M: float | None = Field(None, gt=0)
    iterations: int = Field(50_000, ge=1)
    rates: list[float] = Field(default_factory=lambda: np.geomspace(5e-10, 1e-8, 5).tolist(), min_length=1)
    knots: int | None = Field(None, ge=1)
    frozen_prefix: int = Field(0, ge=0)


class Table1Config(_Strict):
    s_values: list[float] = Field(min_length=1)
    beta_values: list[float] = Field(min_length=1)


# -- helpers ------------------------------------------------------------------

def config_hash(raw: dict) -> str:
    return hashlib.sha256(json.dumps(raw, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def write_sidecar(path: Path, raw: dict, started: float, **extra) -> None:
    meta = {
        "file": path.name,
        "config_hash": config_hash(raw),
        "version": __version__,
        "wall_time_s": time.perf_counter() - started,
        **extra,
    }
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2, default=_json_default))


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _num(x) -> str:
    """Shortest round-trip decimal text for a float."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_csv(path: Path, header: list[str], columns: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([_num(v) for v in row])


def _infinite(v) -> float:
    return math.inf if v in ("inf", None) else float(v)


def _task(m: TaskModel, seed: int | None = None):
    from .task import TaskSpec

    d = m.model_dump()
    d["N"] = _infinite(d["N"])
    if seed is not None:
        d["seed"] = seed
    return TaskSpec(**d)


def _schedule(m):
    from .schedules import schedule_from_dict

    return schedule_from_dict({k: v for k, v in m.model_dump().items() if v is not None})


def _batch(m: BatchModel):
    from .schedules import batch_from_dict

    return batch_from_dict(m.model_dump())


def _build(fn, *args):
    """Construct domain objects, reporting bad values as configuration errors."""
    try:
        return fn(*args)
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError, OSError) as exc:
        raise ConfigError(str(exc)) from exc


# -- commands -----------------------------------------------------------------

def cmd_simulate(cfg: SimulateConfig, raw: dict, out: Path, seed: int | None) -> int:
    from .sgd import SimConfig, run_ensemble

    started = time.perf_counter()
    sim = _build(
        lambda: SimConfig(
            _task(cfg.task), _schedule(cfg.schedule), _batch(cfg.batch), cfg.steps, cfg.runs,
            cfg.seed if seed is None else seed, cfg.record_every, cfg.max_work,
        )
    )
    traj = run_ensemble(sim)
    path = out / "trajectory.csv"
    write_csv(path, ["step", "lr", "mean_risk", "stderr"], [traj.steps, traj.lrs, traj.risks, traj.stderr])
    write_sidecar(path, raw, started, command="simulate", runs=traj.runs, diverged=traj.diverged, seed=sim.seed)
    if traj.diverged == traj.runs:
        raise NumericError(f"all {traj.runs} runs diverged; no ensemble mean")
    return EXIT_OK


def _ansatz_predict(cfg: PredictConfig, raw: dict, out: Path, started: float) -> int:
    from .curve_fit import FitReport, ansatz_eval

    if cfg.fit is None or cfg.schedule is None:
        raise ConfigError("ansatz mode needs 'fit' and 'schedule'")
    report = _build(lambda: FitReport.from_dict(json.loads(Path(cfg.fit).read_text())))
    sch = _build(_schedule, cfg.schedule)
    K = sch.horizon
    steps = np.asarray(cfg.steps) if cfg.steps else np.arange(cfg.record_every, K + 1, cfg.record_every)
    if steps[-1] != K and not cfg.steps:
        steps = np.append(steps, K)
    M = report.M if cfg.M is None else _infinite(cfg.M)
    pred = _build(lambda: ansatz_eval(report.params, sch, steps, None if M is None or math.isinf(M) else M))
    path = out / "prediction.csv"
    write_csv(path, ["step", "lr", "loss"], [steps, sch.rates(K)[steps - 1], pred])
    write_sidecar(path, raw, started, command="predict", mode="ansatz", final_loss=float(pred[-1]))
    return EXIT_OK


def cmd_predict(cfg: PredictConfig, raw: dict, out: Path, seed: int | None) -> int:
    from .asymptotics import data_optimal, loglog_slope, sweep_schedule
    from .fsl import FSLWeights, fsl_predict
    from .special import GContext

    started = time.perf_counter()
    if cfg.mode == "ansatz":
        return _ansatz_predict(cfg, raw, out, started)
    if cfg.task is None:
        raise ConfigError("fsl mode needs 'task'")
    task = _build(_task, cfg.task)
    M = task.M if cfg.M is None else _infinite(cfg.M)
    ctx = _build(lambda: GContext(M, task.beta, nodes=cfg.quadrature_nodes))
    weights = _build(lambda: FSLWeights(**cfg.weights.model_dump()))
    batch = _build(_batch, cfg.batch)

    if cfg.sweep is not None:
        sw = cfg.sweep
        risks = []
        for D in sw.D:
            sch = _build(sweep_schedule, sw.kind, task.s, task.beta, D, sw.base, sw.decay_fraction)
            risks.append(fsl_predict(ctx, task, sch, batch, weights, [sch.horizon]).total[0])
        slope = loglog_slope(sw.D, risks)
        path = out / "sweep.csv"
        write_csv(path, ["D", "risk"], [sw.D, risks])
        write_sidecar(path, raw, started, command="predict", mode="sweep")
        theory = data_optimal(sw.kind, task.s, task.beta).risk
        slope_path = out / "slope.json"
        slope_path.write_text(json.dumps({
            "kind": sw.kind, "slope": slope, "theory_exponent": theory.exponent,
            "theory_log_exponent": theory.log_exponent,
        }, indent=2))
        write_sidecar(slope_path, raw, started, command="predict", mode="sweep")
        return EXIT_OK

    if cfg.schedule is None:
        raise ConfigError("fsl mode needs 'schedule' (or 'sweep')")
    sch = _build(_schedule, cfg.schedule)
    K = sch.horizon
    if K is None:
        raise ConfigError("schedule needs a horizon for prediction")
    steps = np.asarray(cfg.steps) if cfg.steps else np.arange(cfg.record_every, K + 1, cfg.record_every)
    if not cfg.steps and steps[-1] != K:
        steps = np.append(steps, K)
    ev = _build(lambda: fsl_predict(ctx, task, sch, batch, weights, steps))
    path = out / "prediction.csv"
    write_csv(
        path, ["step", "time", "lr", "pred_risk", "full_batch", "noise", "approx"],
        [ev.steps, ev.times, ev.lrs, ev.total, ev.full_batch, ev.noise, ev.approx],
    )
    write_sidecar(path, raw, started, command="predict", mode="fsl", warnings=list(ev.warnings))
    return EXIT_OK


def cmd_fit(cfg: FitConfig, raw: dict, out: Path, seed: int | None) -> int:
    from .curve_fit import AnsatzParams, FitOptions, fit, load_loss_curve

    started = time.perf_counter()
    curve = load_loss_curve(cfg.curve, cfg.warmup_trim)
    sch = _build(_schedule, cfg.schedule) if cfg.schedule is not None else None
    init = _build(lambda: AnsatzParams(**cfg.init.model_dump())) if cfg.init else None
    opts = FitOptions(**cfg.options.model_dump())
    report = fit(curve, init, opts, sch, cfg.M)
    path = out / "fit.json"
    body = report.to_dict()
    body["warmup_trim"] = cfg.warmup_trim
    path.write_text(json.dumps(body, indent=2, default=_json_default))
    write_sidecar(path, raw, started, command="fit")
    pred = np.exp(report.residuals) * curve.losses[np.isin(curve.steps, report.steps)]
    overlay = out / "overlay.csv"
    lrs = curve.lrs[np.isin(curve.steps, report.steps)]
    write_csv(
        overlay, ["step", "lr", "loss", "predicted"],
        [report.steps, lrs, curve.losses[np.isin(curve.steps, report.steps)], pred],
    )
    write_sidecar(overlay, raw, started, command="fit")
    return EXIT_OK


def cmd_optimize(cfg: OptimizeConfig, raw: dict, out: Path, seed: int | None) -> int:
    from .curve_fit import FitReport
    from .lrs_opt import OptimizerConfig, optimize
    from .schedules import save_schedule_csv

    started = time.perf_counter()
    report = _build(lambda: FitReport.from_dict(json.loads(Path(cfg.fit).read_text())))
    M = report.M if cfg.M is None else cfg.M
    oc = _build(
        lambda: OptimizerConfig(
            report.params, cfg.K, cfg.eta0, M, cfg.iterations, tuple(cfg.rates), cfg.knots, cfg.frozen_prefix,
        )
    )
    res = optimize(oc)
    sched = out / "schedule.csv"
    save_schedule_csv(sched, np.maximum(res.schedule.rates(), 0.0), eta0=cfg.eta0)
    write_sidecar(sched, raw, started, command="optimize")
    trace = out / "trace.csv"
    write_csv(trace, ["iteration", "best_objective"], [np.arange(res.trace.size), res.trace])
    write_sidecar(trace, raw, started, command="optimize")
    summary = out / "optimize.json"
    summary.write_text(json.dumps({
        "objective": res.objective, "rate": res.rate,
        "rate_objectives": {repr(k): v for k, v in res.rate_objectives.items()},
        "final_lr": float(res.schedule.rates()[-1]), "eta0": cfg.eta0, "K": cfg.K,
    }, indent=2))
    write_sidecar(summary, raw, started, command="optimize")
    return EXIT_OK


def cmd_table1(cfg: Table1Config, raw: dict, out: Path, seed: int | None) -> int:
    from .asymptotics import TABLE1_COLUMNS, table1

    started = time.perf_counter()
    rows = _build(table1, cfg.s_values, cfg.beta_values)
    path = out / "table1.csv"
    header = ["s", "beta", "regime", *TABLE1_COLUMNS]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([r["regime"] if h == "regime" else _num(r[h]) for h in header])
    write_sidecar(path, raw, started, command="table1")
    return EXIT_OK


COMMANDS = {
    "simulate": (SimulateConfig, cmd_simulate),
    "predict": (PredictConfig, cmd_predict),
    "fit": (FitConfig, cmd_fit),
    "optimize": (OptimizeConfig, cmd_optimize),
    "table1": (Table1Config, cmd_table1),
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fslaw", description="Functional scaling law toolkit")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path, help="JSON config file")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=1, help="BLAS thread cap")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def _format_validation(exc: ValidationError) -> str:
    return "; ".join(
        f"{'.'.join(str(x) for x in e['loc']) or '<root>'}: {e['msg']}" for e in exc.errors()
    )


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    model, handler = COMMANDS[args.command]
    try:
        raw = json.loads(args.config.read_text())
        cfg = model.model_validate(raw)
        args.out.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(limits=args.threads):
            return handler(cfg, raw, args.out, args.seed)
    except ValidationError as exc:
        print(f"config error: {_format_validation(exc)}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, json.JSONDecodeError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ResourceError, MemoryError) as exc:
        print(f"resource error: {exc}", file=sys.stderr)
        return EXIT_RESOURCE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
