"""Error metrics, confidence-interval trial stopping and the multi-trial experiment harness."""

import dataclasses
import logging
import math
import typing

import numpy as np
import scipy.stats

from .casegen import DeviceAssignment, NoiseSpec, assign_devices, generate_se_case
from .exceptions import LengthMismatch, NumericalError, ValidationError
from .grid import GridCase
from .interface import ExecutorKind, Measure, RtuModel, StoppedBy
from .linear_se import EstimateResult, solve_linear_se
from .nonlinear_se import NlOptions, solve_nonlinear_se
from .powerflow import PfSolution, solve_power_flow
from .runtime import WorkerPool, blocking_with_aio, default_runtime
from .streams import derive_seed

logger = logging.getLogger("circuitse.evaluation")

DEGENERATE_MEAN = 1e-15

VoltagePair = typing.Tuple[typing.Sequence[float], typing.Sequence[float]]


def _stacked_error(est: VoltagePair, truth: VoltagePair) -> np.ndarray:
    est_vr, est_vi = (np.asarray(a, dtype=float) for a in est)
    true_vr, true_vi = (np.asarray(a, dtype=float) for a in truth)
    lengths = {len(est_vr), len(est_vi), len(true_vr), len(true_vi)}
    if len(lengths) != 1:
        raise LengthMismatch(f"voltage vectors of unequal lengths {sorted(lengths)}")
    return np.concatenate([est_vr - true_vr, est_vi - true_vi])


def sigma_ss(est: VoltagePair, truth: VoltagePair) -> float:
    """Sum of squared errors over the stacked rectangular voltage vector."""
    e = _stacked_error(est, truth)
    return float(e @ e)


def sigma_max(est: VoltagePair, truth: VoltagePair) -> float:
    """Largest absolute error of a single rectangular component."""
    return float(np.abs(_stacked_error(est, truth)).max(initial=0.0))


def sigma_max_complex(est: VoltagePair, truth: VoltagePair) -> float:
    """Largest per-bus complex error modulus."""
    e = _stacked_error(est, truth)
    n = len(e) // 2
    return float(np.hypot(e[:n], e[n:]).max(initial=0.0))


MEASURES: typing.Dict[Measure, typing.Callable[[VoltagePair, VoltagePair], float]] = {
    Measure.SIGMA_SS: sigma_ss,
    Measure.SIGMA_MAX: sigma_max,
}


@dataclasses.dataclass(frozen=True)
class StoppingRule:
    level: float = 0.99
    rel: float = 0.05
    min_trials: int = 30
    max_trials: int = 1000

    def __post_init__(self):
        if not 0 < self.level < 1:
            raise ValidationError(f"confidence level must lie in (0, 1), got {self.level}")
        if not self.rel > 0:
            raise ValidationError(f"rel must be positive, got {self.rel}")
        if not 2 <= self.min_trials <= self.max_trials:
            raise ValidationError(f"need 2 <= min_trials <= max_trials, got {self.min_trials}, {self.max_trials}")

    @property
    def z(self) -> float:
        # two-sided normal quantile: 2.5758293 at 99%
        return float(scipy.stats.norm.ppf(0.5 + self.level / 2))


@dataclasses.dataclass(frozen=True)
class TrialStats:
    values: typing.Tuple[float, ...]
    mean: float
    ci_half_width: float
    trials: int
    stopped_by: StoppedBy
    degenerate_mean: bool = False
    failed_trials: typing.Tuple[int, ...] = ()


class CiTracker:
    """Incremental form of the stopping rule: `push` one value at a time, in trial order."""

    def __init__(self, rule: StoppingRule):
        self.rule = rule
        self._z = rule.z
        self.values: typing.List[float] = []
        self.stopped_by: typing.Optional[StoppedBy] = None

    def _interval(self) -> typing.Tuple[float, float]:
        v = np.asarray(self.values)
        n = len(v)
        mean = float(v.mean())
        s = float(v.std(ddof=1)) if n > 1 else 0.0
        return mean, self._z * s / math.sqrt(n)

    def push(self, value: float) -> bool:
        if self.stopped_by is not None:
            raise RuntimeError("value pushed after the stopping decision")
        self.values.append(float(value))
        n = len(self.values)
        if n >= self.rule.min_trials:
            mean, half = self._interval()
            # a vanishing spread settles even a zero mean, where the relative criterion is undefined
            settled = abs(mean) > DEGENERATE_MEAN and half < self.rule.rel * abs(mean)
            if settled or half <= self.rule.rel * DEGENERATE_MEAN:
                self.stopped_by = StoppedBy.CI
        if self.stopped_by is None and n >= self.rule.max_trials:
            self.stopped_by = StoppedBy.MAX_TRIALS
        return self.stopped_by is not None

    def result(self, failed_trials: typing.Sequence[int] = ()) -> TrialStats:
        if not self.values:
            return TrialStats((), math.nan, math.inf, 0, StoppedBy.MAX_TRIALS, True, tuple(failed_trials))
        mean, half = self._interval()
        stopped_by = self.stopped_by or StoppedBy.MAX_TRIALS
        degenerate = stopped_by == StoppedBy.MAX_TRIALS and abs(mean) <= DEGENERATE_MEAN
        if degenerate:
            logger.warning("trial mean %.3e stayed at zero through %d trials", mean, len(self.values))
        return TrialStats(
            values=tuple(self.values),
            mean=mean,
            ci_half_width=half,
            trials=len(self.values),
            stopped_by=stopped_by,
            degenerate_mean=degenerate,
            failed_trials=tuple(failed_trials),
        )


def ci_stopping(values: typing.Iterable[float], rule: typing.Optional[StoppingRule] = None) -> TrialStats:
    """Consume `values` until the confidence-interval half-width drops below `rel * |mean|` or `max_trials`."""
    tracker = CiTracker(rule or StoppingRule())
    for value in values:
        if tracker.push(value):
            break
    return tracker.result()


def estimate(se, model: RtuModel, nl_options: typing.Optional[NlOptions] = None) -> EstimateResult:
    if model == RtuModel.DELTA_I:
        return solve_linear_se(se)
    return solve_nonlinear_se(se, nl_options)


@dataclasses.dataclass(frozen=True)
class _TrialJob:
    grid: GridCase
    pf: PfSolution
    spec: NoiseSpec
    assignment: DeviceAssignment
    model: RtuModel
    measure: Measure
    seed: int
    trial: int


def _run_trial(job: _TrialJob) -> typing.Tuple[int, typing.Optional[float], str]:
    se = generate_se_case(job.pf, job.grid, job.spec, derive_seed(job.seed, job.trial), job.assignment)
    try:
        est = estimate(se, job.model)
    except NumericalError as exc:
        logger.warning("trial %d failed: %s", job.trial, exc)
        return job.trial, None, str(exc)
    return job.trial, MEASURES[job.measure]((est.vr, est.vi), (se.truth.vr, se.truth.vi)), ""


@blocking_with_aio(default_runtime)
async def run_trials(
    c: GridCase,
    spec: NoiseSpec,
    model: RtuModel = RtuModel.DELTA_I,
    measure: Measure = Measure.SIGMA_SS,
    stopping: typing.Optional[StoppingRule] = None,
    seed: int = 0,
    threads: int = 1,
    executor: ExecutorKind = ExecutorKind.THREAD,
    pf: typing.Optional[PfSolution] = None,
) -> TrialStats:
    """Repeated estimation on freshly noised measurement sets of one case, scored against the power flow truth.

    The power flow and the device placement are fixed once; trial t draws its noise from a seed derived from
    (seed, t). Trials run in parallel batches but enter the stopping rule in trial order.
    """
    rule = stopping or StoppingRule()
    pf = pf or solve_power_flow(c)
    assignment = assign_devices(c, spec, seed)
    tracker = CiTracker(rule)
    failed: typing.List[int] = []
    batch = max(threads, 1) * 4

    async with WorkerPool(threads, executor) as pool:
        t = 0
        stopped = False
        while not stopped and len(failed) < rule.max_trials:
            jobs = [_TrialJob(c, pf, spec, assignment, model, measure, seed, i) for i in range(t, t + batch)]
            t += batch
            for trial, value, _ in await pool.map_ordered(_run_trial, jobs):
                if value is None:
                    failed.append(trial)
                    continue
                if tracker.push(value):
                    stopped = True
                    break

    stats = tracker.result(failed)
    logger.info(
        "%s/%s: %d trials, mean %.4e +- %.2e (%s)",
        model.value,
        measure.value,
        stats.trials,
        stats.mean,
        stats.ci_half_width,
        stats.stopped_by.value,
    )
    return stats


@dataclasses.dataclass(frozen=True)
class ExperimentRow:
    case: str
    model: RtuModel
    measure: Measure
    weighted: bool
    stats: TrialStats

    def as_record(self) -> typing.Dict[str, typing.Union[str, int, float]]:
        return {
            "case": self.case,
            "model": self.model.value,
            "measure": self.measure.value,
            "weighting": "weighted" if self.weighted else "unweighted",
            "mean": self.stats.mean,
            "ci_half_width": self.stats.ci_half_width,
            "trials": self.stats.trials,
            "stopped_by": self.stats.stopped_by.value,
            "failed": len(self.stats.failed_trials),
        }


def run_experiment(
    c: GridCase,
    spec: NoiseSpec,
    models: typing.Sequence[RtuModel] = (RtuModel.DELTA_I, RtuModel.DELTA_Y),
    measures: typing.Sequence[Measure] = (Measure.SIGMA_SS, Measure.SIGMA_MAX),
    weightings: typing.Sequence[bool] = (True,),
    stopping: typing.Optional[StoppingRule] = None,
    seed: int = 0,
    threads: int = 1,
) -> typing.List[ExperimentRow]:
    """One row per (weighting, model, measure); every row shares the power flow, placement and trial noise."""
    pf = solve_power_flow(c)
    rows = []
    for weighted in weightings:
        variant = dataclasses.replace(spec, weighted=weighted)
        for model in models:
            for measure in measures:
                stats = run_trials(c, variant, model, measure, stopping, seed=seed, threads=threads, pf=pf)
                rows.append(ExperimentRow(c.name, model, measure, weighted, stats))
    return rows
