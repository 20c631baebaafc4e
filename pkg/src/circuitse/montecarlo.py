"""Probabilistic state estimation by simple random sampling.

Each sample redraws every uncertain measurement (and optionally every branch's r and x) around the
case values and solves the linear estimator. Samples are grouped into fixed-size chunks; chunk
statistics are merged in chunk order, so a run is a function of (case, config) alone and never of
how many workers took part or which finished first.

Histogram edges come from a pilot phase: the first `pilot_samples` samples fix a per-bus range of
pilot mean +- 6 pilot std, then every sample (the pilot ones re-scored) is binned, with values
outside the range counted in the edge bins.
"""

import dataclasses
import logging
import typing

import numpy as np

from .casegen import VM_FLOOR, MeasurementArrays, SeCase, pmu_hop_distance, relative_sigma
from .exceptions import McAborted, NumericalError, SampleFailed, ValidationError
from .grid import GridCase
from .interface import ExecutorKind
from .linear_se import EstimateResult, KktPattern, estimate_measurements, solve_linear_se
from .network import PerturbationSpec, PerturbedBranches, build_split_admittance, perturb_branches
from .runtime import WorkerPool, blocking_with_aio, default_runtime
from .streams import Purpose, stream

logger = logging.getLogger("circuitse.montecarlo")

MAX_FAILED_FRACTION = 0.01
HIST_HALF_WIDTH_FLOOR = 1e-9  # relative to max(1, |mean|), keeps edges distinct when a bus never moves


@dataclasses.dataclass(frozen=True)
class McConfig:
    samples: int = 10000
    seed: int = 0
    threads: int = 1
    net_uncertainty: typing.Optional[PerturbationSpec] = None
    histogram_bins: int = 64
    pilot_samples: int = 500
    chunk_size: int = 64  # fixed work unit, independent of the thread count
    executor: ExecutorKind = ExecutorKind.THREAD

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.samples < 1:
            raise ValidationError(f"samples must be positive, got {self.samples}")
        if self.histogram_bins < 2:
            raise ValidationError(f"histogram_bins must be at least 2, got {self.histogram_bins}")
        if not 1 <= self.pilot_samples <= self.samples:
            raise ValidationError(f"pilot_samples must lie in [1, samples], got {self.pilot_samples}")
        if self.threads < 1:
            raise ValidationError(f"threads must be positive, got {self.threads}")
        if self.chunk_size < 1:
            raise ValidationError(f"chunk_size must be positive, got {self.chunk_size}")

    @property
    def perturbs_network(self) -> bool:
        return self.net_uncertainty is not None and not self.net_uncertainty.is_zero()


@dataclasses.dataclass
class RunningStats:
    """Per-bus streaming mean/variance (Welford updates, pairwise merges) plus running extrema."""

    count: int
    mean: np.ndarray
    m2: np.ndarray
    min: np.ndarray
    max: np.ndarray

    @classmethod
    def empty(cls, n: int) -> "RunningStats":
        return cls(
            count=0,
            mean=np.zeros(n),
            m2=np.zeros(n),
            min=np.full(n, np.inf),
            max=np.full(n, -np.inf),
        )

    def push(self, x: np.ndarray):
        self.count += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + delta * (x - self.mean)
        self.min = np.minimum(self.min, x)
        self.max = np.maximum(self.max, x)

    def merge(self, other: "RunningStats"):
        if other.count == 0:
            return
        if self.count == 0:
            self.count, self.mean, self.m2 = other.count, other.mean.copy(), other.m2.copy()
            self.min, self.max = other.min.copy(), other.max.copy()
            return
        total = self.count + other.count
        delta = other.mean - self.mean
        self.mean = self.mean + delta * (other.count / total)
        self.m2 = self.m2 + other.m2 + delta**2 * (self.count * other.count / total)
        self.count = total
        self.min = np.minimum(self.min, other.min)
        self.max = np.maximum(self.max, other.max)

    @property
    def variance(self) -> np.ndarray:
        if self.count < 2:
            return np.zeros_like(self.mean)
        return np.maximum(self.m2 / (self.count - 1), 0.0)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)


@dataclasses.dataclass(frozen=True)
class Histogram:
    edges: np.ndarray  # n x (bins + 1)
    counts: np.ndarray  # n x bins

    @classmethod
    def around(cls, stats: RunningStats, bins: int) -> "Histogram":
        half = np.maximum(6.0 * stats.std, HIST_HALF_WIDTH_FLOOR * np.maximum(1.0, np.abs(stats.mean)))
        lo, hi = stats.mean - half, stats.mean + half
        edges = lo[:, None] + (hi - lo)[:, None] * (np.arange(bins + 1) / bins)
        return cls(edges=edges, counts=np.zeros((len(lo), bins), dtype=np.int64))

    @property
    def bins(self) -> int:
        return self.counts.shape[1]

    def score(self, values: np.ndarray) -> np.ndarray:
        """Counts for a (samples x n) block of values, edge bins absorbing overflow."""
        values = np.atleast_2d(values)
        n, bins = self.counts.shape
        if values.shape[0] == 0:
            return np.zeros((n, bins), dtype=np.int64)
        lo = self.edges[:, 0]
        width = self.edges[:, -1] - lo
        idx = np.clip(np.floor((values - lo) / width * bins), 0, bins - 1).astype(np.int64)
        flat = idx + np.arange(n) * bins
        return np.bincount(flat.ravel(), minlength=n * bins).reshape(n, bins)

    def add(self, counts: np.ndarray) -> "Histogram":
        return dataclasses.replace(self, counts=self.counts + counts)


@dataclasses.dataclass(frozen=True)
class McSummary:
    grid: GridCase
    samples_completed: int
    failed_samples: typing.Tuple[int, ...]
    baseline: EstimateResult  # deterministic linear estimate of the unperturbed case
    vm: RunningStats
    va: RunningStats
    vr: RunningStats
    vi: RunningStats
    vm_hist: Histogram
    va_hist: Histogram
    pmu_hops: typing.Optional[np.ndarray] = None


@dataclasses.dataclass(frozen=True)
class SampleDraw:
    measurements: MeasurementArrays
    branches: typing.Optional[PerturbedBranches] = None


def draw_sample(se: SeCase, cfg: McConfig, k: int) -> SampleDraw:
    """Measurement (and branch) redraw for sample `k`; a pure function of (case, cfg.seed, k)."""
    if not 0 <= k < cfg.samples:
        raise ValidationError(f"sample index {k} outside [0, {cfg.samples})")
    meas = se.measurements
    # four normals per bus in bus order: pmu channels (vr, vi, ir, ii), rtu channels (vm, p, q, unused)
    z = stream(cfg.seed, k, Purpose.MC_MEASUREMENT).standard_normal((meas.n, 4))
    zp, zr = z[meas.pmu_idx], z[meas.rtu_idx]
    pmu_rel = np.where(meas.pmu_perfect, 0.0, meas.pmu_sigma_rel)

    def redraw(mean, rel, noise):
        return mean + relative_sigma(rel, mean) * noise

    sampled = dataclasses.replace(
        meas,
        pmu_vr=redraw(meas.pmu_vr, pmu_rel, zp[:, 0]),
        pmu_vi=redraw(meas.pmu_vi, pmu_rel, zp[:, 1]),
        pmu_ir=redraw(meas.pmu_ir, pmu_rel, zp[:, 2]),
        pmu_ii=redraw(meas.pmu_ii, pmu_rel, zp[:, 3]),
        rtu_vm=np.maximum(redraw(meas.rtu_vm, meas.rtu_sigma_vm_rel, zr[:, 0]), VM_FLOOR),
        rtu_p=redraw(meas.rtu_p, meas.rtu_sigma_p_rel, zr[:, 1]),
        rtu_q=redraw(meas.rtu_q, meas.rtu_sigma_q_rel, zr[:, 2]),
    )
    branches = None
    if cfg.perturbs_network:
        branches = perturb_branches(se.grid, cfg.net_uncertainty, stream(cfg.seed, k, Purpose.MC_NETWORK))
    return SampleDraw(measurements=sampled, branches=branches)


@dataclasses.dataclass(frozen=True)
class _ChunkJob:
    se: SeCase
    cfg: McConfig
    start: int
    stop: int
    vm_edges: typing.Optional[np.ndarray] = None  # None during the pilot phase
    va_edges: typing.Optional[np.ndarray] = None


@dataclasses.dataclass
class _ChunkResult:
    stats: typing.Dict[str, RunningStats]
    failures: typing.List[typing.Tuple[int, str]]
    vm_counts: typing.Optional[np.ndarray] = None
    va_counts: typing.Optional[np.ndarray] = None
    vm_values: typing.Optional[np.ndarray] = None  # pilot phase: raw values kept for re-scoring
    va_values: typing.Optional[np.ndarray] = None


def _solve_chunk(job: _ChunkJob) -> _ChunkResult:
    se, cfg = job.se, job.cfg
    n = se.grid.n
    stats = {q: RunningStats.empty(n) for q in ("vm", "va", "vr", "vi")}
    failures = []
    vm_rows, va_rows = [], []
    base_adm = build_split_admittance(se.grid)
    base_pattern = KktPattern(base_adm, se.measurements)

    for k in range(job.start, job.stop):
        try:
            draw = draw_sample(se, cfg, k)
            if draw.branches is None:
                est = estimate_measurements(base_adm, draw.measurements, base_pattern)
            else:
                adm = build_split_admittance(se.grid, draw.branches)
                est = estimate_measurements(adm, draw.measurements)
        except NumericalError as exc:
            failure = SampleFailed(k, exc)
            logger.warning("%s", failure)
            failures.append((k, str(exc)))
            continue
        v = est.v
        vm, va = np.abs(v), np.angle(v)
        stats["vm"].push(vm)
        stats["va"].push(va)
        stats["vr"].push(est.vr)
        stats["vi"].push(est.vi)
        vm_rows.append(vm)
        va_rows.append(va)

    vm_block = np.array(vm_rows).reshape(len(vm_rows), n)
    va_block = np.array(va_rows).reshape(len(va_rows), n)
    if job.vm_edges is None:
        return _ChunkResult(stats=stats, failures=failures, vm_values=vm_block, va_values=va_block)
    zeros = np.zeros((n, cfg.histogram_bins), dtype=np.int64)
    return _ChunkResult(
        stats=stats,
        failures=failures,
        vm_counts=Histogram(job.vm_edges, zeros).score(vm_block),
        va_counts=Histogram(job.va_edges, zeros).score(va_block),
    )


def _chunks(start: int, stop: int, size: int) -> typing.List[typing.Tuple[int, int]]:
    return [(a, min(a + size, stop)) for a in range(start, stop, size)]


def _check_failures(failed: typing.Sequence[int], samples: int):
    if len(failed) > MAX_FAILED_FRACTION * samples:
        raise McAborted(len(failed), samples)


@blocking_with_aio(default_runtime)
async def run_mc(se: SeCase, cfg: typing.Optional[McConfig] = None) -> McSummary:
    """Monte Carlo over measurement (and optionally branch parameter) uncertainty.

    Blocking call; `await run_mc.aio(se, cfg)` from inside an event loop.
    """
    cfg = cfg or McConfig()
    n = se.grid.n
    logger.info("Monte Carlo: %d samples on %d buses, %d %s workers", cfg.samples, n, cfg.threads, cfg.executor.value)
    baseline = solve_linear_se(se)

    stats = {q: RunningStats.empty(n) for q in ("vm", "va", "vr", "vi")}
    failed: typing.List[int] = []

    def absorb(result: _ChunkResult):
        for q, s in result.stats.items():
            stats[q].merge(s)
        failed.extend(k for k, _ in result.failures)

    async with WorkerPool(cfg.threads, cfg.executor) as pool:
        pilot_jobs = [_ChunkJob(se, cfg, a, b) for a, b in _chunks(0, cfg.pilot_samples, cfg.chunk_size)]
        pilot = await pool.map_ordered(_solve_chunk, pilot_jobs)
        for result in pilot:
            absorb(result)
        _check_failures(failed, cfg.samples)
        if stats["vm"].count == 0:
            raise McAborted(len(failed), cfg.samples)

        vm_hist = Histogram.around(stats["vm"], cfg.histogram_bins)
        va_hist = Histogram.around(stats["va"], cfg.histogram_bins)
        for result in pilot:
            vm_hist = vm_hist.add(vm_hist.score(result.vm_values))
            va_hist = va_hist.add(va_hist.score(result.va_values))
        logger.debug("pilot phase done: %d samples, histogram edges fixed", stats["vm"].count)

        main_jobs = [
            _ChunkJob(se, cfg, a, b, vm_hist.edges, va_hist.edges)
            for a, b in _chunks(cfg.pilot_samples, cfg.samples, cfg.chunk_size)
        ]
        for result in await pool.map_ordered(_solve_chunk, main_jobs):
            absorb(result)
            vm_hist = vm_hist.add(result.vm_counts)
            va_hist = va_hist.add(result.va_counts)

    _check_failures(failed, cfg.samples)
    completed = stats["vm"].count
    logger.info("Monte Carlo done: %d samples completed, %d failed", completed, len(failed))
    return McSummary(
        grid=se.grid,
        samples_completed=completed,
        failed_samples=tuple(failed),
        baseline=baseline,
        vm=stats["vm"],
        va=stats["va"],
        vr=stats["vr"],
        vi=stats["vi"],
        vm_hist=vm_hist,
        va_hist=va_hist,
        pmu_hops=pmu_hop_distance(se),
    )


@dataclasses.dataclass(frozen=True)
class SpreadComparison:
    """Per-bus relative std increase (with - without) / without; NaN where the reference std is zero."""

    vm: np.ndarray
    va: np.ndarray

    @property
    def max_vm_increase(self) -> float:
        return float(np.nanmax(self.vm))

    @property
    def median_vm_increase(self) -> float:
        return float(np.nanmedian(self.vm))

    @property
    def median_va_increase(self) -> float:
        return float(np.nanmedian(self.va))


def compare_spreads(without: McSummary, with_: McSummary) -> SpreadComparison:
    def rel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        out = np.full(a.shape, np.nan)
        np.divide(b - a, a, out=out, where=a > 0)
        return out

    if without.grid.n != with_.grid.n:
        raise ValidationError("summaries cover different bus counts")
    return SpreadComparison(vm=rel(without.vm.std, with_.vm.std), va=rel(without.va.std, with_.va.std))
