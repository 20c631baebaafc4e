"""Synthetic state estimation cases.

A case replaces every bus's power flow model with exactly one measurement device: a PMU
(complex voltage and net injection current) or an RTU (voltage magnitude and net consumed
power). Measurement means are the power flow truth plus normally distributed errors.
"""

import dataclasses
import functools
import logging
import math
import typing

import numpy as np
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph

from .exceptions import IndexMismatch, NumericalError, ValidationError, ZeroVoltage, ZeroVoltageTruth
from .grid import Branch, Bus, Gen, GridCase
from .interface import BusKind, DeviceKind
from .network import build_complex_admittance
from .powerflow import PfSolution, solve_power_flow
from .streams import Purpose, stream

logger = logging.getLogger("circuitse.casegen")

SIGMA_FLOOR = 1e-6  # absolute floor (p.u.) for a relative sigma around a near-zero mean
VM_FLOOR = 0.1  # lower clamp (p.u.) for drawn RTU voltage magnitudes
SYNTHETIC_ATTEMPTS = 20
SYNTHETIC_VM_MIN = 0.85


@dataclasses.dataclass(frozen=True)
class PmuDevice:
    bus: int
    vr: float
    vi: float
    ir: float
    ii: float
    g_pmu: float = 10.0
    sigma_rel: float = 0.0
    perfect: bool = False

    kind = DeviceKind.PMU

    def __post_init__(self):
        if not self.g_pmu > 0:
            raise ValidationError(f"PMU at bus {self.bus}: g_pmu must be positive")
        if not self.sigma_rel >= 0:
            raise ValidationError(f"PMU at bus {self.bus}: sigma_rel must be nonnegative")


@dataclasses.dataclass(frozen=True)
class RtuDevice:
    bus: int
    vm: float
    p: float
    q: float
    sigma_vm_rel: float = 0.0
    sigma_p_rel: float = 0.0
    sigma_q_rel: float = 0.0
    gamma: float = 1.0

    kind = DeviceKind.RTU

    def __post_init__(self):
        if not self.vm > 0:
            raise ValidationError(f"RTU at bus {self.bus}: vm must be positive")
        if not self.gamma > 0:
            raise ValidationError(f"RTU at bus {self.bus}: gamma must be positive")
        if min(self.sigma_vm_rel, self.sigma_p_rel, self.sigma_q_rel) < 0:
            raise ValidationError(f"RTU at bus {self.bus}: sigmas must be nonnegative")


Device = typing.Union[PmuDevice, RtuDevice]


@dataclasses.dataclass(frozen=True)
class Voltages:
    vr: typing.Tuple[float, ...]
    vi: typing.Tuple[float, ...]

    @classmethod
    def from_arrays(cls, vr, vi) -> "Voltages":
        return cls(vr=tuple(float(v) for v in vr), vi=tuple(float(v) for v in vi))

    def complex(self) -> np.ndarray:
        return np.asarray(self.vr) + 1j * np.asarray(self.vi)


@dataclasses.dataclass(frozen=True)
class MeasurementArrays:
    """Column view of a case's devices, the form both estimators and the Monte Carlo sampler work on."""

    n: int
    pmu_idx: np.ndarray
    g_pmu: np.ndarray
    pmu_vr: np.ndarray
    pmu_vi: np.ndarray
    pmu_ir: np.ndarray
    pmu_ii: np.ndarray
    pmu_sigma_rel: np.ndarray
    pmu_perfect: np.ndarray
    rtu_idx: np.ndarray
    rtu_vm: np.ndarray
    rtu_p: np.ndarray
    rtu_q: np.ndarray
    rtu_sigma_vm_rel: np.ndarray
    rtu_sigma_p_rel: np.ndarray
    rtu_sigma_q_rel: np.ndarray
    rtu_gamma: np.ndarray

    @property
    def rtu_g(self) -> np.ndarray:
        return self.rtu_p / self.rtu_vm**2

    @property
    def rtu_b(self) -> np.ndarray:
        return self.rtu_q / self.rtu_vm**2


@dataclasses.dataclass(frozen=True)
class SeCase:
    grid: GridCase
    devices: typing.Tuple[Device, ...]  # one per bus, in bus index order
    truth: typing.Optional[Voltages] = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "devices", tuple(self.devices))
        if len(self.devices) != self.grid.n:
            raise IndexMismatch(f"{len(self.devices)} devices for {self.grid.n} buses")
        for bus, dev in zip(self.grid.buses, self.devices):
            if dev.bus != bus.id:
                raise IndexMismatch(f"device for bus {dev.bus} sits at the position of bus {bus.id}")
        if self.truth is not None and (len(self.truth.vr) != self.grid.n or len(self.truth.vi) != self.grid.n):
            raise IndexMismatch("truth vector length differs from bus count")

    @functools.cached_property
    def measurements(self) -> MeasurementArrays:
        pmus = [(i, d) for i, d in enumerate(self.devices) if isinstance(d, PmuDevice)]
        rtus = [(i, d) for i, d in enumerate(self.devices) if isinstance(d, RtuDevice)]

        def col(items, attr, dtype=float):
            return np.array([getattr(d, attr) for _, d in items], dtype=dtype)

        return MeasurementArrays(
            n=self.grid.n,
            pmu_idx=np.array([i for i, _ in pmus], dtype=int),
            g_pmu=col(pmus, "g_pmu"),
            pmu_vr=col(pmus, "vr"),
            pmu_vi=col(pmus, "vi"),
            pmu_ir=col(pmus, "ir"),
            pmu_ii=col(pmus, "ii"),
            pmu_sigma_rel=col(pmus, "sigma_rel"),
            pmu_perfect=col(pmus, "perfect", bool),
            rtu_idx=np.array([i for i, _ in rtus], dtype=int),
            rtu_vm=col(rtus, "vm"),
            rtu_p=col(rtus, "p"),
            rtu_q=col(rtus, "q"),
            rtu_sigma_vm_rel=col(rtus, "sigma_vm_rel"),
            rtu_sigma_p_rel=col(rtus, "sigma_p_rel"),
            rtu_sigma_q_rel=col(rtus, "sigma_q_rel"),
            rtu_gamma=col(rtus, "gamma"),
        )


@dataclasses.dataclass(frozen=True)
class NoiseSpec:
    frac_pmu_perfect: float = 0.04
    frac_pmu_noisy: float = 0.06
    pmu_sigma_rel: float = 0.0002
    rtu_sigma_vm_rel: float = 0.004
    rtu_sigma_pq_rel: float = 0.01
    g_pmu: float = 10.0
    degraded_frac: float = 0.0
    degraded_sigma_mult: float = 10.0
    degraded_weight_div: float = 10.0
    rtu_gamma: float = 1.0
    weight_exponent: float = 1.0
    weighted: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("frac_pmu_perfect", "frac_pmu_noisy", "degraded_frac"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ValidationError(f"{name} must lie in [0, 1], got {value}")
        if self.frac_pmu_perfect + self.frac_pmu_noisy > 1:
            raise ValidationError("PMU fractions sum to more than 1")
        for name in ("pmu_sigma_rel", "rtu_sigma_vm_rel", "rtu_sigma_pq_rel"):
            if not getattr(self, name) >= 0:
                raise ValidationError(f"{name} must be nonnegative")
        for name in ("g_pmu", "degraded_sigma_mult", "degraded_weight_div", "rtu_gamma"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")

    @classmethod
    def zero_noise(cls, **kwargs) -> "NoiseSpec":
        return cls(pmu_sigma_rel=0.0, rtu_sigma_vm_rel=0.0, rtu_sigma_pq_rel=0.0, **kwargs)

    def degraded_gamma(self) -> float:
        if not self.weighted:
            return self.rtu_gamma
        return self.rtu_gamma / self.degraded_weight_div**self.weight_exponent


@dataclasses.dataclass(frozen=True)
class DeviceAssignment:
    """Per-bus device choice: 'perfect' / 'noisy' PMU or 'rtu', plus degraded RTU flags."""

    kinds: typing.Tuple[str, ...]
    degraded: typing.Tuple[bool, ...]

    def count(self, kind: str) -> int:
        return sum(1 for k in self.kinds if k == kind)


def assign_devices(c: GridCase, spec: NoiseSpec, seed: int) -> DeviceAssignment:
    n = c.n
    n_perfect = math.floor(spec.frac_pmu_perfect * n)
    n_noisy = math.floor(spec.frac_pmu_noisy * n)
    order = stream(seed, 0, Purpose.ASSIGN).permutation(n)
    kinds = ["rtu"] * n
    for i in order[:n_perfect]:
        kinds[i] = "perfect"
    for i in order[n_perfect : n_perfect + n_noisy]:
        kinds[i] = "noisy"

    rtus = np.array([i for i in range(n) if kinds[i] == "rtu"], dtype=int)
    n_degraded = math.floor(spec.degraded_frac * len(rtus))
    degraded = [False] * n
    if n_degraded:
        for i in stream(seed, 0, Purpose.DEGRADED).choice(rtus, size=n_degraded, replace=False):
            degraded[i] = True
    if n_perfect + n_noisy == 0:
        logger.warning("no PMU assigned on %d buses: estimates will have no phase reference", n)
    return DeviceAssignment(kinds=tuple(kinds), degraded=tuple(degraded))


def rtu_admittance(vm: float, p: float, q: float) -> typing.Tuple[float, float]:
    """Mean admittance of an RTU: S / |V|^2, signs kept (negative conductance means generation)."""
    if not vm > 0:
        raise ZeroVoltage(f"RTU voltage magnitude must be positive, got {vm}")
    return p / vm**2, q / vm**2


def relative_sigma(rel, mean):
    rel = np.asarray(rel, dtype=float)
    return np.where(rel > 0, np.maximum(rel * np.abs(mean), SIGMA_FLOOR), 0.0)


def true_injections(c: GridCase, v: np.ndarray) -> typing.Tuple[np.ndarray, np.ndarray]:
    """Net injection current (Y V) and net consumed power (-V conj(Y V)) per bus."""
    current = build_complex_admittance(c) @ v
    return current, -v * np.conj(current)


def generate_se_case(
    pf: PfSolution,
    c: GridCase,
    spec: NoiseSpec,
    seed: int,
    assignment: typing.Optional[DeviceAssignment] = None,
) -> SeCase:
    v = pf.vr + 1j * pf.vi
    zero = np.flatnonzero(np.abs(v) == 0)
    if len(zero):
        raise ZeroVoltageTruth(c.buses[int(zero[0])].id)
    if assignment is None:
        assignment = assign_devices(c, spec, seed)
    current, power = true_injections(c, v)

    # four normals per bus in bus order whatever the device kind, so noise on a bus does not depend on its neighbours
    z = stream(seed, 0, Purpose.MEASUREMENT_NOISE).standard_normal((c.n, 4))

    devices: typing.List[Device] = []
    for i, bus in enumerate(c.buses):
        kind = assignment.kinds[i]
        if kind in ("perfect", "noisy"):
            sigma_rel = 0.0 if kind == "perfect" else spec.pmu_sigma_rel
            means = np.array([v[i].real, v[i].imag, current[i].real, current[i].imag])
            noisy = means + relative_sigma(sigma_rel, means) * z[i]
            devices.append(
                PmuDevice(
                    bus=bus.id,
                    vr=float(noisy[0]),
                    vi=float(noisy[1]),
                    ir=float(noisy[2]),
                    ii=float(noisy[3]),
                    g_pmu=spec.g_pmu,
                    sigma_rel=sigma_rel,
                    perfect=kind == "perfect",
                )
            )
            continue

        mult = spec.degraded_sigma_mult if assignment.degraded[i] else 1.0
        gamma = spec.degraded_gamma() if assignment.degraded[i] else spec.rtu_gamma
        sig_vm = spec.rtu_sigma_vm_rel * mult
        sig_pq = spec.rtu_sigma_pq_rel * mult
        means = np.array([abs(v[i]), power[i].real, power[i].imag])
        noisy = means + relative_sigma([sig_vm, sig_pq, sig_pq], means) * z[i, :3]
        devices.append(
            RtuDevice(
                bus=bus.id,
                vm=float(max(noisy[0], VM_FLOOR)),
                p=float(noisy[1]),
                q=float(noisy[2]),
                sigma_vm_rel=sig_vm,
                sigma_p_rel=sig_pq,
                sigma_q_rel=sig_pq,
                gamma=gamma,
            )
        )

    return SeCase(grid=c, devices=tuple(devices), truth=Voltages.from_arrays(pf.vr, pf.vi), seed=seed)


def pmu_hop_distance(se: SeCase) -> np.ndarray:
    """Branch hops from each bus to its closest PMU bus; -1 where no PMU is reachable."""
    c = se.grid
    pmu = se.measurements.pmu_idx
    if len(pmu) == 0:
        return np.full(c.n, -1, dtype=int)
    active = [c.branches[i] for i in c.in_service()]
    f = np.array([c.index[br.from_bus] for br in active], dtype=int)
    t = np.array([c.index[br.to_bus] for br in active], dtype=int)
    graph = sp.csr_matrix((np.ones(len(f)), (f, t)), shape=(c.n, c.n))
    dist = csgraph.dijkstra(graph, directed=False, indices=pmu, unweighted=True, min_only=True)
    return np.where(np.isfinite(dist), dist, -1).astype(int)


def _lattice_case(n_buses: int, rng: np.random.Generator, name: str) -> GridCase:
    side = math.ceil(math.sqrt(n_buses))

    links = set()
    for k in range(n_buses):
        if (k + 1) % side and k + 1 < n_buses:
            links.add((k, k + 1))
        if k + side < n_buses:
            links.add((k, k + side))
    for _ in range(n_buses // 10):
        a = int(rng.integers(n_buses))
        b = a + int(rng.choice([side + 1, side - 1, 2, 2 * side]))
        if b < n_buses and a != b:
            links.add((a, b))

    # slack near the lattice centre keeps its loss-covering flows short
    slack = min((side // 2) * side + side // 2, n_buses - 1)
    others = np.array([k for k in range(n_buses) if k != slack])
    gen_buses = sorted(int(i) for i in rng.choice(others, size=max(1, n_buses // 5), replace=False))
    buses = []
    for k in range(n_buses):
        kind = BusKind.SLACK if k == slack else BusKind.PV if k in gen_buses else BusKind.PQ
        loaded = rng.random() < 0.7
        pd = float(rng.uniform(0.1, 0.4)) if loaded else 0.0
        qd = pd * float(rng.uniform(0.1, 0.4))
        bs = float(rng.uniform(0.05, 0.2)) if rng.random() < 0.05 else 0.0
        buses.append(Bus(id=k + 1, kind=kind, pd=pd, qd=qd, bs=bs))

    # scheduled generation matches the load exactly, so the slack only picks up losses
    total_load = sum(b.pd for b in buses)
    weights = rng.uniform(0.8, 1.2, size=len(gen_buses) + 1)
    outputs = total_load * weights / weights.sum()
    gens = [Gen(bus=slack + 1, pg=float(outputs[0]), vset=1.03)]
    for k, pg in zip(gen_buses, outputs[1:]):
        gens.append(Gen(bus=k + 1, pg=float(pg), vset=float(rng.uniform(1.0, 1.04))))

    branches = []
    for a, b in sorted(links):
        if rng.random() < 0.08:
            x = float(rng.uniform(0.05, 0.15))
            branches.append(
                Branch(
                    from_bus=a + 1,
                    to_bus=b + 1,
                    r=x * float(rng.uniform(0.01, 0.05)),
                    x=x,
                    tap=float(rng.uniform(0.95, 1.05)),
                )
            )
        else:
            x = float(rng.uniform(0.03, 0.12))
            branches.append(
                Branch(
                    from_bus=a + 1,
                    to_bus=b + 1,
                    r=x * float(rng.uniform(0.1, 0.35)),
                    x=x,
                    b_chg=float(rng.uniform(0.0, 0.04)),
                )
            )

    return GridCase(base_mva=100.0, buses=tuple(buses), branches=tuple(branches), gens=tuple(gens), name=name)


def synthetic_case(n_buses: int, seed: int = 0, name: typing.Optional[str] = None) -> GridCase:
    """A meshed lattice grid with lines, a few transformers, loads and distributed pv generation.

    Buses sit on a near-square lattice with neighbour links plus random short chords; about a fifth of
    the buses hold generators whose schedule matches the load. A draw is kept only once its power flow
    converges with every voltage magnitude at or above `SYNTHETIC_VM_MIN`; otherwise the next draw of the
    same (seed, n_buses) sequence is tried.
    """
    if n_buses < 2:
        raise ValidationError("a synthetic case needs at least 2 buses")
    name = name or f"synthetic{n_buses}"
    failure: typing.Optional[Exception] = None
    for attempt in range(SYNTHETIC_ATTEMPTS):
        rng = stream(seed, n_buses + (attempt << 32), Purpose.SYNTHETIC_GRID)
        c = _lattice_case(n_buses, rng, name)
        try:
            pf = solve_power_flow(c)
        except NumericalError as exc:
            logger.debug("synthetic draw %d of %s rejected: %s", attempt, name, exc)
            failure = exc
            continue
        vm_min = float(np.abs(pf.v).min())
        if vm_min < SYNTHETIC_VM_MIN:
            logger.debug("synthetic draw %d of %s rejected: voltage magnitude %.3f", attempt, name, vm_min)
            continue
        if attempt:
            logger.info("synthetic case %s accepted on draw %d", name, attempt)
        return c
    raise ValidationError(f"no solvable {name} found in {SYNTHETIC_ATTEMPTS} draws (seed {seed})") from failure
