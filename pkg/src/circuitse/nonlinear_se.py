"""Nonlinear state estimator: RTUs as admittance mismatches dG + j dB on top of their measured admittance.

The RTU draw becomes ((g_m + dG) vr + (b_m + dB) vi, (g_m + dG) vi - (b_m + dB) vr), bilinear in the
unknowns. Newton-Raphson runs on the full optimality system

    c  = J(dY) x - rhs                           (KCL, 2n rows)
    a  = D (x - v_meas) + J(dY)^T lambda         (adjoint, 2n rows)
    sG = gamma dG + lambda_r vr + lambda_i vi    (per RTU)
    sB = gamma dB + lambda_r vi - lambda_i vr    (per RTU)

with unknowns ordered [vr (n), vi (n), lambda_r (n), lambda_i (n), dG (m), dB (m)].
"""

import dataclasses
import logging
import typing

import numpy as np
import scipy.sparse as sp

from .casegen import MeasurementArrays, SeCase
from .exceptions import IndexMismatch, NotConverged, ObjectiveIncreased, ValidationError, ZeroVoltage
from .interface import Init, RtuModel
from .linear_se import EstimateResult, KktPattern, estimate_measurements
from .linsolve import solve_sparse_linear
from .network import SplitAdmittance, build_split_admittance

logger = logging.getLogger("circuitse.nonlinear_se")

MIN_DAMPING = 0.125
# slack on the linear-start objective bound, for roundoff at convergence
OBJECTIVE_RTOL = 1e-9
OBJECTIVE_ATOL = 1e-18


@dataclasses.dataclass(frozen=True)
class NlOptions:
    tol: float = 1e-8
    max_iter: int = 50
    damping: float = 1.0
    init: Init = Init.FROM_LINEAR

    def __post_init__(self):
        if not self.tol > 0:
            raise ValidationError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ValidationError(f"max_iter must be at least 1, got {self.max_iter}")
        if not 0 < self.damping <= 1:
            raise ValidationError(f"damping must lie in (0, 1], got {self.damping}")
        if self.init not in (Init.FROM_LINEAR, Init.FLAT):
            raise ValidationError(f"unsupported estimator init {self.init}")


@dataclasses.dataclass(frozen=True)
class NlState:
    vr: np.ndarray
    vi: np.ndarray
    lambda_r: np.ndarray
    lambda_i: np.ndarray
    delta_g: np.ndarray  # per RTU
    delta_b: np.ndarray

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.vr, self.vi, self.lambda_r, self.lambda_i, self.delta_g, self.delta_b])

    @classmethod
    def from_vector(cls, n: int, z: np.ndarray) -> "NlState":
        m = (len(z) - 4 * n) // 2
        return cls(
            vr=z[:n],
            vi=z[n : 2 * n],
            lambda_r=z[2 * n : 3 * n],
            lambda_i=z[3 * n : 4 * n],
            delta_g=z[4 * n : 4 * n + m],
            delta_b=z[4 * n + m :],
        )

    @classmethod
    def from_result(cls, result: EstimateResult) -> "NlState":
        m = len(result.rtu_idx)
        return cls(
            vr=result.vr,
            vi=result.vi,
            lambda_r=result.lambda_r,
            lambda_i=result.lambda_i,
            delta_g=result.delta_g if result.delta_g is not None else np.zeros(m),
            delta_b=result.delta_b if result.delta_b is not None else np.zeros(m),
        )


class _DeltaYSystem:
    def __init__(self, se: SeCase, adm: typing.Optional[SplitAdmittance] = None):
        self.adm = adm or build_split_admittance(se.grid)
        if self.adm.n != se.grid.n:
            raise IndexMismatch(f"admittance has {self.adm.n} buses, case has {se.grid.n}")
        self.meas = meas = se.measurements
        self.pattern = KktPattern(self.adm, meas)
        self.rhs = self.pattern.rhs(meas)
        self.n = self.adm.n
        self.k = meas.rtu_idx
        self.m = len(self.k)
        self.dim = 4 * self.n + 2 * self.m

    def _check(self, z: np.ndarray):
        if z.shape != (self.dim,):
            raise IndexMismatch(f"state has {len(z)} entries, system has {self.dim}")

    def _primal_adjoint(self, z: np.ndarray) -> sp.csr_matrix:
        m = self.m
        dg, db = z[4 * self.n : 4 * self.n + m], z[4 * self.n + m :]
        meas = self.meas
        values = self.pattern.values(meas, rtu_g=meas.rtu_g + dg, rtu_b=meas.rtu_b + db, coupled=False)
        return self.pattern.matrix(values)

    def residual(self, z: np.ndarray) -> np.ndarray:
        self._check(z)
        n, k = self.n, self.k
        s = NlState.from_vector(n, z)
        top = self._primal_adjoint(z) @ z[: 4 * n] - self.rhs
        vr, vi, lr, li = s.vr[k], s.vi[k], s.lambda_r[k], s.lambda_i[k]
        gamma = self.meas.rtu_gamma
        s_g = gamma * s.delta_g + lr * vr + li * vi
        s_b = gamma * s.delta_b + lr * vi - li * vr
        return np.concatenate([top, s_g, s_b])

    def jacobian(self, z: np.ndarray) -> sp.csr_matrix:
        self._check(z)
        n, m, k = self.n, self.m, self.k
        s = NlState.from_vector(n, z)
        vr, vi, lr, li = s.vr[k], s.vi[k], s.lambda_r[k], s.lambda_i[k]
        gamma = self.meas.rtu_gamma
        c_g = 4 * n + np.arange(m)
        c_b = 4 * n + m + np.arange(m)

        top = self._primal_adjoint(z).tocoo()
        rows = [top.row, k, n + k, k, n + k, 2 * n + k, 3 * n + k, 2 * n + k, 3 * n + k]
        cols = [top.col, c_g, c_g, c_b, c_b, c_g, c_g, c_b, c_b]
        vals = [top.data, vr, vi, vi, -vr, lr, li, -li, lr]

        rows += [c_g] * 5 + [c_b] * 5
        cols += [k, n + k, 2 * n + k, 3 * n + k, c_g, k, n + k, 2 * n + k, 3 * n + k, c_b]
        vals += [lr, li, vr, vi, gamma, -li, lr, vi, -vr, gamma]

        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(self.dim, self.dim)
        )

    def initial(self, init: Init, linear: typing.Optional[EstimateResult] = None) -> np.ndarray:
        n, m = self.n, self.m
        if init == Init.FROM_LINEAR:
            if linear is None:
                linear = estimate_measurements(self.adm, self.meas, pattern=self.pattern)
            vr, vi = linear.vr, linear.vi
        else:
            vr, vi = np.ones(n), np.zeros(n)
        return np.concatenate([vr, vi, np.zeros(2 * n + 2 * m)])


def kkt_residual_vector(se: SeCase, s: NlState, adm: typing.Optional[SplitAdmittance] = None) -> np.ndarray:
    return _DeltaYSystem(se, adm).residual(s.to_vector())


def kkt_residual(se: SeCase, s: NlState, adm: typing.Optional[SplitAdmittance] = None) -> float:
    """Max-abs entry of the full nonlinear optimality system at `s`, evaluated without linearization."""
    return float(np.abs(kkt_residual_vector(se, s, adm)).max(initial=0.0))


def kkt_jacobian(se: SeCase, s: NlState, adm: typing.Optional[SplitAdmittance] = None) -> sp.csr_matrix:
    return _DeltaYSystem(se, adm).jacobian(s.to_vector())


def _objective(meas: MeasurementArrays, vr, vi, delta_g, delta_b) -> float:
    p = meas.pmu_idx
    pmu = meas.g_pmu**2 * ((vr[p] - meas.pmu_vr) ** 2 + (vi[p] - meas.pmu_vi) ** 2)
    rtu = meas.rtu_gamma * (delta_g**2 + delta_b**2)
    return 0.5 * float(pmu.sum() + rtu.sum())


def optimal_delta_y(vr, vi, delta_ir, delta_ii) -> typing.Tuple[np.ndarray, np.ndarray]:
    """The admittance mismatch that draws the correction current dI at voltage V: dY = conj(dI / V)."""
    v = np.asarray(vr) + 1j * np.asarray(vi)
    if np.any(v == 0):
        raise ZeroVoltage("correction admittance undefined at zero voltage")
    ratio = (np.asarray(delta_ir) + 1j * np.asarray(delta_ii)) / v
    return ratio.real, -ratio.imag


def delta_y_objective(se: SeCase, vr: np.ndarray, vi: np.ndarray, delta_ir: np.ndarray, delta_ii: np.ndarray) -> float:
    """Admittance-mismatch objective at a fixed voltage, with the mismatch that reproduces the given RTU currents."""
    meas = se.measurements
    k = meas.rtu_idx
    delta_g, delta_b = optimal_delta_y(vr[k], vi[k], delta_ir, delta_ii)
    return _objective(meas, vr, vi, delta_g, delta_b)


def _check_objective(objective: float, reference: float):
    if objective > reference * (1 + OBJECTIVE_RTOL) + OBJECTIVE_ATOL:
        logger.warning("delta-y objective %.6e is above the linear starting point %.6e", objective, reference)
        raise ObjectiveIncreased(objective, reference)


def solve_nonlinear_se(
    se: SeCase,
    opt: typing.Optional[NlOptions] = None,
    adm: typing.Optional[SplitAdmittance] = None,
) -> EstimateResult:
    """Newton-Raphson on the admittance-mismatch optimality system.

    The result is checked against the linear estimate: its objective, with the admittance mismatch that
    reproduces the linear correction currents, bounds the converged objective from above.
    """
    opt = opt or NlOptions()
    system = _DeltaYSystem(se, adm)
    linear = estimate_measurements(system.adm, system.meas, pattern=system.pattern)
    k = system.k
    g0, b0 = optimal_delta_y(linear.vr[k], linear.vi[k], linear.delta_ir, linear.delta_ii)
    reference = _objective(system.meas, linear.vr, linear.vi, g0, b0)

    z = system.initial(opt.init, linear)
    f = system.residual(z)
    residual = float(np.abs(f).max(initial=0.0))

    iterations = 0
    while not residual < opt.tol:
        if iterations == opt.max_iter:
            raise NotConverged(iterations, residual)
        iterations += 1
        dz = solve_sparse_linear(system.jacobian(z), -f)

        step = opt.damping
        while True:
            trial = z + step * dz
            f_trial = system.residual(trial)
            r_trial = float(np.abs(f_trial).max(initial=0.0))
            if r_trial <= residual or step <= MIN_DAMPING:
                break
            step /= 2
        z, f, residual = trial, f_trial, r_trial
        logger.debug("delta-y iteration %d: step %.3f, KKT residual %.3e", iterations, step, residual)
        if not np.isfinite(residual):
            raise NotConverged(iterations, residual)

    s = NlState.from_vector(system.n, z)
    vr_k, vi_k = s.vr[k], s.vi[k]
    objective = _objective(system.meas, s.vr, s.vi, s.delta_g, s.delta_b)
    _check_objective(objective, reference)
    logger.info("delta-y estimate converged in %d iterations: objective %.6e", iterations, objective)
    return EstimateResult(
        vr=s.vr.copy(),
        vi=s.vi.copy(),
        lambda_r=s.lambda_r.copy(),
        lambda_i=s.lambda_i.copy(),
        rtu_idx=k,
        delta_ir=s.delta_g * vr_k + s.delta_b * vi_k,
        delta_ii=s.delta_g * vi_k - s.delta_b * vr_k,
        objective=objective,
        converged=True,
        iterations=iterations,
        model=RtuModel.DELTA_Y,
        residual=residual,
        delta_g=s.delta_g.copy(),
        delta_b=s.delta_b.copy(),
    )
