"""Linear state estimator: RTUs as mean admittances plus correction current sources.

Problem:

    min  1/2 sum_PMU g^2 |V - V_meas|^2 + 1/2 sum_RTU gamma |dI|^2
    s.t. Y V + (device draws) = 0 at every bus

PMU draw: g (V - V_meas) - I_meas.  RTU draw: conj(g_m + j b_m) V + dI.
Eliminating dI = -lambda / gamma leaves one linear 4n x 4n KKT system

    [ J    -Gamma^-1 ] [ x      ]   [ rhs_primal  ]
    [ D     J^T      ] [ lambda ] = [ D v_meas    ]

with unknowns ordered [vr (n), vi (n), lambda_r (n), lambda_i (n)].
"""

import dataclasses
import logging
import typing

import numpy as np
import scipy.sparse as sp

from .casegen import MeasurementArrays, SeCase
from .exceptions import IndexMismatch
from .interface import RtuModel
from .linsolve import SolveReport, solve_sparse_linear, solve_with_report
from .network import SplitAdmittance, build_split_admittance

logger = logging.getLogger("circuitse.linear_se")

__all__ = [
    "EstimateResult",
    "KktPattern",
    "KktSystem",
    "assemble_kkt",
    "assemble_kkt_full",
    "estimate_measurements",
    "solve_linear_se",
    "solve_sparse_linear",
]


@dataclasses.dataclass(frozen=True)
class KktSystem:
    n: int
    matrix: sp.csr_matrix
    rhs: np.ndarray

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def index(self, k: int) -> typing.Tuple[int, int, int, int]:
        """Row/column positions of (vr, vi, lambda_r, lambda_i) for bus position k."""
        n = self.n
        return k, n + k, 2 * n + k, 3 * n + k

    def residual(self, z: np.ndarray) -> np.ndarray:
        return self.matrix @ z - self.rhs


@dataclasses.dataclass(frozen=True)
class EstimateResult:
    vr: np.ndarray
    vi: np.ndarray
    lambda_r: np.ndarray
    lambda_i: np.ndarray
    rtu_idx: np.ndarray
    delta_ir: np.ndarray  # per RTU, in rtu_idx order
    delta_ii: np.ndarray
    objective: float
    converged: bool
    iterations: int
    model: RtuModel = RtuModel.DELTA_I
    residual: float = 0.0
    delta_g: typing.Optional[np.ndarray] = None  # per RTU, delta-y model only
    delta_b: typing.Optional[np.ndarray] = None

    @property
    def v(self) -> np.ndarray:
        return self.vr + 1j * self.vi


def _check_cover(meas: MeasurementArrays, n: int):
    covered = np.zeros(n, dtype=int)
    np.add.at(covered, meas.pmu_idx, 1)
    np.add.at(covered, meas.rtu_idx, 1)
    if meas.n != n or not np.all(covered == 1):
        missing = np.flatnonzero(covered != 1)
        raise IndexMismatch(f"devices must cover every bus exactly once, bad positions {missing[:10].tolist()}")


class KktPattern:
    """Fixed COO layout of the eliminated KKT matrix for one admittance and one device placement.

    Monte Carlo samples that only change measurement values reuse the layout: the sort that maps
    COO entries onto CSR storage is done once, each sample only re-accumulates values.
    """

    def __init__(self, adm: SplitAdmittance, meas: MeasurementArrays):
        _check_cover(meas, adm.n)
        self.n = n = adm.n
        self.adm = adm
        self.pmu_idx = p = meas.pmu_idx
        self.rtu_idx = k = meas.rtu_idx
        net = adm.blocks.tocoo()
        self._net_values = net.data

        rows = [
            net.row,
            2 * n + net.col,  # adjoint rows carry J^T
            p,
            n + p,
            2 * n + p,
            3 * n + p,
            2 * n + p,
            3 * n + p,
            k,
            n + k,
            k,
            k,
            n + k,
            n + k,
            2 * n + k,
            2 * n + n + k,
            2 * n + k,
            3 * n + k,
        ]
        cols = [
            net.col,
            2 * n + net.row,
            p,
            n + p,
            2 * n + p,
            3 * n + p,
            p,
            n + p,
            2 * n + k,
            3 * n + k,
            k,
            n + k,
            k,
            n + k,
            2 * n + k,
            2 * n + k,
            2 * n + n + k,
            3 * n + k,
        ]
        rows_all = np.concatenate(rows)
        cols_all = np.concatenate(cols)
        dim = 4 * n
        keys = rows_all.astype(np.int64) * dim + cols_all
        unique, self._inverse = np.unique(keys, return_inverse=True)
        self._indices = (unique % dim).astype(np.int32)
        self._indptr = np.searchsorted(unique // dim, np.arange(dim + 1)).astype(np.int32)
        self._nnz = len(unique)
        self.dim = dim

    def values(
        self,
        meas: MeasurementArrays,
        scale: float = 1.0,
        rtu_g: typing.Optional[np.ndarray] = None,
        rtu_b: typing.Optional[np.ndarray] = None,
        coupled: bool = True,
    ) -> np.ndarray:
        """Entry values in layout order. `rtu_g`/`rtu_b` override the RTU admittances; `coupled=False` zeroes
        the eliminated correction-current coupling (the layout then holds the plain primal/adjoint blocks)."""
        g = meas.g_pmu
        g2 = scale * g**2
        coupling = -1.0 / (scale * meas.rtu_gamma) if coupled else np.zeros(len(self.rtu_idx))
        gm = meas.rtu_g if rtu_g is None else rtu_g
        bm = meas.rtu_b if rtu_b is None else rtu_b
        y = self._net_values
        return np.concatenate([y, y, g, g, g, g, g2, g2, coupling, coupling, gm, bm, -bm, gm, gm, bm, -bm, gm])

    def matrix(self, values: np.ndarray) -> sp.csr_matrix:
        data = np.bincount(self._inverse, weights=values, minlength=self._nnz)
        return sp.csr_matrix((data, self._indices, self._indptr), shape=(self.dim, self.dim))

    def rhs(self, meas: MeasurementArrays, scale: float = 1.0) -> np.ndarray:
        n = self.n
        p = self.pmu_idx
        g = meas.g_pmu
        g2 = scale * g**2
        b = np.zeros(self.dim)
        b[p] = meas.pmu_ir + g * meas.pmu_vr
        b[n + p] = meas.pmu_ii + g * meas.pmu_vi
        b[2 * n + p] = g2 * meas.pmu_vr
        b[3 * n + p] = g2 * meas.pmu_vi
        return b

    def system(self, meas: MeasurementArrays, scale: float = 1.0) -> KktSystem:
        return KktSystem(n=self.n, matrix=self.matrix(self.values(meas, scale)), rhs=self.rhs(meas, scale))


def assemble_kkt(se: SeCase, adm: typing.Optional[SplitAdmittance] = None, scale: float = 1.0) -> KktSystem:
    adm = adm or build_split_admittance(se.grid)
    if adm.n != se.grid.n:
        raise IndexMismatch(f"admittance has {adm.n} buses, case has {se.grid.n}")
    meas = se.measurements
    return KktPattern(adm, meas).system(meas, scale)


def assemble_kkt_full(se: SeCase, adm: typing.Optional[SplitAdmittance] = None) -> KktSystem:
    """The same optimality system with the RTU correction currents kept as unknowns.

    Unknowns are [vr, vi, dI_r (m), dI_i (m), lambda_r, lambda_i]; dimension 4n + 2m.
    """
    adm = adm or build_split_admittance(se.grid)
    meas = se.measurements
    _check_cover(meas, adm.n)
    n, m = adm.n, len(meas.rtu_idx)
    p, k = meas.pmu_idx, meas.rtu_idx
    g = meas.g_pmu

    stamp = sp.coo_matrix(
        (
            np.concatenate([g, g, meas.rtu_g, meas.rtu_b, -meas.rtu_b, meas.rtu_g]),
            (np.concatenate([p, n + p, k, k, n + k, n + k]), np.concatenate([p, n + p, k, n + k, k, n + k])),
        ),
        shape=(2 * n, 2 * n),
    )
    jac = (adm.blocks + stamp).tocsr()
    select = sp.coo_matrix((np.ones(2 * m), (np.concatenate([k, n + k]), np.arange(2 * m))), shape=(2 * n, 2 * m))
    gamma = sp.diags(np.concatenate([meas.rtu_gamma, meas.rtu_gamma]))
    pp = np.concatenate([p, n + p])
    d = sp.coo_matrix((np.concatenate([g**2, g**2]), (pp, pp)), shape=(2 * n, 2 * n))

    matrix = sp.bmat(
        [
            [jac, select, None],
            [None, gamma, select.T],
            [d, None, jac.T],
        ],
        format="csr",
    )
    rhs = np.zeros(4 * n + 2 * m)
    rhs[p] = meas.pmu_ir + g * meas.pmu_vr
    rhs[n + p] = meas.pmu_ii + g * meas.pmu_vi
    rhs[2 * n + 2 * m + p] = g**2 * meas.pmu_vr
    rhs[3 * n + 2 * m + p] = g**2 * meas.pmu_vi
    return KktSystem(n=n, matrix=matrix, rhs=rhs)


def delta_i_objective(meas: MeasurementArrays, vr, vi, delta_ir, delta_ii) -> float:
    p = meas.pmu_idx
    pmu = meas.g_pmu**2 * ((vr[p] - meas.pmu_vr) ** 2 + (vi[p] - meas.pmu_vi) ** 2)
    rtu = meas.rtu_gamma * (delta_ir**2 + delta_ii**2)
    return 0.5 * float(pmu.sum() + rtu.sum())


def _result_from_solution(n: int, meas: MeasurementArrays, report: SolveReport, scale: float) -> EstimateResult:
    z = report.x
    vr, vi = z[:n], z[n : 2 * n]
    # multipliers scale with the objective; report them for the unscaled problem
    lam_r, lam_i = z[2 * n : 3 * n] / scale, z[3 * n :] / scale
    k = meas.rtu_idx
    delta_ir = -lam_r[k] / meas.rtu_gamma
    delta_ii = -lam_i[k] / meas.rtu_gamma
    return EstimateResult(
        vr=vr,
        vi=vi,
        lambda_r=lam_r,
        lambda_i=lam_i,
        rtu_idx=k,
        delta_ir=delta_ir,
        delta_ii=delta_ii,
        objective=delta_i_objective(meas, vr, vi, delta_ir, delta_ii),
        converged=report.ok,
        iterations=1,
        model=RtuModel.DELTA_I,
        residual=report.residual,
    )


def estimate_measurements(
    adm: SplitAdmittance,
    meas: MeasurementArrays,
    pattern: typing.Optional[KktPattern] = None,
    scale: float = 1.0,
) -> EstimateResult:
    """Linear estimate from plain measurement arrays (what Monte Carlo samples feed in)."""
    pattern = pattern or KktPattern(adm, meas)
    system = pattern.system(meas, scale)
    report = solve_with_report(system.matrix, system.rhs)
    if not report.ok:
        logger.warning("KKT solve residual %.3e above bound %.3e after refinement", report.residual, report.bound)
    return _result_from_solution(adm.n, meas, report, scale)


def solve_linear_se(se: SeCase, adm: typing.Optional[SplitAdmittance] = None, scale: float = 1.0) -> EstimateResult:
    adm = adm or build_split_admittance(se.grid)
    if adm.n != se.grid.n:
        raise IndexMismatch(f"admittance has {adm.n} buses, case has {se.grid.n}")
    result = estimate_measurements(adm, se.measurements, scale=scale)
    logger.info("linear estimate: objective %.6e, residual %.3e", result.objective, result.residual)
    return result
