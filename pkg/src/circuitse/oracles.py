"""Independent reference computations used by the test suite and `circuitse selftest`.

Each oracle solves a problem again by a different route: the power flow in polar coordinates with a
dense Jacobian, the linear estimator as a plain equality-constrained least-squares problem solved by
a generic dense LU, and Newton Jacobians by central finite differences.
"""

import dataclasses
import logging
import typing

import numpy as np
import scipy.linalg

from .case_io import builtin_case
from .casegen import NoiseSpec, SeCase, generate_se_case, synthetic_case
from .exceptions import CircuitSEError, Diverged
from .grid import GridCase
from .interface import BusKind
from .linear_se import solve_linear_se
from .network import build_complex_admittance
from .nonlinear_se import NlState, kkt_jacobian, kkt_residual_vector
from .powerflow import solve_power_flow

logger = logging.getLogger("circuitse.oracles")


def polar_power_flow(c: GridCase, tol: float = 1e-10, max_iter: int = 30) -> np.ndarray:
    """Complex bus voltages from a textbook polar Newton power flow on the dense admittance matrix."""
    y = build_complex_admittance(c).toarray()
    kinds = c.kinds()
    pv = [i for i, k in enumerate(kinds) if k == BusKind.PV]
    pq = [i for i, k in enumerate(kinds) if k == BusKind.PQ]
    pvpq = pv + pq
    injection = -c.net_load()

    vset = c.vset()
    vm = np.array([b.vm_init for b in c.buses], dtype=float)
    vm[pv] = vset[pv]
    vm[c.slack] = vset[c.slack]
    va = np.zeros(c.n)
    va[c.slack] = c.buses[c.slack].va_init

    for _ in range(max_iter):
        v = vm * np.exp(1j * va)
        current = y @ v
        mismatch = v * np.conj(current) - injection
        f = np.concatenate([mismatch.real[pvpq], mismatch.imag[pq]])
        if np.abs(f).max(initial=0.0) < tol:
            return v
        dv = np.diag(v)
        d_angle = 1j * dv @ np.conj(np.diag(current) - y @ dv)
        unit = np.diag(v / np.abs(v))
        d_mag = dv @ np.conj(y @ unit) + np.conj(np.diag(current)) @ unit
        jac = np.block(
            [
                [d_angle.real[np.ix_(pvpq, pvpq)], d_mag.real[np.ix_(pvpq, pq)]],
                [d_angle.imag[np.ix_(pq, pvpq)], d_mag.imag[np.ix_(pq, pq)]],
            ]
        )
        dx = scipy.linalg.solve(jac, -f)
        va[pvpq] += dx[: len(pvpq)]
        vm[pq] += dx[len(pvpq) :]
    raise Diverged(max_iter, float(np.abs(f).max(initial=0.0)))


def dense_linear_estimate(se: SeCase) -> typing.Tuple[np.ndarray, np.ndarray]:
    """The correction-current estimator as min 1/2 x'Hx - h'x s.t. A x = b, with the RTU currents explicit."""
    meas = se.measurements
    n = se.grid.n
    p, k = meas.pmu_idx, meas.rtu_idx
    m = len(k)
    g = meas.g_pmu

    stamped = build_complex_admittance(se.grid).toarray()
    stamped[p, p] += g
    stamped[k, k] += meas.rtu_g - 1j * meas.rtu_b
    a = np.zeros((2 * n, 2 * n + 2 * m))
    a[:, : 2 * n] = np.block([[stamped.real, -stamped.imag], [stamped.imag, stamped.real]])
    a[k, 2 * n + np.arange(m)] = 1.0
    a[n + k, 2 * n + m + np.arange(m)] = 1.0
    b = np.zeros(2 * n)
    b[p] = meas.pmu_ir + g * meas.pmu_vr
    b[n + p] = meas.pmu_ii + g * meas.pmu_vi

    hess = np.zeros(2 * n + 2 * m)
    h = np.zeros(2 * n + 2 * m)
    hess[p] = hess[n + p] = g**2
    h[p] = g**2 * meas.pmu_vr
    h[n + p] = g**2 * meas.pmu_vi
    hess[2 * n :] = np.concatenate([meas.rtu_gamma, meas.rtu_gamma])

    kkt = np.block([[np.diag(hess), a.T], [a, np.zeros((2 * n, 2 * n))]])
    z = scipy.linalg.solve(kkt, np.concatenate([h, b]))
    return z[:n], z[n : 2 * n]


def central_difference_jacobian(fun: typing.Callable[[np.ndarray], np.ndarray], z: np.ndarray, step: float = 1e-6):
    cols = []
    for j in range(len(z)):
        e = np.zeros_like(z)
        e[j] = step
        cols.append((fun(z + e) - fun(z - e)) / (2 * step))
    return np.column_stack(cols)


def random_interior_state(se: SeCase, seed: int = 0) -> NlState:
    rng = np.random.default_rng(seed)
    n, m = se.grid.n, len(se.measurements.rtu_idx)
    return NlState(
        vr=1.0 + 0.05 * rng.standard_normal(n),
        vi=0.1 * rng.standard_normal(n),
        lambda_r=0.01 * rng.standard_normal(n),
        lambda_i=0.01 * rng.standard_normal(n),
        delta_g=0.01 * rng.standard_normal(m),
        delta_b=0.01 * rng.standard_normal(m),
    )


def jacobian_relative_error(se: SeCase, state: NlState, step: float = 1e-6) -> float:
    """max |J - J_fd| / max(1, max |J|) for the nonlinear estimator's Newton Jacobian at `state`."""
    n = se.grid.n
    analytic = kkt_jacobian(se, state).toarray()

    def fun(z):
        return kkt_residual_vector(se, NlState.from_vector(n, z))

    numeric = central_difference_jacobian(fun, state.to_vector(), step)
    return float(np.abs(analytic - numeric).max() / max(1.0, np.abs(analytic).max()))


def oracle_noise() -> NoiseSpec:
    """Noisy measurements with enough PMUs that every small test case gets some."""
    return NoiseSpec(frac_pmu_perfect=0.2, frac_pmu_noisy=0.2)


def random_se_case(n_buses: int, seed: int, spec: typing.Optional[NoiseSpec] = None) -> SeCase:
    c = synthetic_case(n_buses, seed)
    return generate_se_case(solve_power_flow(c), c, spec or oracle_noise(), seed)


@dataclasses.dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str


def _relative(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a - b).max() / max(1.0, np.abs(b).max()))


def selftest(cases: int = 5, seed: int = 0) -> typing.List[Check]:
    """Run the oracle comparisons on the bundled 14-bus case and a few small synthetic cases."""
    checks = []

    def record(name, error, bound):
        passed = bool(error < bound)
        checks.append(Check(name, passed, f"error {error:.3e} (bound {bound:.0e})"))
        logger.log(logging.INFO if passed else logging.ERROR, "%s: %s", name, checks[-1].detail)

    try:
        case14 = builtin_case("case14")
        pf = solve_power_flow(case14)
        record("power flow vs polar oracle (case14)", float(np.abs(pf.v - polar_power_flow(case14)).max()), 1e-8)

        se = generate_se_case(pf, case14, NoiseSpec.zero_noise(frac_pmu_perfect=0.2, frac_pmu_noisy=0.1), seed)
        est = solve_linear_se(se)
        record("zero-noise linear estimate (case14)", float(np.abs(est.v - se.truth.complex()).max()), 1e-8)

        for i in range(cases):
            se = random_se_case(10 + 4 * i, seed + i)
            est = solve_linear_se(se)
            vr, vi = dense_linear_estimate(se)
            error = max(_relative(est.vr, vr), _relative(est.vi, vi))
            record(f"linear estimate vs dense KKT oracle ({se.grid.name})", error, 1e-8)
            state = random_interior_state(se, seed + i)
            error = jacobian_relative_error(se, state)
            record(f"nonlinear Jacobian vs finite differences ({se.grid.name})", error, 1e-5)
    except CircuitSEError as exc:
        checks.append(Check("selftest aborted", False, str(exc)))
        logger.error("selftest aborted: %s", exc)
    return checks
