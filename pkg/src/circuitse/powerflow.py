"""Newton-Raphson power flow on rectangular current-injection equations.

Unknowns are [vr, vi, q_pv]: both voltage components at every bus plus the free reactive
consumption of each pv bus. Equations are KCL (network current + drawn current = 0) at every
non-slack bus, the fixed slack voltage, and |V|^2 = vset^2 at pv buses.
"""

import dataclasses
import logging
import typing

import numpy as np
import scipy.sparse as sp

from .exceptions import Diverged, SingularJacobian, SingularSystem, ValidationError
from .grid import GridCase
from .interface import BusKind, Init
from .linsolve import solve_sparse_linear
from .network import SplitAdmittance, build_split_admittance

logger = logging.getLogger("circuitse.powerflow")


@dataclasses.dataclass(frozen=True)
class PfOptions:
    tol: float = 1e-8
    max_iter: int = 50
    init: Init = Init.FLAT

    def __post_init__(self):
        if not self.tol > 0:
            raise ValidationError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ValidationError(f"max_iter must be at least 1, got {self.max_iter}")
        if self.init not in (Init.FLAT, Init.FROM_CASE):
            raise ValidationError(f"unsupported power flow init {self.init}")


@dataclasses.dataclass(frozen=True)
class PfSolution:
    vr: np.ndarray
    vi: np.ndarray
    iterations: int
    max_mismatch: float
    q_pv: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros(0))  # reactive consumption at pv buses

    @property
    def v(self) -> np.ndarray:
        return self.vr + 1j * self.vi


def constant_power_draw(vr, vi, p, q) -> typing.Tuple[np.ndarray, np.ndarray]:
    """Current drawn by a constant complex power p + jq at voltage vr + j vi: conj(S / V)."""
    m = vr**2 + vi**2
    return (p * vr + q * vi) / m, (p * vi - q * vr) / m


class _Layout:
    def __init__(self, c: GridCase):
        kinds = c.kinds()
        self.n = c.n
        self.slack = c.slack
        self.pv = np.array([i for i, k in enumerate(kinds) if k == BusKind.PV], dtype=int)
        self.free = np.array([i for i in range(self.n) if i != self.slack], dtype=int)
        s = c.net_load()
        self.p = s.real
        self.q = s.imag.copy()
        self.q[self.pv] = 0.0  # replaced by the unknowns
        self.vset = c.vset()
        self.slack_v = self.vset[self.slack] * np.exp(1j * c.buses[self.slack].va_init)

    def initial(self, c: GridCase, init: Init) -> np.ndarray:
        vm = np.array([b.vm_init for b in c.buses], dtype=float)
        va = np.zeros(self.n) if init == Init.FLAT else np.array([b.va_init for b in c.buses])
        vm[self.pv] = self.vset[self.pv]
        v = vm * np.exp(1j * va)
        v[self.slack] = self.slack_v
        return np.concatenate([v.real, v.imag, np.zeros(len(self.pv))])


def _residual(adm: SplitAdmittance, lay: _Layout, z: np.ndarray) -> typing.Tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = lay.n
    vr, vi, q_pv = z[:n], z[n : 2 * n], z[2 * n :]
    q = lay.q.copy()
    q[lay.pv] = q_pv
    net_r, net_i = adm.current(vr, vi)
    draw_r, draw_i = constant_power_draw(vr, vi, lay.p, q)
    kcl = np.concatenate([(net_r + draw_r)[lay.free], (net_i + draw_i)[lay.free]])
    slack = np.array([vr[lay.slack] - lay.slack_v.real, vi[lay.slack] - lay.slack_v.imag])
    magnitude = vr[lay.pv] ** 2 + vi[lay.pv] ** 2 - lay.vset[lay.pv] ** 2
    return kcl, slack, magnitude


def _jacobian(adm: SplitAdmittance, lay: _Layout, z: np.ndarray) -> sp.csr_matrix:
    n, npv = lay.n, len(lay.pv)
    vr, vi, q_pv = z[:n], z[n : 2 * n], z[2 * n :]
    q = lay.q.copy()
    q[lay.pv] = q_pv
    p = lay.p
    m = vr**2 + vi**2
    m2 = m**2
    d_rr = (p * (vi**2 - vr**2) - 2 * q * vr * vi) / m2
    d_ri = (q * (vr**2 - vi**2) - 2 * p * vr * vi) / m2
    d_ir = d_ri
    d_ii = (p * (vr**2 - vi**2) + 2 * q * vr * vi) / m2

    # Row numbering follows the variable numbering: KCL rows of bus k sit at k and n + k, the slack's two
    # rows are replaced by its fixing equations, and pv magnitude rows follow at 2n + j.
    net = adm.blocks.tocoo()
    keep = (net.row != lay.slack) & (net.row != n + lay.slack)
    rows = [net.row[keep]]
    cols = [net.col[keep]]
    vals = [net.data[keep]]

    f = lay.free
    rows += [f, f, n + f, n + f]
    cols += [f, n + f, f, n + f]
    vals += [d_rr[f], d_ri[f], d_ir[f], d_ii[f]]

    rows.append(np.array([lay.slack, n + lay.slack]))
    cols.append(np.array([lay.slack, n + lay.slack]))
    vals.append(np.ones(2))

    if npv:
        pv = lay.pv
        q_cols = 2 * n + np.arange(npv)
        rows += [pv, n + pv]
        cols += [q_cols, q_cols]
        vals += [vi[pv] / m[pv], -vr[pv] / m[pv]]
        rows += [q_cols, q_cols]
        cols += [pv, n + pv]
        vals += [2 * vr[pv], 2 * vi[pv]]

    dim = 2 * n + npv
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(dim, dim))


def _stack(lay: _Layout, kcl, slack, magnitude) -> np.ndarray:
    n = lay.n
    f = np.zeros(2 * n + len(lay.pv))
    f[lay.free] = kcl[: len(lay.free)]
    f[n + lay.free] = kcl[len(lay.free) :]
    f[[lay.slack, n + lay.slack]] = slack
    f[2 * n :] = magnitude
    return f


def kcl_mismatch(c: GridCase, vr: np.ndarray, vi: np.ndarray, q_pv: typing.Optional[np.ndarray] = None) -> float:
    """Max-abs KCL residual at non-slack buses, recomputed from a fresh admittance build.

    pv reactive consumption is solved from KCL when not given, so only the real row of a pv bus counts then.
    """
    adm = build_split_admittance(c)
    lay = _Layout(c)
    if q_pv is None:
        net_r, net_i = adm.current(vr, vi)
        v = vr + 1j * vi
        s = v * np.conj(-(net_r + 1j * net_i))  # power consumed by the bus model
        q_pv = s.imag[lay.pv]
    kcl, _, _ = _residual(adm, lay, np.concatenate([vr, vi, q_pv]))
    return float(np.abs(kcl).max(initial=0.0))


def solve_power_flow(c: GridCase, opt: typing.Optional[PfOptions] = None) -> PfSolution:
    opt = opt or PfOptions()
    adm = build_split_admittance(c)
    lay = _Layout(c)
    n = lay.n
    z = lay.initial(c, opt.init)

    mismatch = float("inf")
    for iteration in range(1, opt.max_iter + 1):
        f = _stack(lay, *_residual(adm, lay, z))
        try:
            dz = solve_sparse_linear(_jacobian(adm, lay, z), -f)
        except SingularSystem as exc:
            raise SingularJacobian(f"power flow Jacobian singular at iteration {iteration}: {exc}") from exc
        z = z + dz

        kcl, slack, magnitude = _residual(adm, lay, z)
        mismatch = float(np.abs(kcl).max(initial=0.0))
        magnitude_err = float(np.abs(magnitude).max(initial=0.0))
        logger.debug("pf iteration %d: max current mismatch %.3e", iteration, mismatch)
        if not np.isfinite(mismatch) or not np.all(np.isfinite(z)):
            raise Diverged(iteration, mismatch)
        if mismatch < opt.tol and magnitude_err < opt.tol:
            logger.info("power flow converged in %d iterations (mismatch %.3e)", iteration, mismatch)
            return PfSolution(
                vr=z[:n].copy(),
                vi=z[n : 2 * n].copy(),
                iterations=iteration,
                max_mismatch=mismatch,
                q_pv=z[2 * n :].copy(),
            )

    raise Diverged(opt.max_iter, mismatch)
