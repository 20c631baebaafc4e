import pytest

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from circuitse.casegen import RtuDevice, SeCase
from circuitse.exceptions import IndexMismatch, LengthMismatch, SingularSystem
from circuitse.grid import Bus, Gen, GridCase
from circuitse.interface import BusKind, RtuModel
from circuitse.linear_se import assemble_kkt, assemble_kkt_full, solve_linear_se
from circuitse.linsolve import solve_with_report
from circuitse.network import build_split_admittance
from circuitse.oracles import dense_linear_estimate, random_se_case


def test_zero_noise_recovers_truth(zero_noise_se):
    est = solve_linear_se(zero_noise_se)
    assert est.model == RtuModel.DELTA_I
    assert est.converged
    np.testing.assert_allclose(est.v, zero_noise_se.truth.complex(), atol=1e-8)
    assert est.objective < 1e-16
    np.testing.assert_allclose(est.delta_ir, 0, atol=1e-8)
    np.testing.assert_allclose(est.delta_ii, 0, atol=1e-8)


def test_kkt_layout(noisy_se):
    system = assemble_kkt(noisy_se)
    n = noisy_se.grid.n
    assert system.dim == 4 * n
    assert system.index(3) == (3, n + 3, 2 * n + 3, 3 * n + 3)
    est = solve_linear_se(noisy_se)
    z = np.concatenate([est.vr, est.vi, est.lambda_r, est.lambda_i])
    assert np.abs(system.residual(z)).max() < 1e-8


def test_single_rtu_bus_system():
    grid = GridCase(base_mva=100.0, buses=(Bus(1, BusKind.SLACK),), branches=(), gens=(Gen(1),))
    se = SeCase(grid=grid, devices=(RtuDevice(bus=1, vm=2.0, p=2.0, q=0.8, gamma=4.0),))
    g, b = 0.5, 0.2  # p / vm^2, q / vm^2
    expected = np.array(
        [
            [g, b, -0.25, 0.0],
            [-b, g, 0.0, -0.25],
            [0.0, 0.0, g, -b],
            [0.0, 0.0, b, g],
        ]
    )
    system = assemble_kkt(se)
    np.testing.assert_allclose(system.matrix.toarray(), expected, rtol=0, atol=1e-15)
    np.testing.assert_array_equal(system.rhs, np.zeros(4))


def test_rtu_coupling_entries(noisy_se):
    system = assemble_kkt(noisy_se)
    meas = noisy_se.measurements
    n, k = noisy_se.grid.n, meas.rtu_idx
    # the primal rows only see the multipliers through the eliminated correction currents
    coupling = sp.coo_matrix(system.matrix.tocsr()[: 2 * n, 2 * n :])
    coupling.eliminate_zeros()
    assert coupling.nnz == 2 * len(k)
    dense = coupling.toarray()
    np.testing.assert_allclose(dense[k, k], -1.0 / meas.rtu_gamma, rtol=1e-15)
    np.testing.assert_allclose(dense[n + k, n + k], -1.0 / meas.rtu_gamma, rtol=1e-15)


@pytest.mark.parametrize("n_buses,seed", [(10 + k, k) for k in range(20)] + [(30, 20)])
def test_matches_dense_oracle(n_buses, seed):
    se = random_se_case(n_buses, seed)
    est = solve_linear_se(se)
    vr, vi = dense_linear_estimate(se)
    scale = np.abs(np.concatenate([vr, vi])).max()
    np.testing.assert_allclose(est.vr, vr, rtol=0, atol=1e-8 * scale)
    np.testing.assert_allclose(est.vi, vi, rtol=0, atol=1e-8 * scale)


def test_full_system_agrees(noisy_se):
    est = solve_linear_se(noisy_se)
    full = assemble_kkt_full(noisy_se)
    n, m = noisy_se.grid.n, len(est.rtu_idx)
    assert full.dim == 4 * n + 2 * m
    z = spla.spsolve(sp.csc_matrix(full.matrix), full.rhs)
    np.testing.assert_allclose(z[:n], est.vr, atol=1e-9)
    np.testing.assert_allclose(z[n : 2 * n], est.vi, atol=1e-9)
    np.testing.assert_allclose(z[2 * n : 2 * n + m], est.delta_ir, atol=1e-9)
    np.testing.assert_allclose(z[2 * n + m : 2 * n + 2 * m], est.delta_ii, atol=1e-9)


def test_correction_currents_close_kcl(noisy_se):
    est = solve_linear_se(noisy_se)
    meas = noisy_se.measurements
    adm = build_split_admittance(noisy_se.grid)
    ir, ii = adm.current(est.vr, est.vi)
    k = meas.rtu_idx
    vr, vi = est.vr[k], est.vi[k]
    # conj(g + jb) V + dI
    draw_r = meas.rtu_g * vr + meas.rtu_b * vi + est.delta_ir
    draw_i = meas.rtu_g * vi - meas.rtu_b * vr + est.delta_ii
    np.testing.assert_allclose(ir[k] + draw_r, 0, atol=1e-8)
    np.testing.assert_allclose(ii[k] + draw_i, 0, atol=1e-8)


def test_objective_scale_is_invisible(noisy_se):
    a = solve_linear_se(noisy_se)
    b = solve_linear_se(noisy_se, scale=1e3)
    np.testing.assert_allclose(a.v, b.v, atol=1e-9)
    np.testing.assert_allclose(a.lambda_r, b.lambda_r, rtol=1e-6, atol=1e-9)
    assert a.objective == pytest.approx(b.objective, rel=1e-6)


def test_large_case_goes_sparse(synthetic60_se):
    # 4 * 60 rows is under the dense limit; force the sparse path to cross-check both factorizations
    system = assemble_kkt(synthetic60_se)
    dense = solve_with_report(system.matrix, system.rhs)
    sparse = solve_with_report(system.matrix, system.rhs, dense_max_dim=0)
    assert dense.ok and sparse.ok
    np.testing.assert_allclose(dense.x, sparse.x, atol=1e-8)


def test_admittance_size_checked(noisy_se, three_bus):
    with pytest.raises(IndexMismatch):
        solve_linear_se(noisy_se, adm=build_split_admittance(three_bus))


def test_singular_system_reported():
    a = sp.csr_matrix(np.array([[1.0, 2.0], [2.0, 4.0]]))
    with pytest.raises(SingularSystem):
        solve_with_report(a, np.array([1.0, 2.0]))
    with pytest.raises(SingularSystem, match="zero column"):
        solve_with_report(sp.csr_matrix(np.array([[1.0, 0.0], [1.0, 0.0]])), np.ones(2))
    with pytest.raises(LengthMismatch):
        solve_with_report(sp.eye(2), np.ones(3))
