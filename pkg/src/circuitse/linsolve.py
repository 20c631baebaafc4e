"""Direct solves shared by the power flow and both estimators.

Small systems go through a dense LU, larger ones through SuperLU with a COLAMD column
ordering. Both are single-call, factorization state never outlives the call.
"""

import dataclasses
import logging
import typing

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .exceptions import LengthMismatch, SingularSystem

logger = logging.getLogger("circuitse.linsolve")

DENSE_MAX_DIM = 400
RESIDUAL_RTOL = 1e-9
PIVOT_RTOL = 1e-13


@dataclasses.dataclass(frozen=True)
class SolveReport:
    x: np.ndarray
    residual: float  # max-abs of A x - b
    bound: float  # residual bound that counts as a good solve
    refined: bool

    @property
    def ok(self) -> bool:
        return self.residual <= self.bound


def _structural_check(a: sp.csc_matrix):
    # explicit zeros don't count
    pattern = a.copy()
    pattern.eliminate_zeros()
    empty = np.flatnonzero(np.diff(pattern.indptr) == 0)
    if len(empty):
        raise SingularSystem(int(empty[0]), "structurally singular: zero column")
    empty = np.flatnonzero(np.bincount(pattern.indices, minlength=a.shape[0]) == 0)
    if len(empty):
        raise SingularSystem(int(empty[0]), "structurally singular: zero row")


def _dense_solver(a: sp.spmatrix) -> typing.Callable[[np.ndarray], np.ndarray]:
    dense = a.toarray()
    lu, piv = scipy.linalg.lu_factor(dense, check_finite=True)
    diag = np.abs(np.diag(lu))
    scale = max(np.abs(dense).max(), 1.0)
    tiny = np.flatnonzero(diag <= PIVOT_RTOL * scale)
    if len(tiny):
        raise SingularSystem(int(tiny[0]), "numerically singular at column")
    return lambda rhs: scipy.linalg.lu_solve((lu, piv), rhs, check_finite=False)


def _sparse_solver(a: sp.csc_matrix) -> typing.Callable[[np.ndarray], np.ndarray]:
    try:
        lu = spla.splu(a, permc_spec="COLAMD")
    except RuntimeError as exc:
        raise SingularSystem(None, f"sparse factorization failed: {exc}") from exc
    diag = np.abs(lu.U.diagonal())
    scale = max(abs(a).max(), 1.0)
    tiny = np.flatnonzero(diag <= PIVOT_RTOL * scale)
    if len(tiny):
        # A = Pr^T L U Pc^T: column j of U is column k of A where perm_c[k] == j
        column = int(np.flatnonzero(lu.perm_c == tiny[0])[0])
        raise SingularSystem(column, "numerically singular at column")
    return lu.solve


def solve_with_report(a, b: np.ndarray, *, dense_max_dim: int = DENSE_MAX_DIM) -> SolveReport:
    """Factor `a`, solve, and check `max|A x - b| <= 1e-9 * max(1, max|b|)`, refining once if needed."""
    a = sp.csc_matrix(a)
    b = np.asarray(b, dtype=float)
    n = a.shape[0]
    if a.shape != (n, n):
        raise LengthMismatch(f"matrix must be square, got {a.shape}")
    if b.shape != (n,):
        raise LengthMismatch(f"right-hand side has shape {b.shape}, expected ({n},)")
    if not np.all(np.isfinite(a.data)) or not np.all(np.isfinite(b)):
        raise SingularSystem(None, "non-finite entries")
    _structural_check(a)

    solve = _dense_solver(a) if n <= dense_max_dim else _sparse_solver(a)
    x = solve(b)
    if not np.all(np.isfinite(x)):
        raise SingularSystem(None, "solve produced non-finite values")

    bound = RESIDUAL_RTOL * max(1.0, float(np.abs(b).max(initial=0.0)))
    r = b - a @ x
    residual = float(np.abs(r).max(initial=0.0))
    refined = False
    if residual > bound:
        x = x + solve(r)
        r = b - a @ x
        residual = float(np.abs(r).max(initial=0.0))
        refined = True
        logger.debug("iterative refinement applied, residual now %.3e (bound %.3e)", residual, bound)
    return SolveReport(x=x, residual=residual, bound=bound, refined=refined)


def solve_sparse_linear(a, b: np.ndarray, *, dense_max_dim: int = DENSE_MAX_DIM) -> np.ndarray:
    report = solve_with_report(a, b, dense_max_dim=dense_max_dim)
    if not report.ok:
        logger.warning("linear solve residual %.3e exceeds bound %.3e", report.residual, report.bound)
    return report.x
