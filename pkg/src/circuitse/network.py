"""Split real/imaginary nodal admittance matrices.

State vectors are laid out as [vr_0 .. vr_{n-1}, vi_0 .. vi_{n-1}] in `GridCase.buses` order,
so the split matrix is the real block form [[G, -B], [B, G]] of Y = G + jB.
"""

import dataclasses
import typing

import numpy as np
import scipy.sparse as sp

from .exceptions import DegenerateBranch, ValidationError
from .grid import GridCase


@dataclasses.dataclass(frozen=True)
class SplitAdmittance:
    n: int
    blocks: sp.csr_matrix  # 2n x 2n
    y: sp.csr_matrix  # n x n complex, same pattern as both real blocks

    def current(self, vr: np.ndarray, vi: np.ndarray) -> typing.Tuple[np.ndarray, np.ndarray]:
        """Network current leaving each bus, split into real and imaginary parts."""
        i = self.blocks @ np.concatenate([vr, vi])
        return i[: self.n], i[self.n :]


@dataclasses.dataclass(frozen=True)
class PerturbationSpec:
    sigma_line_r: float = 0.0
    sigma_line_x: float = 0.0
    sigma_xfmr_r: float = 0.0
    sigma_xfmr_x: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if not value >= 0:
                raise ValidationError(f"{field.name} must be nonnegative, got {value}")

    @classmethod
    def typical(cls) -> "PerturbationSpec":
        """Series-element uncertainties for lines (5% r, 0.5% x) and transformers (0.5% r, 0.1% x)."""
        return cls(sigma_line_r=0.05, sigma_line_x=0.005, sigma_xfmr_r=0.005, sigma_xfmr_x=0.001)

    @classmethod
    def from_json(cls, doc: dict) -> "PerturbationSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown perturbation keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in doc.items()})

    def is_zero(self) -> bool:
        return all(getattr(self, f.name) == 0 for f in dataclasses.fields(self))


@dataclasses.dataclass(frozen=True)
class PerturbedBranches:
    r: np.ndarray
    x: np.ndarray


def classify_branches(c: GridCase) -> np.ndarray:
    """True where a branch is treated as a transformer (off-nominal tap or phase shift)."""
    return np.array([br.is_transformer for br in c.branches], dtype=bool)


def perturb_branches(c: GridCase, spec: PerturbationSpec, rng: np.random.Generator) -> PerturbedBranches:
    """Redraw every branch's series r and x independently around its case value.

    One normal draw per branch for r, then one per branch for x, in case order, so a given
    generator state always maps to the same overlay.
    """
    r = np.array([br.r for br in c.branches], dtype=float)
    x = np.array([br.x for br in c.branches], dtype=float)
    xfmr = classify_branches(c)
    sigma_r = np.where(xfmr, spec.sigma_xfmr_r, spec.sigma_line_r)
    sigma_x = np.where(xfmr, spec.sigma_xfmr_x, spec.sigma_line_x)

    z_r = rng.standard_normal(len(r))
    z_x = rng.standard_normal(len(x))
    r_new = np.maximum(r + sigma_r * np.abs(r) * z_r, 0.0)
    x_new = x + sigma_x * np.abs(x) * z_x
    x_new = np.where((x_new == 0) & (x != 0), x, x_new)
    return PerturbedBranches(r=r_new, x=x_new)


def _branch_series(c: GridCase, overlay: typing.Optional[PerturbedBranches]) -> typing.Tuple[np.ndarray, np.ndarray]:
    if overlay is None:
        return np.array([br.r for br in c.branches], dtype=float), np.array([br.x for br in c.branches], dtype=float)
    if len(overlay.r) != len(c.branches) or len(overlay.x) != len(c.branches):
        raise ValidationError("perturbation overlay does not cover every branch")
    return np.asarray(overlay.r, dtype=float), np.asarray(overlay.x, dtype=float)


def build_complex_admittance(c: GridCase, overlay: typing.Optional[PerturbedBranches] = None) -> sp.csr_matrix:
    n = c.n
    r_all, x_all = _branch_series(c, overlay)
    active = c.in_service()

    rows: typing.List[np.ndarray] = []
    cols: typing.List[np.ndarray] = []
    vals: typing.List[np.ndarray] = []

    if active:
        idx = np.array(active)
        r, x = r_all[idx], x_all[idx]
        degenerate = np.flatnonzero((r == 0) & (x == 0))
        if len(degenerate):
            raise DegenerateBranch(int(idx[degenerate[0]]))
        branches = [c.branches[i] for i in active]
        f = np.array([c.index[br.from_bus] for br in branches])
        t = np.array([c.index[br.to_bus] for br in branches])
        b_half = 0.5j * np.array([br.b_chg for br in branches])
        tap = np.array([br.tap for br in branches])
        shift = np.array([br.shift for br in branches])

        y = 1.0 / (r + 1j * x)
        ratio = tap * np.exp(1j * shift)
        rows += [f, t, f, t]
        cols += [f, t, t, f]
        vals += [y / tap**2 + b_half, y + b_half, -y / np.conj(ratio), -y / ratio]

    shunt = np.array([complex(b.gs, b.bs) for b in c.buses])
    diag = np.arange(n)
    rows.append(diag)
    cols.append(diag)
    vals.append(shunt)

    y_bus = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()
    y_bus.sum_duplicates()
    return y_bus


def build_split_admittance(c: GridCase, overlay: typing.Optional[PerturbedBranches] = None) -> SplitAdmittance:
    y_bus = build_complex_admittance(c, overlay)
    return SplitAdmittance(n=c.n, blocks=split_blocks(y_bus), y=y_bus)


def split_blocks(y_bus: sp.csr_matrix) -> sp.csr_matrix:
    """[[G, -B], [B, G]] keeping one common sparsity pattern (explicit zeros included) for all four blocks."""
    n = y_bus.shape[0]
    coo = y_bus.tocoo()
    g, b = coo.data.real, coo.data.imag
    rows = np.concatenate([coo.row, coo.row, coo.row + n, coo.row + n])
    cols = np.concatenate([coo.col, coo.col + n, coo.col, coo.col + n])
    data = np.concatenate([g, -b, b, g])
    return sp.csr_matrix((data, (rows, cols)), shape=(2 * n, 2 * n))


def split_to_complex(adm: SplitAdmittance) -> sp.csr_matrix:
    n = adm.n
    g = adm.blocks[:n, :n]
    b = adm.blocks[n:, :n]
    return (g + 1j * b).tocsr()
