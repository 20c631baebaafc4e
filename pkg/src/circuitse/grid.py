"""Network records: the known topology every estimator works on.

All electrical quantities are per-unit on `GridCase.base_mva`, angles in radians.
Bus order in `GridCase.buses` is the bus index map used by every matrix and vector.
"""

import dataclasses
import functools
import typing

import numpy as np

from .exceptions import ValidationError
from .interface import BusKind


@dataclasses.dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    pd: float = 0.0
    qd: float = 0.0
    gs: float = 0.0
    bs: float = 0.0
    vm_init: float = 1.0
    va_init: float = 0.0


@dataclasses.dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_chg: float = 0.0
    tap: float = 1.0
    shift: float = 0.0
    status: bool = True

    @property
    def is_transformer(self) -> bool:
        return self.tap != 1.0 or self.shift != 0.0


@dataclasses.dataclass(frozen=True)
class Gen:
    bus: int
    pg: float = 0.0
    qg: float = 0.0
    vset: float = 1.0
    status: bool = True


@dataclasses.dataclass(frozen=True)
class GridCase:
    base_mva: float
    buses: typing.Tuple[Bus, ...]
    branches: typing.Tuple[Branch, ...]
    gens: typing.Tuple[Gen, ...]
    name: str = "case"

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "gens", tuple(self.gens))
        self.validate()

    def validate(self):
        if not self.base_mva > 0:
            raise ValidationError(f"baseMVA must be positive, got {self.base_mva}")
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate bus ids")
        slacks = [b.id for b in self.buses if b.kind == BusKind.SLACK]
        if len(slacks) != 1:
            raise ValidationError(f"exactly one slack bus required, found {len(slacks)}")
        known = set(ids)
        for i, br in enumerate(self.branches):
            for end in (br.from_bus, br.to_bus):
                if end not in known:
                    raise ValidationError(f"branch {i} references unknown bus {end}")
            if br.r == 0 and br.x == 0:
                raise ValidationError(f"branch {i} has zero impedance")
            if not br.tap > 0:
                raise ValidationError(f"branch {i} has non-positive tap {br.tap}")
        for bus in self.buses:
            if not bus.vm_init > 0:
                raise ValidationError(f"bus {bus.id} has non-positive initial voltage")
        kinds = {b.id: b.kind for b in self.buses}
        for g in self.gens:
            if g.bus not in known:
                raise ValidationError(f"generator references unknown bus {g.bus}")
            if g.status and kinds[g.bus] == BusKind.PQ:
                raise ValidationError(f"generator at bus {g.bus} must sit on a slack or pv bus")
            if not g.vset > 0:
                raise ValidationError(f"generator at bus {g.bus} has non-positive voltage setpoint")

    @property
    def n(self) -> int:
        return len(self.buses)

    @functools.cached_property
    def index(self) -> typing.Dict[int, int]:
        """Bus id -> position in every state vector."""
        return {b.id: i for i, b in enumerate(self.buses)}

    @functools.cached_property
    def slack(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.kind == BusKind.SLACK)

    def kinds(self) -> typing.List[BusKind]:
        return [b.kind for b in self.buses]

    def net_load(self) -> np.ndarray:
        """Complex scheduled consumption per bus (load minus in-service generation)."""
        s = np.array([complex(b.pd, b.qd) for b in self.buses])
        for g in self.gens:
            if g.status:
                s[self.index[g.bus]] -= complex(g.pg, g.qg)
        return s

    def vset(self) -> np.ndarray:
        """Voltage magnitude setpoints; buses without an in-service generator keep vm_init."""
        v = np.array([b.vm_init for b in self.buses], dtype=float)
        for g in self.gens:
            if g.status:
                v[self.index[g.bus]] = g.vset
        return v

    def in_service(self) -> typing.List[int]:
        return [i for i, br in enumerate(self.branches) if br.status]
