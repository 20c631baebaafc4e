import enum


class BusKind(enum.Enum):
    SLACK = "slack"
    PV = "pv"
    PQ = "pq"


# MATPOWER bus type codes
MATPOWER_BUS_TYPES = {1: BusKind.PQ, 2: BusKind.PV, 3: BusKind.SLACK}
MATPOWER_BUS_CODES = {kind: code for code, kind in MATPOWER_BUS_TYPES.items()}


class DeviceKind(enum.Enum):
    PMU = "pmu"
    RTU = "rtu"


class RtuModel(enum.Enum):
    DELTA_I = "delta-i"  # linear, correction current sources
    DELTA_Y = "delta-y"  # bilinear, correction admittances


class Measure(enum.Enum):
    SIGMA_SS = "ss"
    SIGMA_MAX = "max"


class Init(enum.Enum):
    FLAT = "flat"
    FROM_CASE = "from_case"
    FROM_LINEAR = "from_linear"


class StoppedBy(enum.Enum):
    CI = "ci"
    MAX_TRIALS = "max_trials"


class ExecutorKind(enum.Enum):
    THREAD = "thread"
    PROCESS = "process"
