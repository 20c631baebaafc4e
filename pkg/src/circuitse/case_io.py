"""Reading and writing cases, measurement sets, estimates and Monte Carlo summaries.

Grid cases use a documented subset of the MATPOWER text format:

    mpc.baseMVA  scalar
    mpc.bus      bus_i type Pd Qd Gs Bs area Vm Va ...
    mpc.gen      bus Pg Qg Qmax Qmin Vg mBase status ...
    mpc.branch   fbus tbus r x b rateA rateB rateC ratio angle status ...

Other tables, cell arrays and trailing columns are tolerated and ignored.
Powers are MW/MVAr in the file and per-unit in memory; angles are degrees in the file.
"""

import csv
import importlib.resources
import json
import logging
import math
import os
import re
import sys
import typing

import numpy as np

from .casegen import PmuDevice, RtuDevice, SeCase, Voltages
from .exceptions import ParseError, SchemaError, ValidationError
from .grid import Branch, Bus, Gen, GridCase
from .interface import MATPOWER_BUS_CODES, MATPOWER_BUS_TYPES, DeviceKind

if typing.TYPE_CHECKING:
    from .evaluation import ExperimentRow
    from .linear_se import EstimateResult
    from .montecarlo import McSummary
    from .powerflow import PfSolution

logger = logging.getLogger("circuitse.case_io")

PathLike = typing.Union[str, "os.PathLike[str]"]

_FUNCTION_RE = re.compile(r"^\s*function\s+(?:\w+\s*=\s*)?(\w+)")
_ASSIGN_RE = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")
_TABLES = ("bus", "gen", "branch")
_MIN_COLUMNS = {"bus": 9, "gen": 6, "branch": 4}
# zero-based columns read by parse_case; the rest may hold anything numeric, including Inf limits
_USED_COLUMNS = {"bus": (0, 1, 2, 3, 4, 5, 7, 8), "gen": (0, 1, 2, 5, 7), "branch": (0, 1, 2, 3, 4, 8, 9, 10)}
_PREIMAGE_STEPS = 16


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def _strip_comment(line: str) -> str:
    # MATPOWER strings are single quoted and never contain '%' in the supported subset
    pos = line.find("%")
    return line if pos < 0 else line[:pos]


def _parse_row(text: str, line_no: int) -> typing.List[float]:
    tokens = [t for t in re.split(r"[\s,]+", text.strip()) if t]
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise ParseError(line_no, f"non-numeric entry in row: {text.strip()!r}")


def _scan(text: str):
    """Split MATPOWER text into scalars and numeric tables, keeping source line numbers per row."""
    name = "case"
    scalars: typing.Dict[str, typing.Tuple[int, str]] = {}
    tables: typing.Dict[str, typing.List[typing.Tuple[int, typing.List[float]]]] = {}
    current: typing.Optional[str] = None
    skipping_cell = False

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if skipping_cell:
            if "}" in line:
                skipping_cell = False
            continue
        if current is None:
            m = _FUNCTION_RE.match(line)
            if m:
                name = m.group(1)
                continue
            m = _ASSIGN_RE.match(line)
            if not m:
                if line.strip():
                    logger.debug("ignoring line %d: %s", line_no, line.strip())
                continue
            key, rest = m.group(1), m.group(2).strip()
            if rest.startswith("{"):
                skipping_cell = "}" not in rest
                continue
            if not rest.startswith("["):
                scalars[key] = (line_no, rest.rstrip(";").strip())
                continue
            current = key
            tables[key] = []
            line = rest[1:]

        closed = "]" in line
        body = line.split("]", 1)[0]
        for segment in body.split(";"):
            if segment.strip():
                tables[current].append((line_no, _parse_row(segment, line_no)))
        if closed:
            current = None

    if current is not None:
        raise ParseError(len(text.splitlines()), f"unterminated table mpc.{current}")
    return name, scalars, tables


def _check_used(table: str, row: typing.List[float], line_no: int):
    for col in _USED_COLUMNS[table]:
        if col < len(row) and not math.isfinite(row[col]):
            raise ParseError(line_no, f"mpc.{table} column {col + 1} is not finite: {row[col]}")


def _integer(value: float, line_no: int, what: str) -> int:
    if not value.is_integer():
        raise ParseError(line_no, f"{what} must be an integer, got {value:g}")
    return int(value)


def _per_unit(value: float, base: float) -> float:
    return value / base


def _preimage(x: float, to_file: typing.Callable[[float], float], from_file: typing.Callable[[float], float]) -> float:
    """A file value that `from_file` maps back onto `x` exactly, searched a few ulps around `to_file(x)`."""
    d = to_file(x)
    if from_file(d) == x:
        return d
    lo = hi = d
    for _ in range(_PREIMAGE_STEPS):
        lo, hi = math.nextafter(lo, -math.inf), math.nextafter(hi, math.inf)
        for candidate in (lo, hi):
            if from_file(candidate) == x:
                return candidate
    return d


def parse_case(text: str) -> GridCase:
    name, scalars, tables = _scan(text)

    if "baseMVA" not in scalars:
        raise ParseError(0, "missing mpc.baseMVA")
    line_no, raw = scalars["baseMVA"]
    try:
        base = float(raw)
    except ValueError:
        raise ParseError(line_no, f"baseMVA is not a number: {raw!r}")
    if not math.isfinite(base):
        raise ParseError(line_no, f"baseMVA is not finite: {raw!r}")
    if not base > 0:
        raise ValidationError(f"baseMVA must be positive, got {base}")

    for table in _TABLES:
        if table not in tables:
            raise ParseError(0, f"missing mpc.{table} table")
        for line_no, row in tables[table]:
            if len(row) < _MIN_COLUMNS[table]:
                raise ParseError(line_no, f"mpc.{table} row has {len(row)} columns, need {_MIN_COLUMNS[table]}")
            _check_used(table, row, line_no)

    buses = []
    for line_no, row in tables["bus"]:
        bus_id = _integer(row[0], line_no, "bus id")
        code = _integer(row[1], line_no, "bus type")
        if code not in MATPOWER_BUS_TYPES:
            raise ParseError(line_no, f"unsupported bus type {code}")
        buses.append(
            Bus(
                id=bus_id,
                kind=MATPOWER_BUS_TYPES[code],
                pd=_per_unit(row[2], base),
                qd=_per_unit(row[3], base),
                gs=_per_unit(row[4], base),
                bs=_per_unit(row[5], base),
                vm_init=row[7],
                va_init=math.radians(row[8]),
            )
        )

    gens = []
    for line_no, row in tables["gen"]:
        status = row[7] > 0 if len(row) > 7 else True
        gens.append(
            Gen(
                bus=_integer(row[0], line_no, "generator bus"),
                pg=_per_unit(row[1], base),
                qg=_per_unit(row[2], base),
                vset=row[5],
                status=status,
            )
        )

    branches = []
    for line_no, row in tables["branch"]:
        padded = row + [0.0] * max(0, 11 - len(row))
        tap = padded[8] if padded[8] != 0 else 1.0
        status = padded[10] > 0 if len(row) > 10 else True
        branches.append(
            Branch(
                from_bus=_integer(padded[0], line_no, "branch from bus"),
                to_bus=_integer(padded[1], line_no, "branch to bus"),
                r=padded[2],
                x=padded[3],
                b_chg=padded[4],
                tap=tap,
                shift=math.radians(padded[9]),
                status=status,
            )
        )

    return GridCase(base_mva=base, buses=tuple(buses), branches=tuple(branches), gens=tuple(gens), name=name)


def serialize_case(c: GridCase) -> str:
    base = c.base_mva
    name = re.sub(r"\W", "_", c.name) or "case"

    def mw(v: float) -> str:
        return _fmt(_preimage(v, lambda x: x * base, lambda d: _per_unit(d, base)))

    def deg(v: float) -> str:
        return _fmt(_preimage(v, math.degrees, math.radians))

    out = [
        f"function mpc = {name}",
        "mpc.version = '2';",
        f"mpc.baseMVA = {_fmt(base)};",
        "",
        "%% bus data",
        "%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin",
        "mpc.bus = [",
    ]
    for b in c.buses:
        cols = [
            str(b.id),
            str(MATPOWER_BUS_CODES[b.kind]),
            mw(b.pd),
            mw(b.qd),
            mw(b.gs),
            mw(b.bs),
            "1",
            _fmt(b.vm_init),
            deg(b.va_init),
            "0",
            "1",
            "1.1",
            "0.9",
        ]
        out.append("\t" + "\t".join(cols) + ";")
    out += ["];", "", "%% generator data", "%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus", "mpc.gen = ["]
    for g in c.gens:
        cols = [str(g.bus), mw(g.pg), mw(g.qg), "9999", "-9999", _fmt(g.vset), _fmt(base)]
        cols.append("1" if g.status else "0")
        out.append("\t" + "\t".join(cols) + ";")
    out += ["];", "", "%% branch data", "%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus"]
    out.append("mpc.branch = [")
    for br in c.branches:
        cols = [
            str(br.from_bus),
            str(br.to_bus),
            _fmt(br.r),
            _fmt(br.x),
            _fmt(br.b_chg),
            "0",
            "0",
            "0",
            "0" if br.tap == 1.0 else _fmt(br.tap),
            deg(br.shift),
            "1" if br.status else "0",
        ]
        out.append("\t" + "\t".join(cols) + ";")
    out += ["];", ""]
    return "\n".join(out)


def load_case(path: PathLike) -> GridCase:
    with open(path) as f:
        return parse_case(f.read())


def save_case(c: GridCase, path: PathLike):
    with open(path, "w") as f:
        f.write(serialize_case(c))


def builtin_case(name: str) -> GridCase:
    """Cases shipped with the package, e.g. `builtin_case("case14")`."""
    resource = importlib.resources.files("circuitse") / "data" / f"{name}.m"
    if not resource.is_file():
        raise FileNotFoundError(f"no builtin case named {name!r}")
    return parse_case(resource.read_text())


# Measurement sets


def _require(obj, key: str, path: str):
    if not isinstance(obj, dict):
        raise SchemaError(path, "expected an object")
    if key not in obj:
        raise SchemaError(f"{path}.{key}", "missing")
    return obj[key]


def _number(obj, key: str, path: str, *, positive=False, nonnegative=False) -> float:
    value = _require(obj, key, path)
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise SchemaError(f"{path}.{key}", f"expected a finite number, got {value!r}")
    if positive and not value > 0:
        raise SchemaError(f"{path}.{key}", f"must be positive, got {value!r}")
    if nonnegative and value < 0:
        raise SchemaError(f"{path}.{key}", f"must be nonnegative, got {value!r}")
    return float(value)


def _vector(obj, key: str, path: str, n: int) -> typing.Tuple[float, ...]:
    value = _require(obj, key, path)
    if not isinstance(value, list) or len(value) != n:
        raise SchemaError(f"{path}.{key}", f"expected a list of {n} numbers")
    for i, v in enumerate(value):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise SchemaError(f"{path}.{key}[{i}]", f"expected a number, got {v!r}")
    return tuple(float(v) for v in value)


def _device_to_json(dev: typing.Union[PmuDevice, RtuDevice]) -> dict:
    if isinstance(dev, PmuDevice):
        pmu = {
            "g_pmu": dev.g_pmu,
            "vr": dev.vr,
            "vi": dev.vi,
            "ir": dev.ir,
            "ii": dev.ii,
            "sigma_rel": dev.sigma_rel,
            "perfect": dev.perfect,
        }
        return {"bus": dev.bus, "kind": DeviceKind.PMU.value, "pmu": pmu}
    rtu = {
        "vm": dev.vm,
        "p": dev.p,
        "q": dev.q,
        "sigma_vm_rel": dev.sigma_vm_rel,
        "sigma_p_rel": dev.sigma_p_rel,
        "sigma_q_rel": dev.sigma_q_rel,
        "gamma": dev.gamma,
    }
    return {"bus": dev.bus, "kind": DeviceKind.RTU.value, "rtu": rtu}


def _device_from_json(obj, path: str) -> typing.Union[PmuDevice, RtuDevice]:
    bus = _require(obj, "bus", path)
    if isinstance(bus, bool) or not isinstance(bus, int):
        raise SchemaError(f"{path}.bus", f"expected an integer bus id, got {bus!r}")
    kind = _require(obj, "kind", path)
    if kind == DeviceKind.PMU.value:
        sub_path = f"{path}.pmu"
        pmu = _require(obj, "pmu", path)
        perfect = _require(pmu, "perfect", sub_path)
        if not isinstance(perfect, bool):
            raise SchemaError(f"{sub_path}.perfect", "expected a boolean")
        return PmuDevice(
            bus=bus,
            vr=_number(pmu, "vr", sub_path),
            vi=_number(pmu, "vi", sub_path),
            ir=_number(pmu, "ir", sub_path),
            ii=_number(pmu, "ii", sub_path),
            g_pmu=_number(pmu, "g_pmu", sub_path, positive=True),
            sigma_rel=_number(pmu, "sigma_rel", sub_path, nonnegative=True),
            perfect=perfect,
        )
    if kind == DeviceKind.RTU.value:
        sub_path = f"{path}.rtu"
        rtu = _require(obj, "rtu", path)
        return RtuDevice(
            bus=bus,
            vm=_number(rtu, "vm", sub_path, positive=True),
            p=_number(rtu, "p", sub_path),
            q=_number(rtu, "q", sub_path),
            sigma_vm_rel=_number(rtu, "sigma_vm_rel", sub_path, nonnegative=True),
            sigma_p_rel=_number(rtu, "sigma_p_rel", sub_path, nonnegative=True),
            sigma_q_rel=_number(rtu, "sigma_q_rel", sub_path, nonnegative=True),
            gamma=_number(rtu, "gamma", sub_path, positive=True),
        )
    raise SchemaError(f"{path}.kind", f"expected 'pmu' or 'rtu', got {kind!r}")


def se_case_to_json(se: SeCase) -> dict:
    doc: typing.Dict[str, typing.Any] = {"case_name": se.grid.name, "seed": se.seed}
    if se.truth is not None:
        doc["truth"] = {"vr": list(se.truth.vr), "vi": list(se.truth.vi)}
    doc["devices"] = [_device_to_json(d) for d in se.devices]
    # the network travels with the measurements so a measurement file is self-contained
    doc["grid"] = serialize_case(se.grid)
    return doc


def se_case_from_json(doc, grid: typing.Optional[GridCase] = None) -> SeCase:
    path = "$"
    case_name = _require(doc, "case_name", path)
    seed = _require(doc, "seed", path)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise SchemaError("$.seed", f"expected an integer, got {seed!r}")
    if grid is None:
        text = _require(doc, "grid", path)
        if not isinstance(text, str):
            raise SchemaError("$.grid", "expected MATPOWER text")
        try:
            grid = parse_case(text)
        except (ParseError, ValidationError) as exc:
            raise SchemaError("$.grid", str(exc)) from exc
    if not isinstance(case_name, str):
        raise SchemaError("$.case_name", "expected a string")

    raw_devices = _require(doc, "devices", path)
    if not isinstance(raw_devices, list):
        raise SchemaError("$.devices", "expected a list")
    devices = [_device_from_json(d, f"$.devices[{i}]") for i, d in enumerate(raw_devices)]
    by_bus = {}
    for i, d in enumerate(devices):
        if d.bus not in grid.index:
            raise SchemaError(f"$.devices[{i}].bus", f"unknown bus {d.bus}")
        if d.bus in by_bus:
            raise SchemaError(f"$.devices[{i}].bus", f"second device on bus {d.bus}")
        by_bus[d.bus] = d
    missing = [b.id for b in grid.buses if b.id not in by_bus]
    if missing:
        raise SchemaError("$.devices", f"buses without a device: {missing[:10]}")

    truth = None
    if "truth" in doc and doc["truth"] is not None:
        raw = doc["truth"]
        truth = Voltages(vr=_vector(raw, "vr", "$.truth", grid.n), vi=_vector(raw, "vi", "$.truth", grid.n))
    return SeCase(grid=grid, devices=tuple(by_bus[b.id] for b in grid.buses), truth=truth, seed=seed)


def _write_json(doc, path: typing.Optional[PathLike]):
    text = json.dumps(doc, indent=1) + "\n"
    if path is None:
        sys.stdout.write(text)
        return
    with open(path, "w") as f:
        f.write(text)


def save_se_case(se: SeCase, path: typing.Optional[PathLike]):
    _write_json(se_case_to_json(se), path)


def load_se_case(path: PathLike, grid: typing.Optional[GridCase] = None) -> SeCase:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise SchemaError("$", f"invalid JSON: {exc}") from exc
    return se_case_from_json(doc, grid)


# Results


def power_flow_to_json(c: GridCase, pf: "PfSolution") -> dict:
    v = pf.v
    return {
        "case_name": c.name,
        "buses": [b.id for b in c.buses],
        "vr": [float(x) for x in pf.vr],
        "vi": [float(x) for x in pf.vi],
        "vm": [float(x) for x in np.abs(v)],
        "va": [float(x) for x in np.angle(v)],
        "iterations": int(pf.iterations),
        "max_mismatch": float(pf.max_mismatch),
    }


def save_power_flow(c: GridCase, pf: "PfSolution", path: typing.Optional[PathLike]):
    _write_json(power_flow_to_json(c, pf), path)


def result_to_json(result: "EstimateResult", truth: typing.Optional[Voltages] = None) -> dict:
    from .evaluation import sigma_max, sigma_ss

    doc: typing.Dict[str, typing.Any] = {
        "model": result.model.value,
        "vr": [float(v) for v in result.vr],
        "vi": [float(v) for v in result.vi],
        "objective": float(result.objective),
        "iterations": int(result.iterations),
        "converged": bool(result.converged),
        "residual": float(result.residual),
        "rtu_positions": [int(k) for k in result.rtu_idx],
        "delta_ir": [float(v) for v in result.delta_ir],
        "delta_ii": [float(v) for v in result.delta_ii],
    }
    if result.delta_g is not None:
        doc["delta_g"] = [float(v) for v in result.delta_g]
        doc["delta_b"] = [float(v) for v in result.delta_b]
    if truth is not None:
        est = (result.vr, result.vi)
        ref = (np.asarray(truth.vr), np.asarray(truth.vi))
        doc["sigma_ss"] = sigma_ss(est, ref)
        doc["sigma_max"] = sigma_max(est, ref)
    return doc


def save_result(result: "EstimateResult", path: typing.Optional[PathLike], truth: typing.Optional[Voltages] = None):
    _write_json(result_to_json(result, truth), path)


def load_result(path: PathLike) -> dict:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise SchemaError("$", f"invalid JSON: {exc}") from exc
    for key in ("model", "vr", "vi", "objective", "iterations", "converged"):
        _require(doc, key, "$")
    if len(doc["vr"]) != len(doc["vi"]):
        raise SchemaError("$.vi", "length differs from $.vr")
    return doc


def save_bus_errors(grid: GridCase, vr, vi, truth: Voltages, path: PathLike):
    """Per-bus squared rectangular voltage error, one CSV row per bus."""
    err = (np.asarray(vr) - np.asarray(truth.vr)) ** 2 + (np.asarray(vi) - np.asarray(truth.vi)) ** 2
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bus", "sq_error"])
        for bus, e in zip(grid.buses, err):
            writer.writerow([bus.id, _fmt(float(e))])


TRIAL_COLUMNS = ("case", "model", "measure", "weighting", "mean", "ci_half_width", "trials", "stopped_by", "failed")


def save_trial_rows(rows: typing.Sequence["ExperimentRow"], path: typing.Optional[PathLike]):
    """Experiment rows as CSV, one line per (weighting, model, measure)."""

    def write(f):
        writer = csv.DictWriter(f, fieldnames=TRIAL_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            record = row.as_record()
            writer.writerow({k: _fmt(v) if isinstance(v, float) else v for k, v in record.items()})

    if path is None:
        write(sys.stdout)
        return
    with open(path, "w", newline="") as f:
        write(f)


# Monte Carlo summaries


def summary_to_json(summary: "McSummary") -> dict:
    def floats(a):
        return [float(v) for v in a]

    doc = {
        "case_name": summary.grid.name,
        "buses": [b.id for b in summary.grid.buses],
        "samples_completed": summary.samples_completed,
        "failed_samples": list(summary.failed_samples),
        "baseline": {"vr": floats(summary.baseline.vr), "vi": floats(summary.baseline.vi)},
    }
    for q in ("vm", "va", "vr", "vi"):
        stats = getattr(summary, q)
        doc[q] = {k: floats(getattr(stats, k)) for k in ("mean", "std", "min", "max")}
    if summary.pmu_hops is not None:
        doc["pmu_hops"] = [int(h) for h in summary.pmu_hops]
    return doc


def _write_histograms(grid: GridCase, edges: np.ndarray, counts: np.ndarray, path: PathLike):
    bins = counts.shape[1]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        header = ["bus"] + [f"edge_{i}" for i in range(bins + 1)] + [f"count_{i}" for i in range(1, bins + 1)]
        writer.writerow(header)
        for i, bus in enumerate(grid.buses):
            writer.writerow([bus.id] + [_fmt(float(e)) for e in edges[i]] + [int(c) for c in counts[i]])


def save_summary(summary: "McSummary", path: typing.Optional[PathLike], hist_dir: typing.Optional[PathLike] = None):
    _write_json(summary_to_json(summary), path)
    if hist_dir is not None:
        os.makedirs(hist_dir, exist_ok=True)
        _write_histograms(summary.grid, summary.vm_hist.edges, summary.vm_hist.counts, os.path.join(hist_dir, "vm.csv"))
        _write_histograms(summary.grid, summary.va_hist.edges, summary.va_hist.counts, os.path.join(hist_dir, "va.csv"))
