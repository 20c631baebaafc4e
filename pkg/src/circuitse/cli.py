"""Command line entry point: `circuitse {pf,gen-case,estimate,trials,mc,selftest}`.

Exit codes: 0 success, 1 usage or invalid input, 2 numerical failure, 3 unreadable or malformed file.
"""

import argparse
import json
import logging
import sys
import typing

from . import __version__
from .case_io import (
    load_case,
    load_se_case,
    save_bus_errors,
    save_power_flow,
    save_result,
    save_se_case,
    save_summary,
    save_trial_rows,
)
from .casegen import NoiseSpec, generate_se_case
from .evaluation import StoppingRule, estimate, run_experiment
from .exceptions import CircuitSEError, NumericalError, ParseError, SchemaError
from .interface import ExecutorKind, Init, Measure, RtuModel
from .montecarlo import McConfig, run_mc
from .network import PerturbationSpec
from .nonlinear_se import NlOptions
from .oracles import selftest
from .powerflow import PfOptions, solve_power_flow

logger = logging.getLogger("circuitse")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_noise_flags(p: argparse.ArgumentParser):
    defaults = NoiseSpec()
    p.add_argument("--pmu-perfect", type=float, default=defaults.frac_pmu_perfect, help="fraction of perfect PMUs")
    p.add_argument("--pmu-noisy", type=float, default=defaults.frac_pmu_noisy, help="fraction of noisy PMUs")
    p.add_argument("--pmu-sigma", type=float, default=defaults.pmu_sigma_rel, help="relative PMU sigma")
    p.add_argument("--rtu-sigma-vm", type=float, default=defaults.rtu_sigma_vm_rel)
    p.add_argument("--rtu-sigma-pq", type=float, default=defaults.rtu_sigma_pq_rel)
    p.add_argument("--g-pmu", type=float, default=defaults.g_pmu, help="PMU conductance (p.u.)")
    p.add_argument(
        "--degraded-frac", "--degraded", type=float, default=defaults.degraded_frac, help="fraction of degraded RTUs"
    )
    p.add_argument("--degraded-sigma-mult", type=float, default=defaults.degraded_sigma_mult)
    p.add_argument("--degraded-weight-div", type=float, default=defaults.degraded_weight_div)
    p.add_argument("--rtu-gamma", type=float, default=defaults.rtu_gamma, help="weight of a regular RTU")
    p.add_argument(
        "--weight-exponent",
        type=float,
        default=defaults.weight_exponent,
        help="degraded RTU weight is rtu-gamma / degraded-weight-div ** exponent",
    )
    weighting = p.add_mutually_exclusive_group()
    weighting.add_argument("--weighted", dest="weighted", action="store_true", default=True)
    weighting.add_argument("--unweighted", dest="weighted", action="store_false")


def _noise_spec(args) -> NoiseSpec:
    return NoiseSpec(
        frac_pmu_perfect=args.pmu_perfect,
        frac_pmu_noisy=args.pmu_noisy,
        pmu_sigma_rel=args.pmu_sigma,
        rtu_sigma_vm_rel=args.rtu_sigma_vm,
        rtu_sigma_pq_rel=args.rtu_sigma_pq,
        g_pmu=args.g_pmu,
        degraded_frac=args.degraded_frac,
        degraded_sigma_mult=args.degraded_sigma_mult,
        degraded_weight_div=args.degraded_weight_div,
        rtu_gamma=args.rtu_gamma,
        weight_exponent=args.weight_exponent,
        weighted=args.weighted,
    )


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("-o", "--output", default=None, help="output file (stdout when omitted)")

    parser = _Parser(prog="circuitse", description="Equivalent-circuit power grid state estimation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pf", parents=[common], help="solve the power flow of a MATPOWER case")
    p.add_argument("case")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=50)
    p.add_argument("--init", choices=[Init.FLAT.value, Init.FROM_CASE.value], default=Init.FLAT.value)

    p = sub.add_parser("gen-case", parents=[common], help="generate a noisy measurement set from a case")
    p.add_argument("case")
    _add_noise_flags(p)

    p = sub.add_parser("estimate", parents=[common], help="estimate the grid state from a measurement set")
    p.add_argument("secase")
    p.add_argument("--model", choices=[m.value for m in RtuModel], default=RtuModel.DELTA_I.value)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=50)
    p.add_argument("--errors-csv", default=None, help="per-bus squared error CSV (needs truth)")

    p = sub.add_parser("trials", parents=[common], help="repeated estimation with confidence-interval stopping")
    p.add_argument("case")
    p.add_argument("--model", choices=[m.value for m in RtuModel], action="append")
    p.add_argument("--measure", choices=[m.value for m in Measure], action="append")
    p.add_argument("--ci", type=float, default=0.99)
    p.add_argument("--rel", type=float, default=0.05)
    p.add_argument("--min-trials", type=int, default=30)
    p.add_argument("--max-trials", type=int, default=1000)
    p.add_argument("--both-weightings", action="store_true", help="emit weighted and unweighted rows")
    _add_noise_flags(p)

    p = sub.add_parser("mc", parents=[common], help="Monte Carlo probabilistic state estimation")
    p.add_argument("secase")
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--net-uncertainty", default=None, help="perturbation JSON file, or 'typical' for the defaults")
    p.add_argument("--bins", type=int, default=64)
    p.add_argument("--pilot", type=int, default=500)
    p.add_argument("--executor", choices=[e.value for e in ExecutorKind], default=ExecutorKind.THREAD.value)
    p.add_argument("--hist-dir", default=None)

    p = sub.add_parser("selftest", parents=[common], help="compare against the built-in reference oracles")
    p.add_argument("--cases", type=int, default=5)
    return parser


def _cmd_pf(args) -> int:
    c = load_case(args.case)
    pf = solve_power_flow(c, PfOptions(tol=args.tol, max_iter=args.max_iter, init=Init(args.init)))
    save_power_flow(c, pf, args.output)
    return EXIT_OK


def _cmd_gen_case(args) -> int:
    c = load_case(args.case)
    pf = solve_power_flow(c)
    se = generate_se_case(pf, c, _noise_spec(args), args.seed)
    save_se_case(se, args.output)
    return EXIT_OK


def _cmd_estimate(args) -> int:
    se = load_se_case(args.secase)
    model = RtuModel(args.model)
    result = estimate(se, model, NlOptions(tol=args.tol, max_iter=args.max_iter))
    save_result(result, args.output, se.truth)
    if args.errors_csv:
        if se.truth is None:
            raise UsageError("--errors-csv needs a measurement set with embedded truth")
        save_bus_errors(se.grid, result.vr, result.vi, se.truth, args.errors_csv)
    return EXIT_OK


def _cmd_trials(args) -> int:
    c = load_case(args.case)
    rule = StoppingRule(level=args.ci, rel=args.rel, min_trials=args.min_trials, max_trials=args.max_trials)
    spec = _noise_spec(args)
    rows = run_experiment(
        c,
        spec,
        models=[RtuModel(m) for m in (args.model or [RtuModel.DELTA_I.value])],
        measures=[Measure(m) for m in (args.measure or [Measure.SIGMA_SS.value])],
        weightings=(True, False) if args.both_weightings else (spec.weighted,),
        stopping=rule,
        seed=args.seed,
        threads=args.threads,
    )
    save_trial_rows(rows, args.output)
    return EXIT_OK


def _perturbation(arg: typing.Optional[str]) -> typing.Optional[PerturbationSpec]:
    if arg is None:
        return None
    if arg == "typical":
        return PerturbationSpec.typical()
    with open(arg) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise SchemaError("$", f"invalid JSON: {exc}") from exc
    return PerturbationSpec.from_json(doc)


def _cmd_mc(args) -> int:
    se = load_se_case(args.secase)
    cfg = McConfig(
        samples=args.samples,
        seed=args.seed,
        threads=args.threads,
        net_uncertainty=_perturbation(args.net_uncertainty),
        histogram_bins=args.bins,
        pilot_samples=min(args.pilot, args.samples),
        executor=ExecutorKind(args.executor),
    )
    summary = run_mc(se, cfg)
    save_summary(summary, args.output, args.hist_dir)
    return EXIT_OK


def _cmd_selftest(args) -> int:
    checks = selftest(cases=args.cases, seed=args.seed)
    out = open(args.output, "w") if args.output else sys.stdout
    try:
        for check in checks:
            out.write(f"{'ok  ' if check.passed else 'FAIL'} {check.name}: {check.detail}\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK if all(c.passed for c in checks) else EXIT_NUMERICAL


COMMANDS: typing.Dict[str, typing.Callable[[argparse.Namespace], int]] = {
    "pf": _cmd_pf,
    "gen-case": _cmd_gen_case,
    "estimate": _cmd_estimate,
    "trials": _cmd_trials,
    "mc": _cmd_mc,
    "selftest": _cmd_selftest,
}


def main(argv: typing.Optional[typing.Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"circuitse: error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logger.addHandler(handler)
    logger.setLevel(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"circuitse: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"circuitse: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ParseError, SchemaError) as exc:
        print(f"circuitse: malformed input: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"circuitse: {exc}", file=sys.stderr)
        return EXIT_IO
    except CircuitSEError as exc:
        print(f"circuitse: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    finally:
        logger.removeHandler(handler)
