"""Command line entry point: ``mmdg run|convergence|list``."""
from __future__ import annotations

import argparse
import os
import sys

from . import driver, io
from .errors import ConfigurationError, NumericalFailure
from .scenarios import SCENARIOS, get_scenario, list_scenarios

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_CHECK = 0, 2, 3, 4

# ledger limits used by --check
CHECK_WB = 1e-12
CHECK_MASS = 1e-11
CHECK_SPECIAL = -1e-13


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigurationError(message)


def _common(p):
    p.add_argument("scenario")
    p.add_argument("--config", help="key = value file; flags take precedence")
    p.add_argument("--degree", type=int)
    p.add_argument("--mesh", dest="mesh_mode", choices=["fixed", "moving"])
    p.add_argument("--monitor", choices=["equilibrium+depth", "entropy"])
    p.add_argument("--b-update", dest="b_update", choices=["dg-interp", "l2-project"])
    p.add_argument("--cfl", dest="C_cfl", type=float)
    p.add_argument("--m-tvb", dest="M_tvb", type=float)
    p.add_argument("--T", dest="T", type=float)
    p.add_argument("--out")
    p.add_argument("--serial", action="store_true", help="bit-reproducible mode (always on: runs are serial)")


def build_parser():
    p = _Parser(prog="mmdg", description="Moving-mesh DG shallow water solver")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    run = sub.add_parser("run", help="run one scenario")
    _common(run)
    run.add_argument("--n", type=int)
    run.add_argument("--snapshots", type=int)
    run.add_argument("--max-steps", dest="max_steps", type=int)
    run.add_argument("--check", action="store_true", help="exit 4 when a ledger limit is exceeded")
    conv = sub.add_parser("convergence", help="observed orders against a fine fixed-mesh reference")
    _common(conv)
    conv.add_argument("--ns", required=True, help="comma separated resolutions")
    conv.add_argument("--ref-n", dest="ref_n", type=int, help="reference resolution (default 8x the largest N)")
    sub.add_parser("list", help="list registered scenarios")
    return p


def _settings(args):
    opts = io.read_config(args.config) if getattr(args, "config", None) else {}
    for key in ("degree", "mesh_mode", "monitor", "b_update", "C_cfl", "M_tvb", "T", "n", "snapshots",
                "max_steps", "out"):
        val = getattr(args, key, None)
        if val is not None:
            opts[key] = val
    opts.pop("scenario", None)
    out = opts.pop("out", None)
    return driver.RunConfig(**opts), out


def check_report(report):
    """Names of the ledger limits a run exceeds."""
    bad = []
    if report.scenario.still_level is not None and report.max_ledger("wb_level_dev") > CHECK_WB:
        bad.append("well-balance")
    if report.scenario.still_level is not None and report.max_ledger("wb_momentum") > CHECK_WB:
        bad.append("well-balance momentum")
    if report.scenario.boundary != "transmissive" and report.max_ledger("mass_residual") > CHECK_MASS:
        bad.append("mass")
    if report.diagnostics.get("min_special_h", 0.0) < CHECK_SPECIAL:
        bad.append("positivity")
    if not report.diagnostics.get("energy_monotone", True):
        bad.append("mesh energy")
    return bad


def _run(args):
    get_scenario(args.scenario)
    cfg, out = _settings(args)
    report = driver.time_loop(args.scenario, cfg)
    for var, (l1, linf) in report.errors.items():
        print(f"{var:6s} L1 = {l1:.3e}  Linf = {linf:.3e}")
    print(f"steps = {report.steps}  t = {report.t:g}  max mass residual = {report.max_ledger('mass_residual'):.3e}")
    if out:
        io.write_report(report, out)
    if args.check:
        bad = check_report(report)
        if bad:
            print("check failed: " + ", ".join(bad), file=sys.stderr)
            return EXIT_CHECK
        print("check passed")
    return EXIT_OK


def _convergence(args):
    scn = get_scenario(args.scenario)
    try:
        ns = [int(s) for s in args.ns.split(",") if s.strip()]
    except ValueError:
        raise ConfigurationError(f"bad --ns list {args.ns!r}") from None
    cfg, out = _settings(args)
    ref_n = args.ref_n or 8 * max(ns)
    ref, _ = driver.reference_solution(scn, ref_n, 2, cfg)
    res = driver.convergence_study(scn, ns, ref, cfg)
    for var, errs in res["errors"].items():
        o = res["orders"][var]
        for i, (n, (l1, linf)) in enumerate(zip(res["ns"], errs)):
            tail = f"  order L1 = {o['L1'][i - 1]:.2f}  Linf = {o['Linf'][i - 1]:.2f}" if i else ""
            print(f"{var:3s} N = {n:5d}  L1 = {l1:.3e}  Linf = {linf:.3e}{tail}")
    if out:
        os.makedirs(out, exist_ok=True)
        io.write_convergence(res, os.path.join(out, "convergence.csv"))
    return EXIT_OK


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command == "list":
            for name in list_scenarios():
                print(f"{name:16s} {SCENARIOS[name].description}")
            return EXIT_OK
        if args.command == "run":
            return _run(args)
        return _convergence(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
