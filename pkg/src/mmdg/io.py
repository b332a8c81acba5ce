"""Run output (CSV) and the key-value configuration file.

Config file format: one ``key = value`` per line, ``#`` starts a comment.
Recognised keys are the fields of :class:`mmdg.driver.RunConfig` (n,
degree, mesh_mode, monitor, b_update, C_cfl, M_tvb, T, max_steps,
snapshots) plus ``scenario`` and ``out``.  Hyphens in keys are accepted
(``b-update``), as is ``mesh`` for ``mesh_mode``.
"""
from __future__ import annotations

import csv
import os

import numpy as np

from .dgcore import DGField, write_field_csv
from .driver import LEDGER_FIELDS
from .errors import ConfigurationError
from .mesh import write_mesh_csv

_INT_KEYS = {"n", "degree", "max_steps", "snapshots"}
_FLOAT_KEYS = {"C_cfl", "M_tvb", "T"}
_STR_KEYS = {"mesh_mode", "monitor", "b_update", "scenario", "out"}
_ALIASES = {"mesh": "mesh_mode", "c_cfl": "C_cfl", "m_tvb": "M_tvb", "t": "T"}


def parse_config(text):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        key = _ALIASES.get(key, key)
        try:
            if key in _INT_KEYS:
                out[key] = int(val)
            elif key in _FLOAT_KEYS:
                out[key] = float(val)
            elif key in _STR_KEYS:
                out[key] = val.strip("'\"")
            else:
                raise ConfigurationError(f"config line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"config line {lineno}: bad value {val!r} for {key}") from None
    return out


def read_config(path):
    with open(path) as fh:
        return parse_config(fh.read())


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_report(report, outdir):
    """Write report.csv, ledger.csv and the snapshot meshes and fields."""
    os.makedirs(outdir, exist_ok=True)
    names = ["h", "hu", "hv"][: report.scenario.dim + 1]
    with open(os.path.join(outdir, "report.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quantity", "L1", "Linf"])
        for var, (l1, linf) in report.errors.items():
            w.writerow([var, _fmt(l1), _fmt(linf)])
        w.writerow([])
        w.writerow(["key", "value"])
        w.writerow(["scenario", report.scenario.name])
        w.writerow(["steps", report.steps])
        w.writerow(["t", _fmt(report.t)])
        for key in ("mass_residual", "wb_level_dev", "wb_momentum"):
            w.writerow([f"max_{key}", _fmt(report.max_ledger(key))])
        for key, val in sorted(report.diagnostics.items()):
            w.writerow([key, _fmt(val)])
    with open(os.path.join(outdir, "ledger.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LEDGER_FIELDS)
        for row in report.ledger:
            w.writerow([_fmt(row[k]) for k in LEDGER_FIELDS])
    k = report.scenario.degree
    for i, (step, t, mesh, U, B) in enumerate(report.snapshots):
        write_mesh_csv(mesh, os.path.join(outdir, f"mesh_{i:04d}.csv"))
        fields = dict(zip(names, U))
        fields["B"] = B
        fields["eta"] = U[0] + B
        for name, c in fields.items():
            write_field_csv(DGField(mesh, k, c), os.path.join(outdir, f"field_{name}_{i:04d}.csv"))


def write_convergence(result, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variable", "N", "L1", "Linf", "order_L1", "order_Linf"])
        for var, errs in result["errors"].items():
            o1 = [""] + [_fmt(o) for o in result["orders"][var]["L1"]]
            oi = [""] + [_fmt(o) for o in result["orders"][var]["Linf"]]
            for n, (l1, linf), a, b in zip(result["ns"], errs, o1, oi):
                w.writerow([var, n, _fmt(l1), _fmt(linf), a, b])
