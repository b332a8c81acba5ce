"""Outer time loop, error norms and convergence studies."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dgcore import get_basis, l2_project, reference_to_physical
from .errors import ConfigurationError, MMDGError
from .limiters import pp_scale
from .mesh import build_cross_triangulated_rectangle, build_interval_mesh, locate_points
from .mmpde import MeshMover
from .remap import MeshBlend, RemapConfig, remap_state
from .scenarios import Scenario, get_scenario
from .swe import DRY_CFL_TOL, SWEDiscretization, compute_dt, default_cfl

LEDGER_FIELDS = [
    "step", "t", "dt", "mass", "mass_residual", "wb_level_dev", "wb_momentum",
    "min_special_h", "remap_steps", "mmpde_substeps", "mmpde_rejected", "mesh_moved", "a_min",
]


def build_mesh(scn, n=None):
    n = scn.n if n is None else n
    if scn.dim == 1:
        (lo, hi), = scn.domain
        return build_interval_mesh(lo, hi, n)
    (x0, x1), (y0, y1) = scn.domain
    nx = max(1, int(round(n * (x1 - x0) / (y1 - y0))))
    return build_cross_triangulated_rectangle((x0, x1), (y0, y1), nx, n)


def sample_values(mesh, coeffs, k):
    """DG values at the 21 error-sampling points of every element, with
    the physical points: (values (..., ne, P), points (ne, P, d))."""
    basis = get_basis(mesh.dim, k)
    pts = basis.sample_points()
    phi = basis.values(pts)
    return np.asarray(coeffs) @ phi.T, reference_to_physical(mesh, pts)


def error_norms(mesh, values, reference, k=None):
    """(L1, Linf) of values - reference over the per-element sample points.

    ``values`` is a coefficient array (ne, nb) (then ``k`` is needed) or an
    array of sampled values (ne, P); ``reference`` is a callable of
    physical points or an array of the same shape.
    """
    if k is not None:
        vals, pts = sample_values(mesh, values, k)
    else:
        vals = np.asarray(values)
        basis = get_basis(mesh.dim, 1)
        pts = reference_to_physical(mesh, basis.sample_points())
    ref = reference(pts) if callable(reference) else np.asarray(reference)
    if np.shape(ref) != vals.shape:
        raise ConfigurationError(f"reference shape {np.shape(ref)} does not match {vals.shape}")
    err = np.abs(vals - ref)
    vol = mesh.geometry().volumes
    l1 = float(np.sum(vol * err.mean(axis=1)))
    return l1, float(err.max())


class DGSampler:
    """Point evaluation of a DG solution, used as a reference function."""

    def __init__(self, mesh, coeffs, k):
        self.mesh, self.coeffs, self.k = mesh, np.asarray(coeffs), k
        self.basis = get_basis(mesh.dim, k)
        if mesh.dim == 1:
            self.breaks = mesh.vertices[:, 0]

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-1]
        flat = x.reshape(-1, self.mesh.dim)
        if self.mesh.dim == 1:
            s = flat[:, 0]
            e = np.clip(np.searchsorted(self.breaks, s, side="right") - 1, 0, self.mesh.n_elements - 1)
            a, b = self.breaks[e], self.breaks[e + 1]
            ref = ((s - a) / (b - a))[:, None]
        else:
            e, bary = locate_points(self.mesh, flat)
            ref = bary[:, 1:]
        phi = self.basis.values(ref)
        vals = np.einsum("...pb,pb->...p", self.coeffs[..., e, :], phi)
        return vals.reshape(self.coeffs.shape[:-2] + shape)


@dataclass
class RunConfig:
    n: Optional[int] = None
    degree: Optional[int] = None
    mesh_mode: Optional[str] = None
    monitor: Optional[str] = None
    b_update: Optional[str] = None
    C_cfl: Optional[float] = None
    M_tvb: Optional[float] = None
    T: Optional[float] = None
    max_steps: Optional[int] = None
    snapshots: int = 0  # intermediate checkpoints besides the first and last

    def apply(self, scn):
        kw = {k: v for k, v in (("degree", self.degree), ("mesh_mode", self.mesh_mode),
                                ("monitor", self.monitor), ("b_update", self.b_update),
                                ("C_cfl", self.C_cfl), ("M_tvb", self.M_tvb), ("T", self.T),
                                ("n", self.n)) if v is not None}
        scn = scn.with_(**kw)
        if scn.mesh_mode not in ("fixed", "moving"):
            raise ConfigurationError(f"mesh mode must be fixed or moving, got {scn.mesh_mode!r}")
        if scn.b_update not in ("dg-interp", "l2-project"):
            raise ConfigurationError(f"B update must be dg-interp or l2-project, got {scn.b_update!r}")
        if scn.monitor not in ("equilibrium+depth", "entropy", "equilibrium", "depth"):
            raise ConfigurationError(f"unknown monitor {scn.monitor!r}")
        if scn.degree not in (1, 2):
            raise ConfigurationError(f"degree must be 1 or 2, got {scn.degree}")
        if int(scn.n) != scn.n or scn.n < 1:
            raise ConfigurationError(f"resolution must be a positive integer, got {scn.n}")
        return scn


@dataclass
class RunReport:
    scenario: Scenario
    mesh: object
    U: np.ndarray
    B: np.ndarray
    t: float
    steps: int
    ledger: list
    snapshots: list = field(default_factory=list)  # (step, t, mesh, U, B)
    errors: dict = field(default_factory=dict)
    timing: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    @property
    def k(self):
        return self.scenario.degree

    def surface_deviation(self, level):
        return error_norms(self.mesh, self.U[0] + self.B, lambda x: np.full(x.shape[:-1], level), self.k)

    def max_ledger(self, key):
        vals = [abs(r[key]) for r in self.ledger if r[key] == r[key]]
        return max(vals) if vals else float("nan")


def initial_state(scn, mesh):
    k = scn.degree
    basis = get_basis(mesh.dim, k)
    comps = []
    for i in range(scn.dim + 1):
        comps.append(l2_project(lambda x, i=i: scn.initial(x)[i], mesh, k).coeffs)
    U = np.stack(comps)
    B = l2_project(scn.bottom, mesh, k).coeffs
    # a projected depth can dip below zero near dry points
    if (U[0] @ basis.special_phi.T).min() < 0.0:
        h_pp, theta = pp_scale(U[0], basis, 0.0)
        act = theta < 1.0
        B[act] = B[act] - (h_pp[act] - U[0][act])
        U[0] = h_pp
    return U, B


class Simulation:
    """Algorithm driver: move mesh, remap, pick the time step, SSP-RK3."""

    def __init__(self, scn, mesh=None):
        self.scn = scn
        self.mesh = mesh if mesh is not None else build_mesh(scn)
        self.k = scn.degree
        try:
            self.U, self.B = initial_state(scn, self.mesh)
        except MMDGError as exc:
            raise type(exc)(f"step 0, initial projection: {exc}") from exc
        self.t = 0.0
        self.step_no = 0
        self.periodic = scn.boundary == "periodic"
        self.mover = None
        if scn.mesh_mode == "moving":
            self.mover = MeshMover(self.mesh, monitor=scn.monitor, fix_boundary=self.periodic)
        self.mass0 = self._mass()
        self.outflux = 0.0
        self.ledger = []
        self.diag = {"remap_steps": [], "energy_monotone": True, "no_move": 0, "min_special_h": np.inf,
                     "remap_capped": 0, "tvb_flagged": 0, "pp_active": 0, "char_fallback": 0}

    def _disc(self, mesh):
        return SWEDiscretization(mesh, self.k, self.scn.boundary, self.scn.g, self.scn.M_tvb)

    def _mass(self):
        basis = get_basis(self.mesh.dim, self.k)
        return float(np.sum(self.mesh.geometry().volumes * self.U[0, :, 0] * basis.phi0))

    def cfl(self):
        if self.scn.C_cfl is not None:
            return self.scn.C_cfl
        basis = get_basis(self.mesh.dim, self.k)
        dry = np.any(self.U[0, :, 0] * basis.phi0 < DRY_CFL_TOL)
        return default_cfl(self.mesh.dim, self.k, dry)

    def step(self):
        scn = self.scn
        n = self.step_no
        phase = "mesh movement"
        try:
            old_mesh = self.mesh
            a_old = old_mesh.geometry().a_min
            C = self.cfl()
            remap_steps, sub, rej, moved = 0, 0, 0, False
            if self.mover is not None:
                disc0 = self._disc(old_mesh)
                dt_prov = compute_dt(disc0.max_speed(self.U, self.B), a_old, a_old, C, scn.dt_max)
                dt_prov = min(dt_prov, scn.T - self.t)
                res = self.mover.move(old_mesh, self.U, self.B, self.k, dt_prov, scn.g)
                sub, rej, moved = res.substeps, res.rejected, res.moved
                if any(b > a for a, b in zip(res.energies, res.energies[1:])):
                    self.diag["energy_monotone"] = False
                if not moved:
                    self.diag["no_move"] += 1
                else:
                    phase = "remap"
                    blend = MeshBlend(old_mesh, res.mesh)
                    self.U, self.B, info = remap_state(
                        self.U, self.B, blend, self.k, self.periodic, scn.b_update, scn.bottom, RemapConfig())
                    remap_steps = info["steps"]
                    self.diag["remap_steps"].append(remap_steps)
                    self.diag["remap_capped"] += int(info["capped"])
                    self.mesh = res.mesh
            phase = "time step"
            disc = self._disc(self.mesh)
            alpha = disc.max_speed(self.U, self.B)
            dt = compute_dt(alpha, a_old, self.mesh.geometry().a_min, C, scn.dt_max)
            if self.t + dt >= scn.T or scn.T - (self.t + dt) < 1e-12 * scn.T:
                dt = scn.T - self.t
            phase = "SSP-RK3 stage"
            self.U, self.B, info = disc.ssp_rk3_step(self.U, self.B, dt)
            for key in ("tvb_flagged", "pp_active", "char_fallback"):
                self.diag[key] += disc.stats[key]
            self.outflux += info["outflux"]
            self.t = scn.T if dt == scn.T - self.t else self.t + dt
            self.step_no += 1
            smin = disc.special_min_h(self.U)
            self.diag["min_special_h"] = min(self.diag["min_special_h"], smin)
            self._record(dt, smin, remap_steps, sub, rej, moved)
        except MMDGError as exc:
            raise type(exc)(f"step {n}, {phase}: {exc}") from exc

    def _record(self, dt, smin, remap_steps, sub, rej, moved):
        mass = self._mass()
        resid = (mass - self.mass0 + self.outflux) / self.mass0
        if self.scn.still_level is not None:
            vals, _ = sample_values(self.mesh, np.stack([self.U[0] + self.B, *self.U[1:]]), self.k)
            wb_level = float(np.abs(vals[0] - self.scn.still_level).max())
            wb_mom = float(np.abs(vals[1:]).max())
        else:
            wb_level = wb_mom = float("nan")
        self.ledger.append({
            "step": self.step_no, "t": self.t, "dt": dt, "mass": mass, "mass_residual": resid,
            "wb_level_dev": wb_level, "wb_momentum": wb_mom, "min_special_h": smin,
            "remap_steps": remap_steps, "mmpde_substeps": sub, "mmpde_rejected": rej,
            "mesh_moved": int(moved), "a_min": self.mesh.geometry().a_min,
        })

    def run(self, max_steps=None, snapshots=0, callback=None):
        t0 = time.perf_counter()
        snaps = [(0, 0.0, self.mesh, self.U.copy(), self.B.copy())]
        marks = [self.scn.T * (i + 1) / (snapshots + 1) for i in range(snapshots)]
        while self.t < self.scn.T:
            if max_steps is not None and self.step_no >= max_steps:
                break
            self.step()
            if marks and self.t >= marks[0]:
                marks.pop(0)
                snaps.append((self.step_no, self.t, self.mesh, self.U.copy(), self.B.copy()))
            if callback is not None:
                callback(self)
        if snaps[-1][0] != self.step_no:
            snaps.append((self.step_no, self.t, self.mesh, self.U.copy(), self.B.copy()))
        diag = dict(self.diag)
        rs = diag.pop("remap_steps")
        diag["remap_steps_mean"] = float(np.mean(rs)) if rs else 0.0
        diag["remap_steps_max"] = int(max(rs)) if rs else 0
        return RunReport(self.scn, self.mesh, self.U, self.B, self.t, self.step_no, self.ledger, snaps,
                         timing=time.perf_counter() - t0, diagnostics=diag)


def time_loop(scn, config=None, mesh=None, callback=None):
    """Run a scenario (name or Scenario) to its final time."""
    if isinstance(scn, str):
        scn = get_scenario(scn)
    config = config or RunConfig()
    scn = config.apply(scn)
    sim = Simulation(scn, mesh)
    report = sim.run(config.max_steps, config.snapshots, callback)
    if scn.still_level is not None:
        level = scn.still_level
        l1, linf = report.surface_deviation(level)
        report.errors["h+B"] = (l1, linf)
        report.errors["hu"] = error_norms(report.mesh, report.U[1], lambda x: np.zeros(x.shape[:-1]), scn.degree)
        if scn.dim == 2:
            report.errors["hv"] = error_norms(report.mesh, report.U[2], lambda x: np.zeros(x.shape[:-1]), scn.degree)
    return report


def observed_orders(errors, ns):
    """log2(e_N / e_2N) between successive resolutions (sorted by N)."""
    order = np.argsort(ns)
    ns = [ns[i] for i in order]
    errors = [errors[i] for i in order]
    out = []
    for (n0, e0), (n1, e1) in zip(zip(ns, errors), zip(ns[1:], errors[1:])):
        out.append(math.log(e0 / e1) / math.log(n1 / n0))
    return out


def convergence_study(scn, ns, reference=None, config=None, variables=(0, 1)):
    """Errors and observed orders against ``reference`` (callable returning
    the stacked components at points) for each resolution in ``ns``.

    Returns {"ns": sorted ns, "errors": {var: [(L1, Linf), ...]},
    "orders": {var: {"L1": [...], "Linf": [...]}}}.
    """
    if isinstance(scn, str):
        scn = get_scenario(scn)
    if len(ns) < 3:
        raise ConfigurationError("a convergence study needs at least three resolutions")
    ns = sorted(int(n) for n in ns)
    config = config or RunConfig()
    names = ["h", "hu", "hv"]
    errs = {names[v]: [] for v in variables}
    for n in ns:
        cfg = RunConfig(**{**config.__dict__, "n": n})
        rep = time_loop(scn, cfg)
        for v in variables:
            ref = (lambda x, v=v: reference(x)[v]) if reference is not None else None
            errs[names[v]].append(error_norms(rep.mesh, rep.U[v], ref, rep.k))
    orders = {
        var: {"L1": observed_orders([e[0] for e in vals], ns), "Linf": observed_orders([e[1] for e in vals], ns)}
        for var, vals in errs.items()
    }
    return {"ns": ns, "errors": errs, "orders": orders}


def reference_solution(scn, n, degree=2, config=None):
    """Fixed-mesh fine-grid run returned as a point sampler of (h, m[, w])."""
    if isinstance(scn, str):
        scn = get_scenario(scn)
    base = config or RunConfig()
    cfg = RunConfig(**{**base.__dict__, "n": n, "degree": degree, "mesh_mode": "fixed"})
    rep = time_loop(scn, cfg)
    return DGSampler(rep.mesh, rep.U, degree), rep
