"""Metric tensors from the flow state and MMPDE mesh movement.

The metric is built from recovered Hessians of two monitors (the
equilibrium variable and the depth by default), intersected, bounded and
smoothed to the vertices.  The mesh then follows the gradient flow of the
equidistribution/alignment energy on the computational mesh, and the new
physical mesh is read off through the piecewise linear correspondence.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .dgcore import get_basis, reference_to_physical, volume_rule
from .errors import LocationError, TangledMeshError
from .mesh import CORNER, X_HI, X_LO, Y_HI, Y_LO, edge_matrices, geometry, locate_points, small_det, small_inv
from .swe import G, velocity

BETA = 1000.0
_REF_VERTICES = {1: np.array([[0.0], [1.0]]), 2: np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])}
DELTA = 0.1
SMOOTH_PASSES = 2


# ---------------------------------------------------------------- monitors
def monitor_values(U, B, basis, g=G, kind="equilibrium", points=None):
    """Monitor values at the volume quadrature points (or at the given
    reference points), (ne, nq)."""
    phi = basis.vol_phi if points is None else basis.values(points)
    Uq = np.einsum("ceb,qb->ceq", U, phi)
    Bq = B @ phi.T
    h = Uq[0]
    vel = [velocity(h, Uq[1 + i]) for i in range(U.shape[0] - 1)]
    ke = 0.5 * sum(v * v for v in vel)
    if kind == "equilibrium":
        return ke + g * (h + Bq)
    if kind == "depth":
        return h.copy()
    if kind == "entropy":
        return h * ke + 0.5 * g * h * h + g * h * Bq
    raise ValueError(f"unknown monitor {kind!r}")


def monitor_averages(U, B, basis, g=G, kind="equilibrium"):
    vals = monitor_values(U, B, basis, g, kind)
    return vals @ basis.quad.weights / basis.ref_measure


def monitor_fields(flow, kind="equilibrium"):
    """Cell averages of the requested monitor of a FlowField."""
    return monitor_averages(flow.stack(), flow.B.coeffs, flow.h.basis, flow.g, kind)


# -------------------------------------------------------- Hessian recovery
def _quadratic_terms(X, dim):
    if dim == 1:
        x = X[..., 0]
        return np.stack([np.ones_like(x), x, 0.5 * x * x], axis=-1)
    x, y = X[..., 0], X[..., 1]
    return np.stack([np.ones_like(x), x, y, 0.5 * x * x, x * y, 0.5 * y * y], axis=-1)


def recovery_patches(mesh):
    """Element patches for least-squares fitting, padded with -1."""
    topo = mesh.topology
    cached = getattr(topo, "_recovery_patches", None)
    if cached is not None:
        return cached
    need = 3 if mesh.dim == 1 else 6
    patches = []
    base = topo.element_patches
    for e, p in enumerate(base):
        if p.size < need:
            p = np.unique(np.concatenate([base[q] for q in p]))
        patches.append(p)
    width = max(p.size for p in patches)
    out = -np.ones((len(patches), width), dtype=np.int64)
    for e, p in enumerate(patches):
        out[e, : p.size] = p
    topo._recovery_patches = out
    return out


def recover_hessian(averages, mesh, nodal=None):
    """Per-element Hessians (ne, d, d) of the quadratic whose cell averages
    best fit ``averages`` over each element's patch and, when ``nodal``
    (ne, d+1) is given, whose values fit the element's own vertex samples.
    Returns (H, flags) where flags marks rank-deficient fits (given a zero
    Hessian)."""
    d = mesh.dim
    geom = mesh.geometry()
    patches = recovery_patches(mesh)
    valid = patches >= 0
    P = np.where(valid, patches, 0)
    rule = volume_rule(d, 2)
    # quadrature points of every element, to average the quadratic terms
    xq = reference_to_physical(mesh, rule.points)  # (ne, nq, d)
    wq = rule.weights / rule.weights.sum()
    c = geom.centroids
    scale = np.sqrt(np.max(np.sum((c[P] - c[:, None, :]) ** 2, axis=-1) * valid, axis=1))
    scale = np.where(scale > 0, scale, 1.0)
    X = (xq[P] - c[:, None, None, :]) / scale[:, None, None, None]  # (ne, np, nq, d)
    A = np.einsum("epqk,q->epk", _quadratic_terms(X, d), wq)
    A *= valid[..., None]
    b = np.where(valid, averages[P], 0.0)
    if nodal is not None:
        Xv = (mesh.vertices[mesh.elements] - c[:, None, :]) / scale[:, None, None]
        A = np.concatenate([A, _quadratic_terms(Xv, d)], axis=1)
        b = np.concatenate([b, nodal], axis=1)
    AtA = np.einsum("epk,epl->ekl", A, A)
    Atb = np.einsum("epk,ep->ek", A, b)
    nunk = A.shape[-1]
    cond = np.linalg.cond(AtA)
    bad = ~np.isfinite(cond) | (cond > 1e12)
    coef = np.zeros((mesh.n_elements, nunk))
    ok = ~bad
    if np.any(ok):
        coef[ok] = np.linalg.solve(AtA[ok], Atb[ok][..., None])[..., 0]
    H = np.zeros((mesh.n_elements, d, d))
    s2 = scale**2
    if d == 1:
        H[:, 0, 0] = coef[:, 2] / s2
    else:
        H[:, 0, 0] = coef[:, 3] / s2
        H[:, 0, 1] = H[:, 1, 0] = coef[:, 4] / s2
        H[:, 1, 1] = coef[:, 5] / s2
    return H, bad


# ------------------------------------------------------------------ metric
def abs_sym(H):
    lam, Q = np.linalg.eigh(H)
    return np.einsum("...ij,...j,...kj->...ik", Q, np.abs(lam), Q)


def regularization_alpha(H, volumes):
    """Solve sum |K| det(a I + |H_K|)^{2/(d+4)} = 2 sum |K| det(|H_K|)^{2/(d+4)}
    (the left side increases with a).  Returns (alpha, degenerate)."""
    H = np.asarray(H, dtype=float)
    d = H.shape[-1]
    absH = abs_sym(H)
    lam = np.linalg.eigvalsh(absH)  # nonnegative
    p = 2.0 / (d + 4)
    rhs = 2.0 * np.sum(volumes * np.prod(lam, axis=-1) ** p)
    hmax = float(np.abs(H).max()) if H.size else 0.0
    floor = 1e-8 * (1.0 + hmax)

    def f(a):
        return np.sum(volumes * np.prod(a + lam, axis=-1) ** p) - rhs

    if f(floor) >= 0.0:
        return floor, True
    hi = max(2.0 * floor, hmax)
    while f(hi) < 0.0:
        hi *= 2.0
    return brentq(f, floor, hi, xtol=1e-300, rtol=1e-14), False


def metric_from_hessian(H, alpha):
    d = H.shape[-1]
    A = alpha * np.eye(d) + abs_sym(H)
    det = np.linalg.det(A)
    return det[:, None, None] ** (-1.0 / (d + 4)) * A


def intersect(A, B):
    """Matrix intersection by simultaneous diagonalisation."""
    A, B = np.asarray(A, float), np.asarray(B, float)
    L = np.linalg.cholesky(A)
    Li = np.linalg.inv(L)
    C = Li @ B @ np.swapaxes(Li, -1, -2)
    C = 0.5 * (C + np.swapaxes(C, -1, -2))
    lam, Q = np.linalg.eigh(C)
    LQ = L @ Q
    out = np.einsum("...ij,...j,...kj->...ik", LQ, np.maximum(1.0, lam), LQ)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def max_entry(M, per_element=False):
    a = np.abs(M).reshape(M.shape[0], -1).max(axis=1)
    return a if per_element else np.full(M.shape[0], a.max())


def intersect_metrics(M_E, M_h, delta=DELTA, per_element=False):
    nE = max_entry(M_E, per_element)[:, None, None]
    nh = max_entry(M_h, per_element)[:, None, None]
    return intersect(M_E / nE, delta * M_h / nh)


def bound_metric(M, beta=BETA):
    tr = np.trace(M, axis1=-2, axis2=-1)
    return M / np.sqrt(1.0 + (tr / beta) ** 2)[:, None, None]


def smooth_metric(M, mesh, passes=SMOOTH_PASSES):
    """Vertex metrics: volume-weighted averages of the adjacent element
    values, then ``passes`` rounds of neighbour averaging."""
    vol = mesh.geometry().volumes
    inc = mesh.topology.element_vertex_incidence
    d = mesh.dim
    flat = (M * vol[:, None, None]).reshape(len(vol), -1)
    Mv = (inc @ flat) / (inc @ vol)[:, None]
    avg = mesh.topology.vertex_averaging
    for _ in range(passes):
        Mv = avg @ Mv
    return Mv.reshape(-1, d, d)


def element_from_vertex(Mv, mesh):
    return Mv[mesh.elements].mean(axis=1)


@dataclass
class MetricField:
    element: np.ndarray  # (ne, d, d)
    vertex: np.ndarray  # (nv, d, d)
    beta: float = BETA
    delta: float = DELTA
    passes: int = SMOOTH_PASSES
    info: dict = field(default_factory=dict)


def build_metric(U, B, mesh, k, g=G, monitor="equilibrium+depth", beta=BETA, delta=DELTA,
                 passes=SMOOTH_PASSES, per_element_norm=False):
    """Full metric pipeline from the flow state on ``mesh``."""
    basis = get_basis(mesh.dim, k)
    vol = mesh.geometry().volumes
    kinds = ["equilibrium", "depth"] if monitor == "equilibrium+depth" else [monitor]
    metrics, info = [], {"degenerate": [], "rank_deficient": 0}
    for kind in kinds:
        avg = monitor_averages(U, B, basis, g, kind)
        nodal = monitor_values(U, B, basis, g, kind, _REF_VERTICES[mesh.dim])
        H, bad = recover_hessian(avg, mesh, nodal)
        alpha, degenerate = regularization_alpha(H, vol)
        info["degenerate"].append(degenerate)
        info["rank_deficient"] += int(bad.sum())
        metrics.append((metric_from_hessian(H, alpha), degenerate))
    live = [m for m, dg in metrics if not dg]
    d = mesh.dim
    if len(kinds) == 2 and len(live) == 2:
        Mt = intersect_metrics(metrics[0][0], metrics[1][0], delta, per_element_norm)
    elif live:
        # a degenerate monitor carries no information and is left out
        Mt = live[0] / max_entry(live[0], per_element_norm)[:, None, None]
    else:
        Mt = np.broadcast_to(np.eye(d), (mesh.n_elements, d, d)).copy()
    Mh = bound_metric(Mt, beta)
    Mv = smooth_metric(Mh, mesh, passes)
    return MetricField(element_from_vertex(Mv, mesh), Mv, beta, delta, passes, info)


# ------------------------------------------------------------------ energy
def _element_terms(Xh, Xc, elements, M_K):
    """J, det J, edge matrices and metric data for every element."""
    E = edge_matrices(Xh, elements)
    Ec = edge_matrices(Xc, elements)
    detE = small_det(E)
    detEc = small_det(Ec)
    Einv = small_inv(E, detE)
    J = Ec @ Einv
    return E, Ec, detE, detEc, Einv, J


def _G_parts(J, detJ, M_K):
    d = J.shape[-1]
    Minv = small_inv(M_K)
    detM = small_det(M_K)
    sq = np.sqrt(detM)
    tr = np.einsum("eij,ejk,eik->e", J, Minv, J)
    t = 3.0 * d / 4.0
    Gval = sq * tr**t / 3.0 + d**t * sq * (detJ / sq) ** 1.5 / 3.0
    dGdJ = (d / 2.0) * sq[:, None, None] * (tr ** (t - 1.0))[:, None, None] * (Minv @ np.swapaxes(J, 1, 2))
    dGdet = 0.5 * d**t * detM ** (-0.25) * np.sqrt(detJ)
    return Gval, dGdJ, dGdet


def mesh_energy(Xh, Xc, elements, M_K):
    """I_h = sum |K| G(J, det J); +inf when the computational mesh is tangled."""
    d = Xh.shape[1]
    E, Ec, detE, detEc, Einv, J = _element_terms(Xh, Xc, elements, M_K)
    if np.any(detEc <= 0) or np.any(detE <= 0):
        return np.inf
    detJ = detEc / detE
    Gval, _, _ = _G_parts(J, detJ, M_K)
    vol = detE / (1.0 if d == 1 else 2.0)
    return float(np.sum(vol * Gval))


def energy_gradient(Xh, Xc, elements, M_K):
    """dI_h/dxi for every vertex, (nv, d)."""
    d = Xh.shape[1]
    E, Ec, detE, detEc, Einv, J = _element_terms(Xh, Xc, elements, M_K)
    if np.any(detEc <= 0) or np.any(detE <= 0):
        raise TangledMeshError("singular element in the energy gradient")
    detJ = detEc / detE
    _, dGdJ, dGdet = _G_parts(J, detJ, M_K)
    Ecinv = small_inv(Ec, detEc)
    rows = Einv @ dGdJ + (dGdet * detEc / detE)[:, None, None] * Ecinv  # (ne, d, d)
    vol = detE / (1.0 if d == 1 else 2.0)
    local = np.empty((elements.shape[0], d + 1, d))
    local[:, 1:] = rows * vol[:, None, None]
    local[:, 0] = -local[:, 1:].sum(axis=1)
    grad = np.zeros((Xh.shape[0], d))
    for j in range(d + 1):
        np.add.at(grad, elements[:, j], local[:, j])
    return grad


def nodal_velocities(Xh, Xc, elements, M_K, M_v, tau, topology=None, fix_boundary=False):
    """dxi/dt = -sqrt(det M_i)/tau * dI/dxi_i with boundary rules applied."""
    grad = energy_gradient(Xh, Xc, elements, M_K)
    pref = np.sqrt(small_det(M_v)) / tau
    vel = -pref[:, None] * grad
    if topology is not None:
        vel = apply_boundary_rules(vel, topology, fix_boundary)
    return vel


def apply_boundary_rules(vel, topology, fix_boundary=False):
    vel = vel.copy()
    kind = topology.vertex_kind
    if fix_boundary:
        vel[kind != 0] = 0.0
        return vel
    vel[kind == CORNER] = 0.0
    sides = topology.vertex_sides
    if vel.shape[1] == 2:
        on_x = (sides & ((1 << X_LO) | (1 << X_HI))) != 0
        on_y = (sides & ((1 << Y_LO) | (1 << Y_HI))) != 0
        vel[on_x, 0] = 0.0
        vel[on_y, 1] = 0.0
    return vel


def equidistribution_spread(Xh, elements, M_K):
    d = Xh.shape[1]
    E = edge_matrices(Xh, elements)
    vol = small_det(E) / (1.0 if d == 1 else 2.0)
    rho = vol * np.sqrt(small_det(M_K))
    return float(rho.max() / rho.min())


# ----------------------------------------------------------- mesh movement
@dataclass
class MoveResult:
    mesh: object
    moved: bool
    substeps: int
    rejected: int
    energies: list
    metric: MetricField = None
    reason: str = ""


class MeshMover:
    """Holds the fixed reference computational mesh and integrates the
    mesh equation over one physical time step at a time."""

    def __init__(self, reference_mesh, monitor="equilibrium+depth", tau=None, beta=BETA,
                 delta=DELTA, passes=SMOOTH_PASSES, max_substeps=20, fix_boundary=False,
                 per_element_norm=False):
        self.xi_hat = reference_mesh.vertices.copy()
        self.topology = reference_mesh.topology
        d = reference_mesh.dim
        N = reference_mesh.n_elements
        self.tau = 0.1 * N ** (-1.0 / d) if tau is None else tau
        self.monitor = monitor
        self.beta, self.delta, self.passes = beta, delta, passes
        self.max_substeps = max_substeps
        self.fix_boundary = fix_boundary
        self.per_element_norm = per_element_norm

    def metric(self, U, B, mesh, k, g=G):
        return build_metric(U, B, mesh, k, g, self.monitor, self.beta, self.delta, self.passes,
                            self.per_element_norm)

    def move(self, mesh, U, B, k, dt, g=G, metric=None):
        metric = metric or self.metric(U, B, mesh, k, g)
        return self.move_with_metric(mesh, metric, dt)

    def move_with_metric(self, mesh, metric, dt):
        Xh = mesh.vertices
        elems = mesh.elements
        M_K, M_v = metric.element, metric.vertex
        xi = self.xi_hat.copy()
        energy = mesh_energy(Xh, xi, elems, M_K)
        energies = [energy]
        t, step = 0.0, dt / 4.0
        attempts = rejected = 0
        while t < dt * (1.0 - 1e-12) and attempts < self.max_substeps:
            step = min(step, dt - t)
            vel = nodal_velocities(Xh, xi, elems, M_K, M_v, self.tau, self.topology, self.fix_boundary)
            trial = xi + step * vel
            e_new = mesh_energy(Xh, trial, elems, M_K)
            attempts += 1
            if np.isfinite(e_new) and e_new <= energy:
                xi, energy, t = trial, e_new, t + step
                energies.append(energy)
            else:
                rejected += 1
                step *= 0.5
        if np.array_equal(xi, self.xi_hat):
            return MoveResult(mesh, False, attempts, rejected, energies, metric, "no accepted step")
        comp = mesh.moved(xi)
        try:
            newX = self._interpolate(mesh, comp)
            new_mesh = mesh.moved(newX)
            geometry(new_mesh)
        except (TangledMeshError, LocationError) as exc:
            return MoveResult(mesh, False, attempts, rejected, energies, metric, str(exc))
        return MoveResult(new_mesh, True, attempts, rejected, energies, metric)

    def _interpolate(self, phys, comp):
        """x_i^{n+1} = Phi_h(xi_hat_i) with Phi_h mapping comp -> phys."""
        eid, bary = locate_points(comp, self.xi_hat, seed_vertices=np.arange(comp.n_vertices))
        X = np.einsum("ej,ejd->ed", bary, phys.vertices[phys.elements[eid]])
        # keep boundary vertices exactly on their sides
        sides = self.topology.vertex_sides
        lo, hi = phys.lo, phys.hi
        for ax in range(phys.dim):
            lo_bit, hi_bit = 1 << (2 * ax), 1 << (2 * ax + 1)
            X[(sides & lo_bit) != 0, ax] = lo[ax]
            X[(sides & hi_bit) != 0, ax] = hi[ax]
        X[self.topology.vertex_kind == CORNER] = phys.vertices[self.topology.vertex_kind == CORNER]
        return X


def move_mesh(mesh, U, B, k, dt, mover):
    return mover.move(mesh, U, B, k, dt)
