"""Slope (TVB minmod) and positivity (linear scaling) limiters.

Both operate on stacked coefficient arrays of shape (ncomp, ne, nb) or on a
single (ne, nb) array; thin wrappers accept DGField objects.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dgcore import DGField, get_basis
from .errors import PositivityError

AVG_TOL = 1e-13


# ------------------------------------------------------------- positivity
def pp_scale(coeffs, basis, floor=0.0, phi=None):
    """Linear-scaling limiter on a (ne, nb) array.

    Returns (new coefficients, theta per element).  Raises PositivityError
    when a cell average is below ``floor`` by more than round-off.
    """
    phi = basis.special_phi if phi is None else phi
    avg = coeffs[:, 0] * basis.phi0
    if np.any(avg < floor - AVG_TOL):
        bad = int(np.argmin(avg))
        raise PositivityError(f"cell average {avg[bad]:.3e} below floor {floor} in element {bad}")
    vals = coeffs @ phi.T
    vmin = vals.min(axis=1)
    theta = np.ones_like(avg)
    low = vmin < floor
    if np.any(low):
        den = avg[low] - vmin[low]
        theta[low] = np.clip((avg[low] - floor) / den, 0.0, 1.0)
        out = coeffs.copy()
        out[low, 1:] *= theta[low, None]
        return out, theta
    return coeffs, theta


def pp_limit(field, floor=0.0, points=None):
    """Positivity-limit ``field`` so it is >= floor at the special points (or
    at the given reference ``points``)."""
    basis = field.basis
    phi = None if points is None else basis.values(points)
    coeffs, _ = pp_scale(field.coeffs, basis, floor, phi)
    return DGField(field.mesh, field.degree, coeffs if coeffs is not field.coeffs else coeffs.copy())


def special_point_min(coeffs, basis):
    return float((coeffs @ basis.special_phi.T).min()) if coeffs.size else np.inf


# -------------------------------------------------------------------- TVB
def minmod(*args):
    a = np.stack(np.broadcast_arrays(*args))
    s = np.sign(a[0])
    same = np.all(np.sign(a) == s, axis=0)
    return np.where(same, s * np.abs(a).min(axis=0), 0.0)


def minmod_tvb(a, b, c, thresh):
    return np.where(np.abs(a) <= thresh, a, minmod(a, b, c))


@dataclass
class TVBResult:
    coeffs: np.ndarray  # (ncomp, ne, nb)
    flagged: np.ndarray  # (ne,) bool
    fallback: np.ndarray  # (ne,) bool, characteristic transform unavailable


def identity_char(avg, normals):
    """Component-wise limiting: identity transforms."""
    nc = avg.shape[0]
    shape = normals.shape[:-1] + (nc, nc)
    eye = np.broadcast_to(np.eye(nc), shape)
    return eye, eye, np.zeros(normals.shape[0], dtype=bool)


def transmissive_ghost(avg_int, normals, faces):
    return avg_int.copy()


def neighbor_data(U_avg, mesh, faces, ghost):
    """Neighbour averages (nc, ne, d+1) and neighbour centroids (ne, d+1, d)
    across each local face, with ghosts on the domain boundary."""
    geom = mesh.geometry()
    cent = geom.centroids
    ef = faces.elem_faces
    f_ids, sides = ef[..., 0], ef[..., 1]
    other = faces.elem[f_ids, 1 - sides]  # (ne, d+1)
    nb_avg = U_avg[:, np.where(other >= 0, other, 0)]
    nb_cent = cent[np.where(other >= 0, other, 0)].copy()
    # periodic: shift the neighbour's centroid into this element's frame
    shift = faces.period_shift[f_ids]  # x_R = x_L + shift
    sgn = np.where(sides == 0, -1.0, 1.0)
    nb_cent += np.where(faces.periodic[f_ids][..., None], sgn[..., None] * shift, 0.0)

    bnd = other < 0
    if np.any(bnd):
        e_idx, j_idx = np.nonzero(bnd)
        fb = f_ids[e_idx, j_idx]
        n = faces.normals[fb]
        ghost_avg = ghost(U_avg[:, e_idx], n, fb)
        nb_avg[:, e_idx, j_idx] = ghost_avg
        # mirror the centroid across the face
        p = mesh.vertices[faces.verts[fb, 0, 0]]
        c = cent[e_idx]
        nb_cent[e_idx, j_idx] = c - 2.0 * np.sum((c - p) * n, axis=1)[:, None] * n
    return nb_avg, nb_cent


def tvb_limit_coeffs(U, mesh, faces, M_tvb, char=None, ghost=None, basis=None):
    """Characteristic-wise TVB limiting of the stacked components ``U``.

    ``char(avg, normals)`` returns (L, R, fallback) with L, R of shape
    (..., nc, nc) matching ``normals[..., :]``; ``ghost(avg_int, normals,
    face_ids)`` returns exterior averages on boundary faces.
    """
    U = np.asarray(U, dtype=float)
    nc, ne, nb = U.shape
    basis = basis or get_basis(mesh.dim, _degree(mesh.dim, nb))
    if basis.k == 0:
        return TVBResult(U.copy(), np.zeros(ne, bool), np.zeros(ne, bool))
    char = char or identity_char
    ghost = ghost or transmissive_ghost
    avg = U[:, :, 0] * basis.phi0
    nb_avg, nb_cent = neighbor_data(avg, mesh, faces, ghost)
    if mesh.dim == 1:
        return _tvb_1d(U, avg, nb_avg, mesh, basis, M_tvb, char)
    return _tvb_2d(U, avg, nb_avg, nb_cent, mesh, faces, basis, M_tvb, char)


def _degree(dim, nb):
    if dim == 1:
        return nb - 1
    k = 0
    while (k + 1) * (k + 2) // 2 < nb:
        k += 1
    return k


def _apply(L, v):
    """Batched matrix-vector product: L (..., nc, nc), v (nc, ...)."""
    return np.moveaxis(np.einsum("...ij,j...->...i", L, v), -1, 0)


def _tvb_1d(U, avg, nb_avg, mesh, basis, M_tvb, char):
    nc, ne, nb = U.shape
    dx = mesh.geometry().volumes
    thresh = M_tvb * dx**2
    ends = basis.values(np.array([[0.0], [1.0]]))  # (2, nb)
    vals = U @ ends.T  # (nc, ne, 2)
    u_r = vals[..., 1] - avg
    u_l = avg - vals[..., 0]
    # local face 0 is the right end, face 1 the left end
    dp = nb_avg[..., 0] - avg
    dm = avg - nb_avg[..., 1]
    normals = np.ones((ne, 1))
    L, R, fallback = char(avg, normals)
    cr, cl, cp, cm = (_apply(L, v) for v in (u_r, u_l, dp, dm))
    mr = minmod_tvb(cr, cp, cm, thresh)
    ml = minmod_tvb(cl, cp, cm, thresh)
    flagged = np.any((mr != cr) | (ml != cl), axis=0)
    out = U.copy()
    if np.any(flagged):
        slope = 0.5 * (cr + cl)  # half jump of the linear part
        lim = minmod_tvb(slope, cp, cm, thresh)
        half_jump = _apply(R, lim)  # (nc, ne)
        lin = basis.linear_modes([lambda p: 2.0 * p[..., 0] - 1.0])[0]  # (nb,)
        new = np.zeros_like(U)
        new[..., 0] = U[..., 0]
        new += half_jump[..., None] * lin[None, None, :]
        out[:, flagged] = new[:, flagged]
        out[:, flagged, 0] = U[:, flagged, 0]
    return TVBResult(out, flagged, fallback)


def _mid_edge_ref():
    # midpoint of local edge i (opposite vertex i), reference coordinates
    return np.array([[0.5, 0.5], [0.0, 0.5], [0.5, 0.0]])


def _edge_decomposition(b0, bn, m):
    """Coefficients (ne, 3, 2) and neighbour pairs (ne, 3, 2) writing
    m_i - b0 as a nonnegative combination of two neighbour offsets."""
    ne = b0.shape[0]
    off = bn - b0[:, None, :]  # (ne, 3, 2)
    target = m - b0[:, None, :]  # (ne, 3, 2)
    pairs = np.array([[0, 1], [1, 2], [2, 0]])
    A = np.stack([off[:, pairs[:, 0]], off[:, pairs[:, 1]]], axis=-1)  # (ne, 3pairs, 2, 2)
    det = A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]
    det = np.where(np.abs(det) > 0, det, np.inf)
    inv = np.empty_like(A)
    inv[..., 0, 0] = A[..., 1, 1]
    inv[..., 1, 1] = A[..., 0, 0]
    inv[..., 0, 1] = -A[..., 0, 1]
    inv[..., 1, 0] = -A[..., 1, 0]
    inv /= det[..., None, None]
    # alphas[e, i, p, :] for target i and pair p
    alphas = np.einsum("epab,eib->eipa", inv, target)
    score = alphas.min(axis=-1)  # >= 0 means admissible
    # prefer pairs containing neighbour i, then the best-conditioned
    contains = (pairs[None, :, 0] == np.arange(3)[:, None]) | (pairs[None, :, 1] == np.arange(3)[:, None])
    key = np.where(score >= -1e-12, 1.0, 0.0) * 2.0 + contains[None] * 1.0 + 1e-3 * np.tanh(score)
    best = np.argmax(key, axis=2)  # (ne, 3)
    e_idx = np.arange(ne)[:, None]
    i_idx = np.arange(3)[None, :]
    coef = alphas[e_idx, i_idx, best]
    return coef, pairs[best]


def _tvb_2d(U, avg, nb_avg, nb_cent, mesh, faces, basis, M_tvb, char, nu=1.5):
    nc, ne, nb = U.shape
    geom = mesh.geometry()
    X = mesh.vertices[mesh.elements]
    diam = np.max(np.linalg.norm(X[:, [1, 2, 0]] - X, axis=2), axis=1)
    thresh = M_tvb * diam**2
    mref = _mid_edge_ref()
    m_phys = X[:, 0][:, None, :] + np.einsum("eij,pj->epi", geom.edge_matrix, mref)
    coef, pr = _edge_decomposition(geom.centroids, nb_cent, m_phys)
    e_idx = np.arange(ne)[:, None]
    d1 = nb_avg[:, e_idx, pr[..., 0]] - avg[:, :, None]
    d2 = nb_avg[:, e_idx, pr[..., 1]] - avg[:, :, None]
    dbar = coef[None, ..., 0] * d1 + coef[None, ..., 1] * d2  # (nc, ne, 3)
    phim = basis.values(mref)  # (3, nb)
    til = U @ phim.T - avg[..., None]  # (nc, ne, 3)

    lf = np.array([[1, 2], [2, 0], [0, 1]])
    t = X[:, lf[:, 1]] - X[:, lf[:, 0]]
    n = np.stack([t[..., 1], -t[..., 0]], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)  # outward for positive orientation
    L, R, fallback = char(avg, n)  # (ne, 3, nc, nc)
    ct = np.einsum("eiab,bei->aei", L, til)
    cd = np.einsum("eiab,bei->aei", L, dbar)
    lim = minmod_tvb(ct, nu * cd, nu * cd, thresh[None, :, None])
    flagged = np.any(lim != ct, axis=(0, 2))
    out = U.copy()
    if np.any(flagged):
        delta = np.einsum("eiab,bei->aei", R, lim)  # back to conserved, (nc, ne, 3)
        pos = np.maximum(delta, 0.0).sum(axis=2)
        neg = np.maximum(-delta, 0.0).sum(axis=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            tp = np.where(pos > 0, np.minimum(1.0, neg / pos), 1.0)
            tn = np.where(neg > 0, np.minimum(1.0, pos / neg), 1.0)
        balanced = np.abs(delta.sum(axis=2)) <= 1e-14 * (1.0 + np.abs(delta).sum(axis=2))
        tp = np.where(balanced, 1.0, tp)
        tn = np.where(balanced, 1.0, tn)
        dhat = tp[..., None] * np.maximum(delta, 0.0) - tn[..., None] * np.maximum(-delta, 0.0)
        psi = basis.linear_modes(
            [
                lambda p: 1.0 - 2.0 * (1.0 - p[..., 0] - p[..., 1]),
                lambda p: 1.0 - 2.0 * p[..., 0],
                lambda p: 1.0 - 2.0 * p[..., 1],
            ]
        )  # (3, nb)
        new = np.einsum("cei,ib->ceb", dhat, psi)
        new[..., 0] = U[..., 0]
        out[:, flagged] = new[:, flagged]
    return TVBResult(out, flagged, fallback)


def tvb_limit(fields, M_tvb, char_transform=None, ghost=None, periodic=False):
    """Limit a list of DGFields sharing mesh and degree.

    Returns (limited fields, modified flags per element).
    """
    mesh, k = fields[0].mesh, fields[0].degree
    U = np.stack([f.coeffs for f in fields])
    faces = mesh.faces(periodic)
    res = tvb_limit_coeffs(U, mesh, faces, M_tvb, char_transform, ghost, get_basis(mesh.dim, k))
    return [DGField(mesh, k, c) for c in res.coeffs], res.flagged
