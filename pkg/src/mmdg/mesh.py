"""Simplicial meshes (intervals and triangles) with fixed connectivity.

A mesh is a vertex array plus a :class:`Topology`.  The topology holds
everything that depends only on connectivity (faces, patches, boundary
flags) and is shared by every deformed copy of the mesh, which is what the
moving-mesh pipeline relies on.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, LocationError, StructuralError, TangledMeshError

INTERIOR, EDGE, CORNER = 0, 1, 2

# boundary side ids; bit i of Topology.vertex_sides is set when the vertex lies on side i
X_LO, X_HI, Y_LO, Y_HI = 0, 1, 2, 3

BARY_TOL = 1e-10


class Topology:
    """Connectivity shared by deformation-equivalent meshes.

    Parameters
    ----------
    elements : (ne, d+1) int array, positively oriented
    n_vertices : number of vertices
    vertex_sides : (nv,) int bitmask of the domain sides each vertex lies on
    periodic_pairs : optional dict mapping an axis (0 or 1) to an
        (n, 2) array of (hi-side vertex, lo-side vertex) pairs.
    """

    def __init__(self, elements, n_vertices, vertex_sides, periodic_pairs=None):
        self.elements = np.ascontiguousarray(elements, dtype=np.int64)
        self.elements.setflags(write=False)
        self.n_vertices = int(n_vertices)
        self.dim = self.elements.shape[1] - 1
        self.vertex_sides = np.asarray(vertex_sides, dtype=np.int64)
        self.periodic_pairs = dict(periodic_pairs or {})
        nsides = np.array([bin(int(v)).count("1") for v in self.vertex_sides], dtype=np.int64)
        kind = np.full(self.n_vertices, INTERIOR, dtype=np.int64)
        kind[nsides > 0] = EDGE
        # interval end points and rectangle corners cannot move
        kind[nsides >= self.dim] = CORNER
        self.vertex_kind = kind
        self._faces = {}

    @property
    def n_elements(self):
        return self.elements.shape[0]

    # ------------------------------------------------------------------ faces
    def faces(self, periodic=False):
        """Topological face table, built once per periodicity flag."""
        key = bool(periodic)
        if key not in self._faces:
            self._faces[key] = _build_face_topology(self, periodic=key)
        return self._faces[key]

    # ---------------------------------------------------------------- patches
    @cached_property
    def vertex_elements(self):
        """(nv, max_valence) element ids around each vertex, padded with -1,
        sorted ascending."""
        ne, nl = self.elements.shape
        owners = np.repeat(np.arange(ne), nl)
        verts = self.elements.ravel()
        order = np.lexsort((owners, verts))
        verts, owners = verts[order], owners[order]
        counts = np.bincount(verts, minlength=self.n_vertices)
        out = -np.ones((self.n_vertices, counts.max()), dtype=np.int64)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        slot = np.arange(verts.size) - starts[verts]
        out[verts, slot] = owners
        return out

    @cached_property
    def element_patches(self):
        """Per element, the sorted ids of elements sharing at least one vertex
        (the element itself included)."""
        ve = self.vertex_elements
        patches = []
        for elem in self.elements:
            ids = ve[elem].ravel()
            patches.append(np.unique(ids[ids >= 0]))
        return patches

    @cached_property
    def vertex_averaging(self):
        """Sparse row-stochastic matrix averaging vertex data over the
        immediate neighbours of each vertex, the vertex itself included."""
        nv = self.n_vertices
        rows, cols = [], []
        nl = self.dim + 1
        for a in range(nl):
            for b in range(nl):
                rows.append(self.elements[:, a])
                cols.append(self.elements[:, b])
        adj = sp.csr_matrix(
            (np.ones(sum(r.size for r in rows)), (np.concatenate(rows), np.concatenate(cols))),
            shape=(nv, nv),
        )
        adj.data[:] = 1.0
        adj.sum_duplicates()
        adj.data[:] = 1.0
        deg = np.asarray(adj.sum(axis=1)).ravel()
        return sp.diags(1.0 / deg) @ adj

    @cached_property
    def element_vertex_incidence(self):
        """Sparse (nv, ne) incidence matrix, 1 where vertex belongs to element."""
        ne, nl = self.elements.shape
        return sp.csr_matrix(
            (np.ones(ne * nl), (self.elements.ravel(), np.repeat(np.arange(ne), nl))),
            shape=(self.n_vertices, ne),
        )


@dataclass(frozen=True)
class FaceTopology:
    """Face table independent of vertex positions.

    For every face, side 0 ("L") is an element whose outward normal the face
    normal follows; side 1 ("R") is the neighbour, or -1 on the domain
    boundary.  ``verts[f, s]`` lists the face vertices in a common
    parametrisation order for both sides, ``orient[f, s]`` says whether that
    order agrees with the element's local ordering (triangles only).
    """

    elem: np.ndarray  # (nf, 2)
    local: np.ndarray  # (nf, 2)
    verts: np.ndarray  # (nf, 2, d)
    orient: np.ndarray  # (nf, 2)
    side: np.ndarray  # (nf,) boundary side of L, -1 for interior faces
    periodic: np.ndarray  # (nf,) bool
    period_shift: np.ndarray  # (nf, d): x_R = x_L + shift on periodic faces
    elem_faces: np.ndarray  # (ne, d+1, 2): (face id, side) per local face

    @property
    def n_faces(self):
        return self.elem.shape[0]

    @property
    def interior(self):
        return self.elem[:, 1] >= 0

    @property
    def boundary(self):
        return self.elem[:, 1] < 0

    def neighbors(self):
        """(ne, d+1) neighbour element across each local face, -1 on the boundary."""
        f, s = self.elem_faces[..., 0], self.elem_faces[..., 1]
        return self.elem[f, 1 - s]


@dataclass(frozen=True)
class FaceSet:
    """Face topology plus geometry of one particular mesh."""

    topo: FaceTopology
    normals: np.ndarray  # (nf, d) unit outward normal of side L
    measures: np.ndarray  # (nf,)

    def __getattr__(self, name):
        return getattr(self.topo, name)


@dataclass(frozen=True)
class ElementGeometry:
    volumes: np.ndarray  # (ne,)
    edge_matrix: np.ndarray  # (ne, d, d), columns x_j - x_0
    inverse: np.ndarray  # (ne, d, d)
    det: np.ndarray  # (ne,)
    centroids: np.ndarray  # (ne, d)
    altitudes: np.ndarray  # (ne,) minimum altitude per element

    @property
    def a_min(self):
        return float(self.altitudes.min())


@dataclass(frozen=True, eq=False)
class SimplicialMesh:
    """Vertices plus shared topology.  Immutable; use :meth:`moved` to get a
    deformed copy with the same connectivity."""

    vertices: np.ndarray
    topology: Topology
    lo: np.ndarray
    hi: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    @property
    def dim(self):
        return self.topology.dim

    @property
    def elements(self):
        return self.topology.elements

    @property
    def n_elements(self):
        return self.topology.n_elements

    @property
    def n_vertices(self):
        return self.topology.n_vertices

    @property
    def domain_measure(self):
        return float(np.prod(self.hi - self.lo))

    def moved(self, vertices):
        return SimplicialMesh(np.asarray(vertices, dtype=float), self.topology, self.lo, self.hi)

    def equivalent(self, other):
        """Deformation-equivalence: same counts and connectivity arrays."""
        return self.topology is other.topology or (
            self.n_vertices == other.n_vertices
            and np.array_equal(self.elements, other.elements)
        )

    def geometry(self):
        if "geom" not in self._cache:
            self._cache["geom"] = _compute_geometry(self)
        return self._cache["geom"]

    def faces(self, periodic=False):
        key = ("faces", bool(periodic))
        if key not in self._cache:
            self._cache[key] = face_connectivity(self, periodic=periodic)
        return self._cache[key]


# ---------------------------------------------------------------- builders
def build_interval_mesh(x_lo, x_hi, n):
    """Uniform partition of [x_lo, x_hi] into ``n`` intervals."""
    if int(n) != n or n < 1:
        raise ConfigurationError(f"number of intervals must be a positive integer, got {n!r}")
    if not x_lo < x_hi:
        raise ConfigurationError(f"degenerate interval [{x_lo}, {x_hi}]")
    n = int(n)
    x = np.linspace(x_lo, x_hi, n + 1)
    x[0], x[-1] = x_lo, x_hi
    elements = np.column_stack([np.arange(n), np.arange(1, n + 1)])
    sides = np.zeros(n + 1, dtype=np.int64)
    sides[0] = 1 << X_LO
    sides[-1] = 1 << X_HI
    topo = Topology(elements, n + 1, sides, periodic_pairs={0: np.array([[n, 0]])})
    return SimplicialMesh(x[:, None], topo, np.array([x_lo], float), np.array([x_hi], float))


def build_cross_triangulated_rectangle(x_range, y_range, nx, ny):
    """Rectangle split into nx*ny cells, each cut into 4 triangles through
    its centre.

    Vertex numbering: the (nx+1)(ny+1) grid nodes first (x fastest), then
    the nx*ny cell centres.  Element ``4*c + j`` is the triangle of cell
    ``c`` adjacent to its bottom, right, top, left edge for j = 0..3.
    """
    (x0, x1), (y0, y1) = x_range, y_range
    for n in (nx, ny):
        if int(n) != n or n < 1:
            raise ConfigurationError(f"cell counts must be positive integers, got {nx!r}, {ny!r}")
    if not (x0 < x1 and y0 < y1):
        raise ConfigurationError(f"degenerate rectangle {x_range} x {y_range}")
    nx, ny = int(nx), int(ny)
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    grid = np.column_stack([gx.ravel(), gy.ravel()])
    cx, cy = np.meshgrid(0.5 * (xs[:-1] + xs[1:]), 0.5 * (ys[:-1] + ys[1:]), indexing="xy")
    centres = np.column_stack([cx.ravel(), cy.ravel()])
    vertices = np.vstack([grid, centres])

    def node(i, j):
        return j * (nx + 1) + i

    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    ii, jj = ii.ravel(), jj.ravel()
    c = (nx + 1) * (ny + 1) + jj * nx + ii
    sw, se = node(ii, jj), node(ii + 1, jj)
    ne_, nw = node(ii + 1, jj + 1), node(ii, jj + 1)
    tris = np.stack(
        [
            np.column_stack([sw, se, c]),
            np.column_stack([se, ne_, c]),
            np.column_stack([ne_, nw, c]),
            np.column_stack([nw, sw, c]),
        ],
        axis=1,
    ).reshape(-1, 3)

    sides = np.zeros(len(vertices), dtype=np.int64)
    gi, gj = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), indexing="xy")
    gi, gj = gi.ravel(), gj.ravel()
    sides[: grid.shape[0]] |= np.where(gi == 0, 1 << X_LO, 0)
    sides[: grid.shape[0]] |= np.where(gi == nx, 1 << X_HI, 0)
    sides[: grid.shape[0]] |= np.where(gj == 0, 1 << Y_LO, 0)
    sides[: grid.shape[0]] |= np.where(gj == ny, 1 << Y_HI, 0)

    j_all = np.arange(ny + 1)
    i_all = np.arange(nx + 1)
    pairs = {
        0: np.column_stack([node(nx, j_all), node(0, j_all)]),
        1: np.column_stack([node(i_all, ny), node(i_all, 0)]),
    }
    topo = Topology(tris, len(vertices), sides, periodic_pairs=pairs)
    return SimplicialMesh(vertices, topo, np.array([x0, y0], float), np.array([x1, y1], float))


# ----------------------------------------------------------- connectivity
def _local_face_vertices(dim):
    """Local vertex indices of local face j (the face opposite vertex j)."""
    if dim == 1:
        return np.array([[1], [0]])
    return np.array([[1, 2], [2, 0], [0, 1]])


def _build_face_topology(topo, periodic):
    d = topo.dim
    elems = topo.elements
    ne = elems.shape[0]
    lf = _local_face_vertices(d)
    fv = elems[:, lf]  # (ne, d+1, d)
    key = np.sort(fv, axis=2).reshape(-1, d)
    owner = np.repeat(np.arange(ne), d + 1)
    loc = np.tile(np.arange(d + 1), ne)
    uniq, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    if counts.max() > 2:
        raise StructuralError("a face is shared by more than two elements")
    nf = uniq.shape[0]
    elem = -np.ones((nf, 2), dtype=np.int64)
    local = -np.ones((nf, 2), dtype=np.int64)
    # occurrences are visited in (element, local face) order, so side 0 is the
    # lowest element id
    order = np.argsort(inv, kind="stable")
    first = np.ones(order.size, dtype=bool)
    first[1:] = inv[order][1:] != inv[order][:-1]
    fid = inv[order]
    elem[fid[first], 0] = owner[order][first]
    local[fid[first], 0] = loc[order][first]
    elem[fid[~first], 1] = owner[order][~first]
    local[fid[~first], 1] = loc[order][~first]

    verts = np.repeat(uniq[:, None, :], 2, axis=1).copy()
    side = -np.ones(nf, dtype=np.int64)
    is_periodic = np.zeros(nf, dtype=bool)
    shift = np.zeros((nf, d))

    bnd = np.flatnonzero(elem[:, 1] < 0)
    if bnd.size:
        common = np.bitwise_and.reduce(topo.vertex_sides[uniq[bnd]], axis=1)
        if np.any(common == 0):
            raise StructuralError("a boundary face does not lie on a domain side")
        side[bnd] = np.array([int(c).bit_length() - 1 for c in common])

    if periodic:
        keep = _pair_periodic_faces(topo, uniq, elem, local, verts, side, is_periodic)
        elem, local, verts = elem[keep], local[keep], verts[keep]
        side, is_periodic, shift = side[keep], is_periodic[keep], shift[keep]

    nf = elem.shape[0]
    orient = np.zeros((nf, 2), dtype=np.int64)
    if d == 2:
        for s in (0, 1):
            ok = elem[:, s] >= 0
            e, j = elem[ok, s], local[ok, s]
            first_local = elems[e, (j + 1) % 3]
            orient[ok, s] = np.where(first_local == verts[ok, s, 0], 0, 1)
            other = elems[e, (j + 2) % 3]
            good = np.where(orient[ok, s] == 0, other == verts[ok, s, 1], first_local == verts[ok, s, 1])
            if not np.all(good):
                raise StructuralError("inconsistent face vertex ordering")

    elem_faces = -np.ones((ne, d + 1, 2), dtype=np.int64)
    for s in (0, 1):
        ok = elem[:, s] >= 0
        elem_faces[elem[ok, s], local[ok, s], 0] = np.flatnonzero(ok)
        elem_faces[elem[ok, s], local[ok, s], 1] = s
    if np.any(elem_faces < 0):
        raise StructuralError("element with an unassigned face")
    return FaceTopology(elem, local, verts, orient, side, is_periodic, shift, elem_faces)


def _pair_periodic_faces(topo, uniq, elem, local, verts, side, is_periodic):
    """Merge matching boundary faces on opposite sides into periodic faces.

    The hi-side element becomes side L.  Absorbed lo-side faces are marked
    with elem = -2; the returned mask keeps the surviving faces.
    """
    d = topo.dim
    for axis, pairs in topo.periodic_pairs.items():
        if axis >= d:
            continue
        hi_side, lo_side = 2 * axis + 1, 2 * axis
        vmap = dict(zip(pairs[:, 0].tolist(), pairs[:, 1].tolist()))
        lo_faces = {tuple(sorted(uniq[f])): f for f in np.flatnonzero((side == lo_side) & (elem[:, 1] < 0))}
        for f in np.flatnonzero((side == hi_side) & (elem[:, 1] < 0)):
            try:
                mapped = tuple(vmap[v] for v in verts[f, 0])
            except KeyError as exc:
                raise ConfigurationError("unmatched periodic boundary vertex") from exc
            g = lo_faces.pop(tuple(sorted(mapped)), None)
            if g is None:
                raise ConfigurationError("unmatched periodic boundary face")
            elem[f, 1], local[f, 1] = elem[g, 0], local[g, 0]
            verts[f, 1] = mapped
            is_periodic[f] = True
            elem[g] = -2
        if lo_faces:
            raise ConfigurationError("unmatched periodic boundary face")
    return elem[:, 0] != -2


def face_connectivity(mesh, periodic=False):
    """Faces of ``mesh`` with unit outward normals (of side L) and measures."""
    topo = mesh.topology.faces(periodic)
    d = mesh.dim
    X = mesh.vertices
    geom = mesh.geometry()
    eL = topo.elem[:, 0]
    if d == 1:
        xf = X[topo.verts[:, 0, 0], 0]
        normals = np.sign(xf - geom.centroids[eL, 0])[:, None]
        measures = np.ones(topo.n_faces)
    else:
        a = X[topo.verts[:, 0, 0]]
        b = X[topo.verts[:, 0, 1]]
        t = b - a
        measures = np.hypot(t[:, 0], t[:, 1])
        n = np.column_stack([t[:, 1], -t[:, 0]]) / measures[:, None]
        sgn = np.sign(np.einsum("fi,fi->f", n, 0.5 * (a + b) - geom.centroids[eL]))
        normals = n * sgn[:, None]
    shift = topo.period_shift
    if np.any(topo.periodic):
        shift = np.zeros((topo.n_faces, d))
        pf = topo.periodic
        shift[pf] = X[topo.verts[pf, 1, 0]] - X[topo.verts[pf, 0, 0]]
        topo = FaceTopology(topo.elem, topo.local, topo.verts, topo.orient, topo.side,
                            topo.periodic, shift, topo.elem_faces)
    return FaceSet(topo, normals, measures)


# ---------------------------------------------------------------- geometry
def small_det(A):
    if A.shape[-1] == 1:
        return A[..., 0, 0].copy()
    return A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]


def small_inv(A, det=None):
    if det is None:
        det = small_det(A)
    if A.shape[-1] == 1:
        return 1.0 / A
    out = np.empty_like(A)
    out[..., 0, 0] = A[..., 1, 1]
    out[..., 1, 1] = A[..., 0, 0]
    out[..., 0, 1] = -A[..., 0, 1]
    out[..., 1, 0] = -A[..., 1, 0]
    return out / det[..., None, None]


def edge_matrices(vertices, elements):
    X = vertices[elements]  # (ne, d+1, d)
    return np.swapaxes(X[:, 1:, :] - X[:, :1, :], 1, 2)


def geometry(mesh, check=True):
    """Per-element volumes, edge matrices, centroids and minimum altitudes.

    Raises :class:`TangledMeshError` if any element has nonpositive volume
    (unless ``check`` is False).  Checked results are cached on the mesh.
    """
    if check:
        return mesh.geometry()
    return _compute_geometry(mesh, check=False)


def _compute_geometry(mesh, check=True):
    d = mesh.dim
    E = edge_matrices(mesh.vertices, mesh.elements)
    det = small_det(E)
    if check and np.any(det <= 0):
        bad = np.flatnonzero(det <= 0)
        raise TangledMeshError(f"{bad.size} element(s) with nonpositive volume, first {bad[0]}")
    vol = det / math.factorial(d)
    X = mesh.vertices[mesh.elements]
    centroids = X.mean(axis=1)
    if d == 1:
        alt = vol.copy()
    else:
        lf = _local_face_vertices(2)
        edges = X[:, lf[:, 1]] - X[:, lf[:, 0]]
        lengths = np.linalg.norm(edges, axis=2)
        alt = (2.0 * vol[:, None] / lengths).min(axis=1)
    return ElementGeometry(vol, E, small_inv(E, det), det, centroids, alt)


def check_volume_partition(mesh, rtol=1e-12):
    total = mesh.geometry().volumes.sum()
    return abs(total - mesh.domain_measure) <= rtol * mesh.domain_measure


# ---------------------------------------------------------- point location
def _barycentric(mesh, eids, pts):
    geom = mesh.geometry()
    x0 = mesh.vertices[mesh.elements[eids, 0]]
    lam = np.einsum("...ij,...j->...i", geom.inverse[eids], pts - x0)
    return np.concatenate([1.0 - lam.sum(axis=-1, keepdims=True), lam], axis=-1)


def _clamp(bary):
    bary = np.clip(bary, 0.0, 1.0)
    return bary / bary.sum(axis=-1, keepdims=True)


def locate_point(mesh, x, tol=BARY_TOL):
    """Containing element (lowest id on ties) and clamped barycentrics."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    ne = mesh.n_elements
    bary = _barycentric(mesh, np.arange(ne), np.broadcast_to(x, (ne, mesh.dim)))
    inside = np.flatnonzero(bary.min(axis=1) >= -tol)
    if inside.size == 0:
        raise LocationError(f"point {x.tolist()} lies outside the mesh")
    e = int(inside[0])
    return e, _clamp(bary[e])


def locate_points(mesh, pts, seed_vertices=None, tol=BARY_TOL):
    """Batch point location.

    Each point is first tested against the elements around its seed vertex
    (the natural guess when points are small displacements of vertices),
    then against all elements.  Returns (element ids, clamped barycentrics).
    """
    pts = np.asarray(pts, dtype=float).reshape(-1, mesh.dim)
    npts = pts.shape[0]
    eid = -np.ones(npts, dtype=np.int64)
    bary = np.zeros((npts, mesh.dim + 1))
    if seed_vertices is not None:
        cand = mesh.topology.vertex_elements[np.asarray(seed_vertices)]
        valid = cand >= 0
        c = np.where(valid, cand, 0)
        b = _barycentric(mesh, c, np.broadcast_to(pts[:, None, :], c.shape + (mesh.dim,)))
        ok = (b.min(axis=2) >= -tol) & valid
        has = ok.any(axis=1)
        pick = np.argmax(ok, axis=1)  # candidates are sorted, so first hit is lowest id
        rows = np.flatnonzero(has)
        eid[rows] = c[rows, pick[rows]]
        bary[rows] = b[rows, pick[rows]]
    for i in np.flatnonzero(eid < 0):
        e, lam = locate_point(mesh, pts[i], tol)
        eid[i], bary[i] = e, lam
        continue
    return eid, _clamp(bary)


# ------------------------------------------------------------------ export
def write_mesh_csv(mesh, path):
    """Vertex rows ``id,x[,y]`` followed by element rows ``id,v0,v1[,v2]``."""
    d = mesh.dim
    coord_names = ["x", "y"][:d]
    with open(path, "w") as fh:
        fh.write("vertex," + ",".join(coord_names) + "\n")
        for i, row in enumerate(mesh.vertices):
            fh.write(f"{i}," + ",".join(repr(float(c)) for c in row) + "\n")
        fh.write("element," + ",".join(f"v{j}" for j in range(d + 1)) + "\n")
        for i, row in enumerate(mesh.elements):
            fh.write(f"{i}," + ",".join(str(int(v)) for v in row) + "\n")


def read_mesh_csv(path):
    """Inverse of :func:`write_mesh_csv`; returns (vertices, elements)."""
    verts, elems, mode = [], [], None
    with open(path) as fh:
        for line in fh:
            parts = line.strip().split(",")
            if parts[0] in ("vertex", "element"):
                mode = parts[0]
                continue
            if mode == "vertex":
                verts.append([float(p) for p in parts[1:]])
            elif mode == "element":
                elems.append([int(p) for p in parts[1:]])
    return np.array(verts), np.array(elems, dtype=np.int64)
