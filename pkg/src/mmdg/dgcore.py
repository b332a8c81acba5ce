"""Reference-element bases, quadrature rules and DG fields.

Reference simplices are [0, 1] and the triangle (0,0), (1,0), (0,1).  The
modal basis is orthonormal on the reference simplex, obtained from the
monomials through the Cholesky factor of their exact Gram matrix, so that
the mass matrix on an element K is (|K| / |ref|) times the identity and the
first coefficient carries the cell average.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi

from .errors import ConfigurationError
from .mesh import SimplicialMesh

__all__ = [
    "Basis",
    "QuadratureRule",
    "DGField",
    "get_basis",
    "n_basis",
    "gauss_legendre",
    "gauss_lobatto",
    "triangle_rule",
    "l2_project",
    "evaluate",
    "evaluate_all",
    "cell_average",
    "cell_averages",
    "reference_to_physical",
    "write_field_csv",
]


def n_basis(dim, k):
    return k + 1 if dim == 1 else (k + 1) * (k + 2) // 2


def ref_measure(dim):
    return 1.0 if dim == 1 else 0.5


def monomial_exponents(dim, k):
    """Exponents ordered by total degree, so the basis is hierarchical."""
    if dim == 1:
        return [(a,) for a in range(k + 1)]
    return [(p - b, b) for p in range(k + 1) for b in range(p + 1)]


def monomial_integral(exps):
    """Exact integral of a monomial over the reference simplex."""
    if len(exps) == 1:
        return 1.0 / (exps[0] + 1)
    a, b = exps
    return math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)


# ------------------------------------------------------------- quadrature
@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray  # (nq, d) reference coordinates
    weights: np.ndarray  # (nq,)
    degree: int


def gauss_legendre(n):
    """n-point Gauss-Legendre rule on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def gauss_lobatto(n):
    """n-point Gauss-Lobatto rule on [0, 1] (n >= 2)."""
    if n < 2:
        raise ConfigurationError("Gauss-Lobatto needs at least two points")
    if n == 2:
        x = np.array([-1.0, 1.0])
    else:
        # interior nodes are the roots of P'_{n-1}
        c = np.zeros(n)
        c[-1] = 1.0
        x = np.concatenate([[-1.0], np.sort(np.polynomial.legendre.legroots(np.polynomial.legendre.legder(c))), [1.0]])
    c = np.zeros(n)
    c[-1] = 1.0
    p = np.polynomial.legendre.legval(x, c)
    w = 2.0 / (n * (n - 1) * p**2)
    return 0.5 * (x + 1.0), 0.5 * w


def triangle_rule(n):
    """Collapsed-coordinate rule with n*n points on the reference triangle,
    exact for total degree 2n - 1."""
    s, ws = gauss_legendre(n)
    xj, wj = roots_jacobi(n, 1.0, 0.0)
    eta = 0.5 * (1.0 + xj)
    weta = 0.25 * wj
    S, E = np.meshgrid(s, eta, indexing="ij")
    W = np.outer(ws, weta)
    pts = np.column_stack([(S * (1.0 - E)).ravel(), E.ravel()])
    return pts, W.ravel()


@lru_cache(maxsize=None)
def volume_rule(dim, degree):
    n = max(1, math.ceil((degree + 1) / 2))
    if dim == 1:
        x, w = gauss_legendre(n)
        return QuadratureRule(x[:, None], w, 2 * n - 1)
    p, w = triangle_rule(n)
    return QuadratureRule(p, w, 2 * n - 1)


# ------------------------------------------------------------------ basis
def local_face_vertices(dim):
    if dim == 1:
        return np.array([[1], [0]])
    return np.array([[1, 2], [2, 0], [0, 1]])


def reference_vertices(dim):
    if dim == 1:
        return np.array([[0.0], [1.0]])
    return np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def barycentric_to_reference(bary):
    """Barycentric coordinates (..., d+1) to reference coordinates (..., d)."""
    return np.asarray(bary)[..., 1:]


class Basis:
    """Orthonormal modal basis of degree k on the reference simplex together
    with all the tabulations the solver needs."""

    def __init__(self, dim, k):
        if dim not in (1, 2):
            raise ConfigurationError(f"dimension must be 1 or 2, got {dim}")
        if int(k) != k or k < 0:
            raise ConfigurationError(f"degree must be a nonnegative integer, got {k}")
        self.dim, self.k = dim, int(k)
        self.exps = monomial_exponents(dim, self.k)
        self.nb = len(self.exps)
        self.ref_measure = ref_measure(dim)
        gram = np.array([[monomial_integral(tuple(a + b for a, b in zip(ei, ej))) for ej in self.exps] for ei in self.exps])
        chol = np.linalg.cholesky(gram)
        # phi = T @ monomials with T = chol^{-1}
        self.T = np.linalg.solve(chol, np.eye(self.nb))
        self.phi0 = 1.0 / math.sqrt(self.ref_measure)

        self.quad = volume_rule(dim, 3 * self.k)
        # one more Cholesky pass on the discrete mass matrix removes the
        # round-off left by the ill-conditioned monomial Gram matrix
        phi = self.values(self.quad.points)
        mass = phi.T @ (self.quad.weights[:, None] * phi)
        self.T = np.linalg.solve(np.linalg.cholesky(mass), self.T)
        self.vol_phi = self.values(self.quad.points)  # (nq, nb)
        self.vol_grad = self.gradients(self.quad.points)  # (nq, nb, d)
        self.vol_wphi = self.quad.weights[:, None] * self.vol_phi  # projection weights

        nf = max(1, math.ceil((3 * self.k + 1) / 2))
        self.face_s, self.face_w = gauss_legendre(nf) if dim == 2 else (np.array([0.0]), np.array([1.0]))
        self.face_points = self._face_points()  # (d+1, 2, nqf, d)
        self.face_phi = self.values(self.face_points)  # (d+1, 2, nqf, nb)

        self.special_points = self._special_points()  # (ns, d)
        self.special_phi = self.values(self.special_points)

    # tabulation --------------------------------------------------------
    def monomials(self, pts):
        pts = np.asarray(pts, dtype=float)
        out = np.ones(pts.shape[:-1] + (self.nb,))
        for i, e in enumerate(self.exps):
            for ax, p in enumerate(e):
                if p:
                    out[..., i] *= pts[..., ax] ** p
        return out

    def monomial_gradients(self, pts):
        pts = np.asarray(pts, dtype=float)
        out = np.zeros(pts.shape[:-1] + (self.nb, self.dim))
        for i, e in enumerate(self.exps):
            for ax in range(self.dim):
                if e[ax] == 0:
                    continue
                term = e[ax] * pts[..., ax] ** (e[ax] - 1)
                for other, p in enumerate(e):
                    if other != ax and p:
                        term = term * pts[..., other] ** p
                out[..., i, ax] = term
        return out

    def values(self, pts):
        """Basis values (..., nb) at reference points (..., d)."""
        return self.monomials(pts) @ self.T.T

    def gradients(self, pts):
        """Reference gradients (..., nb, d)."""
        return np.einsum("ij,...jd->...id", self.T, self.monomial_gradients(pts))

    # point sets ----------------------------------------------------------
    def face_point(self, local, orient, s):
        """Reference coordinates of face parameter s on local face ``local``;
        orientation 1 runs the face backwards."""
        rv = reference_vertices(self.dim)
        a, b = local_face_vertices(self.dim)[local][[0, -1]]
        if orient:
            a, b = b, a
        s = np.asarray(s)[..., None]
        return (1.0 - s) * rv[a] + s * rv[b]

    def _face_points(self):
        pts = np.empty((self.dim + 1, 2, self.face_s.size, self.dim))
        for j in range(self.dim + 1):
            for o in range(2):
                pts[j, o] = self.face_point(j, o, self.face_s)
        return pts

    def _special_points(self):
        n_gl = max(2, math.ceil((self.k + 3) / 2))
        r, _ = gauss_lobatto(n_gl)
        if self.dim == 1:
            return r[:, None]
        s = self.face_s
        pts = []
        for c in range(3):
            a, b = (c + 1) % 3, (c + 2) % 3
            for ra in r:
                for sb in s:
                    lam = np.zeros(3)
                    lam[c] = ra
                    lam[a] = (1.0 - ra) * sb
                    lam[b] = (1.0 - ra) * (1.0 - sb)
                    pts.append(lam[1:])
        return np.array(pts)

    def sample_points(self):
        """21 error-sampling points: equispaced in 1D, the order-5 lattice on
        triangles."""
        if self.dim == 1:
            return np.linspace(0.0, 1.0, 21)[:, None]
        return np.array([[i / 5.0, j / 5.0] for j in range(6) for i in range(6 - j)])

    def linear_modes(self, funcs):
        """Coefficient vectors (len(funcs), nb) of reference-space functions
        that lie in the span of the basis (exact projection)."""
        out = []
        for f in funcs:
            vals = f(self.quad.points)
            out.append(self.vol_wphi.T @ vals)
        return np.array(out)


@lru_cache(maxsize=None)
def get_basis(dim, k):
    return Basis(dim, k)


# ------------------------------------------------------------------ fields
@dataclass
class DGField:
    """Per-element modal coefficients (ne, nb) of a degree-k field."""

    mesh: SimplicialMesh
    degree: int
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        nb = n_basis(self.mesh.dim, self.degree)
        if self.coeffs.shape != (self.mesh.n_elements, nb):
            raise ConfigurationError(
                f"coefficient array shape {self.coeffs.shape} does not match "
                f"({self.mesh.n_elements}, {nb})"
            )

    @property
    def basis(self):
        return get_basis(self.mesh.dim, self.degree)

    def copy(self):
        return DGField(self.mesh, self.degree, self.coeffs.copy())

    def averages(self):
        return self.coeffs[:, 0] * self.basis.phi0

    def integral(self):
        vol = self.mesh.geometry().volumes
        return float(np.sum(vol * self.averages()))

    def __add__(self, other):
        return DGField(self.mesh, self.degree, self.coeffs + other.coeffs)

    def __sub__(self, other):
        return DGField(self.mesh, self.degree, self.coeffs - other.coeffs)

    def __mul__(self, a):
        return DGField(self.mesh, self.degree, self.coeffs * a)

    __rmul__ = __mul__


def reference_to_physical(mesh, ref_pts, elements=None):
    """Map reference points (np, d) to physical points (ne, np, d)."""
    elems = mesh.elements if elements is None else mesh.elements[elements]
    x0 = mesh.vertices[elems[:, 0]]
    E = np.swapaxes(mesh.vertices[elems[:, 1:]] - x0[:, None, :], 1, 2)
    return x0[:, None, :] + np.einsum("eij,pj->epi", E, np.asarray(ref_pts, dtype=float))


def l2_project(f, mesh, k):
    """Element-wise L2 projection of the pointwise function ``f``.

    ``f`` receives an array of physical points (..., d) and returns values of
    shape (...).
    """
    basis = get_basis(mesh.dim, k)
    xq = reference_to_physical(mesh, basis.quad.points)
    vals = np.asarray(f(xq), dtype=float)
    vals = np.broadcast_to(vals, xq.shape[:-1])
    return DGField(mesh, k, vals @ basis.vol_wphi)


def evaluate(field, element, ref_pts):
    """Values of ``field`` on one element at reference points (np, d)."""
    phi = field.basis.values(np.asarray(ref_pts, dtype=float).reshape(-1, field.mesh.dim))
    return phi @ field.coeffs[element]


def evaluate_all(field, ref_pts):
    """Values (ne, np) at the same reference points in every element."""
    phi = field.basis.values(np.asarray(ref_pts, dtype=float).reshape(-1, field.mesh.dim))
    return field.coeffs @ phi.T


def cell_average(field, element):
    return float(field.coeffs[element, 0] * field.basis.phi0)


def cell_averages(field):
    return field.averages()


def fit_from_values(basis, values_at_pts, pts):
    """Least-squares modal coefficients from point values (exact when the
    points are unisolvent)."""
    phi = basis.values(pts)
    coef, *_ = np.linalg.lstsq(phi, np.asarray(values_at_pts).T, rcond=None)
    return coef.T


def write_field_csv(field, path, n_points=None):
    """Rows ``element,point_x[,point_y],value`` at the per-element sample points."""
    basis = field.basis
    pts = basis.sample_points() if n_points is None else _sample_points(field.mesh.dim, n_points)
    vals = evaluate_all(field, pts)
    xs = reference_to_physical(field.mesh, pts)
    names = ["point_x", "point_y"][: field.mesh.dim]
    with open(path, "w") as fh:
        fh.write("element," + ",".join(names) + ",value\n")
        for e in range(field.mesh.n_elements):
            for p in range(pts.shape[0]):
                coords = ",".join(repr(float(c)) for c in xs[e, p])
                fh.write(f"{e},{coords},{float(vals[e, p])!r}\n")


def _sample_points(dim, n):
    if dim == 1:
        return np.linspace(0.0, 1.0, n)[:, None]
    # smallest lattice with at least n points
    m = 1
    while (m + 1) * (m + 2) // 2 < n:
        m += 1
    return np.array([[i / m, j / m] for j in range(m + 1) for i in range(m + 1 - j)])
