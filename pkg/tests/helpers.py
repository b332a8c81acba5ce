import numpy as np

from mmdg.mesh import EDGE, INTERIOR


def jiggle(mesh, amount, seed):
    """Random interior displacement, small enough to keep every element valid."""
    rng = np.random.default_rng(seed)
    X = mesh.vertices.copy()
    kind = mesh.topology.vertex_kind
    step = amount * mesh.geometry().a_min
    d = rng.uniform(-step, step, X.shape)
    d[kind != INTERIOR] = 0.0
    return mesh.moved(X + d)


def deform(mesh, amount, seed):
    """Random admissible deformation: interior vertices move by up to
    ``amount`` times the minimum altitude, boundary vertices slide along
    their side (corners fixed)."""
    rng = np.random.default_rng(seed)
    X = mesh.vertices.copy()
    step = amount * mesh.geometry().a_min
    d = rng.uniform(-step, step, X.shape)
    sides = mesh.topology.vertex_sides
    kind = mesh.topology.vertex_kind
    for ax in range(mesh.dim):
        d[(sides & (0b11 << (2 * ax))) != 0, ax] = 0.0
    d[(kind != INTERIOR) & (kind != EDGE)] = 0.0
    return mesh.moved(X + d)
