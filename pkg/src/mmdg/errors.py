"""Exception hierarchy shared by every stage of the solver."""


class MMDGError(Exception):
    """Base class for all solver errors."""


class ConfigurationError(MMDGError, ValueError):
    """Invalid user input: mesh sizes, scenario names, boundary pairings."""


class StructuralError(MMDGError):
    """Mesh connectivity is not a valid simplicial manifold, or two meshes
    that must share connectivity do not."""


class NumericalFailure(MMDGError):
    """A numerical invariant was violated (CLI exit code 3)."""


class TangledMeshError(NumericalFailure):
    """An element has zero or negative volume."""


class PositivityError(NumericalFailure):
    """A cell average of a nonnegative quantity dropped below its floor."""


class LocationError(MMDGError):
    """A point could not be located inside the mesh."""
