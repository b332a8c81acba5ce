"""Moving-mesh discontinuous Galerkin solver for the shallow water equations."""
from .errors import (ConfigurationError, LocationError, MMDGError, NumericalFailure, PositivityError,
                     StructuralError, TangledMeshError)
from .mesh import SimplicialMesh, build_cross_triangulated_rectangle, build_interval_mesh
from .dgcore import DGField, get_basis, l2_project
from .swe import SWEDiscretization, FlowField
from .remap import remap_state, remap_field, MeshBlend
from .mmpde import MeshMover, build_metric
from .scenarios import Scenario, get_scenario, list_scenarios
from .driver import RunConfig, RunReport, convergence_study, error_norms, time_loop

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "LocationError", "MMDGError", "NumericalFailure", "PositivityError",
    "StructuralError", "TangledMeshError", "SimplicialMesh", "build_cross_triangulated_rectangle",
    "build_interval_mesh", "DGField", "get_basis", "l2_project", "SWEDiscretization", "FlowField",
    "remap_state", "remap_field", "MeshBlend", "MeshMover", "build_metric", "Scenario", "get_scenario",
    "list_scenarios", "RunConfig", "RunReport", "convergence_study", "error_norms", "time_loop",
]
