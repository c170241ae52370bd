"""Analytic tree fractals built from derivative coordinate functions."""

from .curves import (
    DerivativeCoords,
    PathPolyline,
    Pose,
    ScalarFn,
    SGrid,
    arc_length,
    derive_coords,
    integrate_path,
    load_coords_csv,
    resample,
    turn_angle,
)
from .errors import (
    DendriteError,
    DslError,
    EvaluationError,
    ExportError,
    GridError,
    NodeBudgetError,
    TopologyError,
)

__version__ = "0.1.0"
