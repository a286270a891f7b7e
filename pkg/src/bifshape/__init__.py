"""Bifurcation diagrams, branch-point location, and shape control of
branch points for the cubic-quintic Allen-Cahn equation on triangle meshes.
"""

from .continuation import (
    Branch,
    Diagram,
    arclength_continue,
    deflated_continuation,
    export_diagram,
    newton,
    refine_with_arclength,
)
from .mesh import (
    TriMesh,
    apply_displacement,
    gen_rounded_square,
    gen_unit_disk,
    mesh_checksum,
    min_jacobian_ratio,
    read_mesh,
    write_mesh,
)
from .moore_spence import BranchPointState, ms_initialize, ms_jacobian, ms_residual, ms_solve
from .shape import (
    InnerProductSpec,
    OptimizeOptions,
    OptimizeResult,
    accept_step,
    objective,
    optimize,
    riesz_update,
    shape_gradient,
    taylor_remainders,
)

__all__ = [
    "Branch",
    "BranchPointState",
    "Diagram",
    "InnerProductSpec",
    "OptimizeOptions",
    "OptimizeResult",
    "TriMesh",
    "accept_step",
    "apply_displacement",
    "arclength_continue",
    "deflated_continuation",
    "export_diagram",
    "gen_rounded_square",
    "gen_unit_disk",
    "mesh_checksum",
    "min_jacobian_ratio",
    "ms_initialize",
    "ms_jacobian",
    "ms_residual",
    "ms_solve",
    "newton",
    "objective",
    "optimize",
    "read_mesh",
    "refine_with_arclength",
    "riesz_update",
    "shape_gradient",
    "taylor_remainders",
    "write_mesh",
]

__version__ = "0.1.0"
