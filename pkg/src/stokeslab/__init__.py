"""Observability, null control, and sensor design for the 2D Stokes system
on a rectangle, discretized through the clamped stream-function formulation.
"""

from .grid import (
    GoodTimeSet,
    RectDomain,
    SpaceTimeMask,
    SpatialMask,
    build_domain,
    cylinder_mask,
    good_time_set,
    mask_ball,
    mask_from_text,
    mask_full,
    mask_random,
    mask_to_text,
)
from .observability import (
    ControlSignal,
    ObservabilityReport,
    TelescopeSchedule,
    build_schedule,
    dual_null_control,
    forward_terminal,
    telescoping_bound,
)
from .shape_design import (
    DesignDensity,
    modal_weights,
    randomized_constant_mc,
    solve_relaxed_design,
)
from .smallness import l1_constant_estimate, l2_constant
from .spectral import SpectralBasis, load_basis, save_basis, solve_modes
from .time_optimal import (
    RNorm,
    TimeOptimalResult,
    duality_map,
    min_norm_control,
    minimal_time,
)

__version__ = "0.1.0"
