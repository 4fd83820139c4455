"""Three-component chimera gradient flow: solver and verification harness."""

__version__ = "0.1.0"

from .grid import (
    DensityView,
    Field,
    GridSpec,
    biharmonic_inverse,
    gradient,
    helmholtz_solve,
    laplacian,
    lp_norm,
    mollify_initial,
    second_moment,
    sobolev_norms,
)
from .transport import OtConfig, TransportResult, lp_exact_w2, sinkhorn

__all__ = [
    "DensityView",
    "Field",
    "GridSpec",
    "OtConfig",
    "TransportResult",
    "biharmonic_inverse",
    "gradient",
    "helmholtz_solve",
    "laplacian",
    "lp_exact_w2",
    "lp_norm",
    "mollify_initial",
    "second_moment",
    "sinkhorn",
    "sobolev_norms",
]
