"""Numerical laboratory for eigenvalue-sorted conformal curvature equations."""

from .fields import (
    BOX,
    PERIODIC,
    GridSpec,
    ScalarField,
    SymMatrixField,
    VectorField,
    background_from_factor,
    conformal_schouten,
    conformal_volume,
    gradient,
    hessian,
    make_grid,
)
from .operators import (
    EigenDecomp,
    OperatorSpec,
    eig_sym_ascending,
    ellipticity_constants,
    g_p_exact,
    g_p_soft,
    op_derivative,
    op_value,
    ricci_from_schouten,
)

__version__ = "0.1.0"
