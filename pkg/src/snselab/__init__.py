"""Pseudospectral laboratory for the 2D stochastic Navier-Stokes equations
in vorticity form: the semi-implicit Euler / spectral Galerkin scheme, its
nudged coupling, Wasserstein-style distances between ensembles, and the
convergence, contraction, and long-time bias studies built on them."""

__version__ = "0.1.0"

from .errors import (CapacityError, ConfigError, FitError, GridMismatchError,
                     RangeError, SnseLabError, SolverError, StructuralError)
from .spectral import (SpectralField, SpectralGrid, VelocityField, advect, axpy,
                       biot_savart, harmonic_field, inner, load_field, make_grid,
                       project, random_field, save_field, scale, sobolev_norm,
                       zero_field)
from .forcing import (ForcingBasis, NoiseStream, apply, check_nondegeneracy,
                      low_mode_basis, pseudo_inverse_apply, sample_increment)
from .integrator import (SchemeParams, Trajectory, moment_probe,
                         reference_simulate, semi_implicit_step, simulate,
                         simulate_ensemble)
from .coupling import (CoupledPair, NudgeParams, coupled_simulate, girsanov_cost,
                       nudged_step, pathwise_contraction_check, propose_beta)
from .measures import (DistanceParams, Ensemble, certify_triangle, rho,
                       rho_weighted, wasserstein_coupled_bound, wasserstein_exact)
from .experiments import (InitialCondition, ObservableSpec, RateFit, StudyReport,
                          fit_rate)

__all__ = [name for name in dir() if not name.startswith("_")]
