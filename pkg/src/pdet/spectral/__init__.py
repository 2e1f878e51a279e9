from .etdrk import ETDRKIntegrator, SpectralGrid, SpectralState, etdrk_step
from .factory import (RECIPES, DatasetBuilder, build_stepper, default_split, recipe, sample_solver_spec, simulate,
                      vorticity_solver_step)
from .initializers import ic_diffused_noise, ic_gaussian_blobs, ic_grf, ic_truncated_fourier
from .types import SolverSpec
