"""Reduced-basis surrogates (sparse grid, tensor train, MLP) of a parametric diffusion solution map."""

__version__ = "0.1.0"

from .pde import Grid2D, assemble_fem, matern_eigenbasis, solve_diffusion, solve_tangent  # noqa: E402,F401
from .reduced_basis import ReducedBasis, SmoothnessSpec, decode, empirical_pca, encode  # noqa: E402,F401
from .sparse_grid import build_index_set, build_sg_surrogate, leja_nodes  # noqa: E402,F401
from .tensor_train import TensorTrain, degree_schedule, tt_cross, tt_round  # noqa: E402,F401
from .neural import MlpSurrogate, init_mlp, train  # noqa: E402,F401
from .bench import BenchRecord, eps_h1mu, eps_l2mu, pareto_frontier  # noqa: E402,F401
