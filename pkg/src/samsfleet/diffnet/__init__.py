"""Minimal differentiable computation for the graph actor-critic."""
from . import tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .dirichlet import (EPS_CONC, EPS_SIMPLEX, DistributionError, clamp_simplex,
                        dirichlet_entropy, dirichlet_logpdf, dirichlet_logpdf_value,
                        dirichlet_mean, dirichlet_sample)
from .gradcheck import check_gradients, check_input_gradient, relative_error
from .layers import (ParamStore, add_dense, add_gat, add_gcn, dense_forward, gat_forward,
                     gcn_forward, normalized_adjacency, sum_pool)
from .optim import Adam, adam_step
from .tensor import ShapeError, Tape, Tensor, no_grad

__all__ = [
    "tensor", "Tensor", "Tape", "no_grad", "ShapeError", "ParamStore", "Adam", "adam_step",
    "add_dense", "add_gat", "add_gcn", "dense_forward", "gat_forward", "gcn_forward",
    "normalized_adjacency", "sum_pool", "dirichlet_sample", "dirichlet_logpdf",
    "dirichlet_logpdf_value", "dirichlet_mean", "dirichlet_entropy", "clamp_simplex",
    "DistributionError", "EPS_CONC", "EPS_SIMPLEX", "check_gradients",
    "check_input_gradient", "relative_error", "save_checkpoint", "load_checkpoint",
]
