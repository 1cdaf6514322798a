from .adam import AdamState, adam_step
from .autodiff import NumericError, ParamGraph, ParamStore, Var, grad
from .finite_diff import finite_diff_jacobian
from .linalg import ContractViolation, DimensionError, eig_sym, eigh_batch, sym_part
from .quadrature import quadrature_nodes
from .rng import make_rng, split

__all__ = [
    "AdamState", "adam_step", "NumericError", "ParamGraph", "ParamStore", "Var", "grad",
    "finite_diff_jacobian", "ContractViolation", "DimensionError", "eig_sym", "eigh_batch",
    "sym_part", "quadrature_nodes", "make_rng", "split",
]
