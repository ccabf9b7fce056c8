"""Spectrum slicing for symmetric FEM eigenproblems with H^2-matrix LDL^T factorizations."""

from .arithmetic import (InvalidBlock, LdltFactors, add_lowrank_global, add_lowrank_local, inertia, ldlt,
                         multiply_accum, solve_diag, solve_lower_unit)
from .cluster import BlockTree, ClusterTree, build_block_tree, build_cluster_tree
from .compression import WeightSet, build_adaptive_row_basis, init_weights, recompress
from .control import TruncationControl
from .dense import PivotBreakdown, dense_gen_eig, dense_ldlt, dense_sym_eig
from .h2 import (BlockLists, ClusterBasis, H2Matrix, NotOrthogonal, StructureMismatch, TooLarge, from_sparse,
                 orthogonalize_basis, storage_report)
from .slicing import (EigenResult, FactorizationFailed, Pencil, SlicingTask, compute_eigenvalues, nu,
                      spectrum_bounds, shift)
from .slicing import slice as slice_interval

__version__ = "0.1.0"

__all__ = [
    "InvalidBlock", "LdltFactors", "add_lowrank_global", "add_lowrank_local", "inertia", "ldlt",
    "multiply_accum", "solve_diag", "solve_lower_unit",
    "BlockTree", "ClusterTree", "build_block_tree", "build_cluster_tree",
    "WeightSet", "build_adaptive_row_basis", "init_weights", "recompress",
    "TruncationControl", "PivotBreakdown", "dense_gen_eig", "dense_ldlt", "dense_sym_eig",
    "BlockLists", "ClusterBasis", "H2Matrix", "NotOrthogonal", "StructureMismatch", "TooLarge",
    "from_sparse", "orthogonalize_basis", "storage_report",
    "EigenResult", "FactorizationFailed", "Pencil", "SlicingTask", "compute_eigenvalues", "nu",
    "spectrum_bounds", "shift", "slice_interval",
]
