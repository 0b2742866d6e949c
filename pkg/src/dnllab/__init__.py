"""Numerical laboratory for whitened pairwise / unary attention decomposition.

A from-scratch implementation of the non-local attention block and its
disentangled variants, with machine-precision verification of the
decomposition identities, a finite-difference gradient oracle, a seeded
synthetic segmentation benchmark, and closed-form plus instrumented
complexity accounting.
"""

from .analysis import (
    IdentityReport,
    coupling_gradient_probe,
    elimination_check,
    factorization_check,
    gram_eigen_bound,
    mean_optimality_oracle,
    separation_objective,
    whiten_split,
)
from .autograd import CheckReport, backward, finite_diff_check
from .bench import flop_formula, flop_measure, latency_bench, overhead_report, param_count
from .blocks import (
    AttentionDecomposition,
    BlockParams,
    Embeddings,
    Variant,
    attention,
    block_forward,
    compute_embeddings,
    init_block_params,
)
from .metrics import boundary_map, consistency_table, overlap, within_category_map
from .toyseg import SceneSample, TrainConfig, cross_entropy, generate_scene, miou, poly_lr, train

__version__ = "0.1.0"

__all__ = [
    "AttentionDecomposition", "BlockParams", "CheckReport", "Embeddings",
    "IdentityReport", "SceneSample", "TrainConfig", "Variant", "attention",
    "backward", "block_forward", "boundary_map", "compute_embeddings",
    "consistency_table", "coupling_gradient_probe", "cross_entropy",
    "elimination_check", "factorization_check", "finite_diff_check",
    "flop_formula", "flop_measure", "generate_scene", "gram_eigen_bound",
    "init_block_params", "latency_bench", "mean_optimality_oracle", "miou",
    "overhead_report", "overlap", "param_count", "poly_lr",
    "separation_objective", "train", "whiten_split", "within_category_map",
]
