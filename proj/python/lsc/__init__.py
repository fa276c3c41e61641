"""Spectral eigenvector fields over attention graphs.

Grids are ``(rows, cols)`` tuples and fields are ``(rows * cols, channels)``
arrays in raster order. Graphs are ``(affinity, grid)`` pairs.
"""

from ._lsc import (
    ComputeError,
    InputError,
    adjusted_rand_index,
    coord_regression,
    hungarian_match,
    kmeans,
    loss,
    loss_grad,
    matched_miou,
    optimize,
    orthogonalize,
    principal_angles,
    qk_affinity,
    resample_bilinear,
    run_cli,
    segment,
    solve_ncut,
    spatial_labels,
    sym_randomwalk_topc,
)

__all__ = [
    "ComputeError",
    "InputError",
    "adjusted_rand_index",
    "coord_regression",
    "hungarian_match",
    "kmeans",
    "loss",
    "loss_grad",
    "matched_miou",
    "optimize",
    "orthogonalize",
    "principal_angles",
    "qk_affinity",
    "resample_bilinear",
    "run_cli",
    "segment",
    "solve_ncut",
    "spatial_labels",
    "sym_randomwalk_topc",
]
