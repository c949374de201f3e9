"""Reference neural operators: PDE surrogates that correct a transported
reference solution instead of predicting the field from scratch."""

from ._core import (
    DataError,
    DeformationField,
    Geometry,
    NumericError,
    Sample,
    TriMesh,
    UsageError,
    checkpoint_config,
    construct_phi,
    cutoff_eta,
    daca_linear,
    daca_quadratic,
    generate_pairs,
    geometric_distance,
    init_checkpoint,
    interpolate,
    load_dataset,
    predict,
    pushforward,
    rel_l2,
    rfm_features,
    solve_poisson,
    triangulate,
)

__all__ = [
    "DataError",
    "DeformationField",
    "Geometry",
    "NumericError",
    "Sample",
    "TriMesh",
    "UsageError",
    "checkpoint_config",
    "construct_phi",
    "cutoff_eta",
    "daca_linear",
    "daca_quadratic",
    "generate_pairs",
    "geometric_distance",
    "init_checkpoint",
    "interpolate",
    "load_dataset",
    "predict",
    "pushforward",
    "rel_l2",
    "rfm_features",
    "solve_poisson",
    "triangulate",
]
