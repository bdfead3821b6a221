"""Implicit neural fields with trainable B-spline positional encodings.

Fits signed distance fields to oriented point clouds with an Eikonal-
regularized loss, supports multiscale spline refinement, Fourier and
identity encoders for comparison, image and SDF regression, auto-decoder
shape spaces, marching-cubes extraction, and Chamfer/MAE/PSNR metrics.
All differentiation is hand-rolled over numpy arrays in double precision.
"""

from .encoding import (
    FourierEncoding,
    IdentityEncoding,
    SplineEncoding,
    bspline_basis,
    fourier_encode,
)
from .geometry import (
    AnalyticShape,
    PointCloud,
    ScalarGrid,
    TriangleMesh,
    chamfer,
    evaluate_grid,
    grid_from_function,
    mae,
    marching_cubes,
    psnr,
    sample_mesh_surface,
)
from .network import Checkpoint, FieldModel, Mlp
from .training import (
    AdamState,
    ShapeSpace,
    TrainConfig,
    TrainingDiverged,
    fit_new_shape,
    sdf_loss,
    train_sdf,
    train_shape_space,
)

__version__ = "0.1.0"

__all__ = [
    "SplineEncoding",
    "FourierEncoding",
    "IdentityEncoding",
    "bspline_basis",
    "fourier_encode",
    "Mlp",
    "FieldModel",
    "Checkpoint",
    "TrainConfig",
    "AdamState",
    "TrainingDiverged",
    "sdf_loss",
    "train_sdf",
    "ShapeSpace",
    "train_shape_space",
    "fit_new_shape",
    "PointCloud",
    "TriangleMesh",
    "ScalarGrid",
    "AnalyticShape",
    "chamfer",
    "mae",
    "psnr",
    "evaluate_grid",
    "grid_from_function",
    "marching_cubes",
    "sample_mesh_surface",
    "__version__",
]
