"""Differentiable head reconstruction: parametric mesh + surface splats.

Layout:
    model      morphable-model assets and parameter containers
    morph      mesh decoding, landmarks, and their VJPs
    triplane   axis-aligned feature planes + attribute/gate MLP heads
    gsurf      surface samples, splat construction, quaternion utilities
    splat      tiled 2D-Gaussian surface-splat renderer (forward + VJP)
    meshrast   barycentric mesh rasterizer for depth/normal maps
    losses     photometric, binding, landmark, and regularization terms
    fit        staged per-subject optimization + toy gated regressor
    dataset    synthetic multi-view subjects and the on-disk layout
    evaluation chamfer, similarity alignment, parameter variance
    gradsuite  finite-difference audit of every registered gradient
    images     PNG/resize helpers and map encodings
    tensorio   little-endian float32 tensor container
    cli        command line front end

The public surface re-exported here is what the demos and the command line
are built on; each symbol lives in exactly one module.
"""

from .dataset import load_subject, random_params, synth_dataset, synth_subject
from .evaluation import (
    ChamferStats,
    chamfer,
    chamfer_distances,
    crop_to_face,
    now_protocol,
    param_variance,
    per_vertex_variance,
    point_mesh_distances,
    umeyama,
    variance_report,
)
from .fit import (
    FitConfig,
    FitResult,
    fit_subject,
    load_fit_result,
    rebuild_splats,
    save_fit_result,
    train_toy_regressor,
)
from .gradsuite import run_block, run_suite
from .gsurf import Splats, build_splats, sample_points
from .losses import LossWeights, Supervision, total_loss
from .meshrast import raster_mesh
from .model import FlameParams, ModelAssets, load_assets, save_assets, synth_model
from .morph import decode_mesh, landmarks
from .splat import Camera, camera_from_alpha, fov_degrees, look_at, render
from .triplane import Triplane, init_triplane

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "ChamferStats",
    "FitConfig",
    "FitResult",
    "FlameParams",
    "LossWeights",
    "ModelAssets",
    "Splats",
    "Supervision",
    "Triplane",
    "build_splats",
    "camera_from_alpha",
    "chamfer",
    "chamfer_distances",
    "crop_to_face",
    "decode_mesh",
    "fit_subject",
    "fov_degrees",
    "init_triplane",
    "landmarks",
    "load_assets",
    "load_fit_result",
    "load_subject",
    "look_at",
    "now_protocol",
    "param_variance",
    "per_vertex_variance",
    "point_mesh_distances",
    "random_params",
    "raster_mesh",
    "rebuild_splats",
    "render",
    "run_block",
    "run_suite",
    "sample_points",
    "save_assets",
    "save_fit_result",
    "synth_dataset",
    "synth_model",
    "synth_subject",
    "total_loss",
    "train_toy_regressor",
    "umeyama",
    "variance_report",
]
