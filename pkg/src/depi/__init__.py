"""depi: probabilistic epipolar consistency for dense UV keypoint fields.

Differentiable matchability-weighted epipolar losses over calibrated view
pairs, analytic gradients, a small field-refinement optimizer, dense
triangulation and the matching metric suite, validated end to end on
synthetic scenes.
"""

from .consistency import (
    AffinitySet,
    MatchabilityConfig,
    build_affinities,
    expected_error_map,
    matchability,
    matchability_matrix,
    multiview_loss,
    nearest_neighbor_epipolar_loss,
    omega_points,
    photometric_loss,
    refresh_matchability,
)
from .exceptions import (
    DepiError,
    DivergenceError,
    MaskMismatchError,
    NumericalError,
    TriangulationError,
    UndefinedMetricError,
    ValidationError,
)
from .field import (
    DenseField,
    UvTransform,
    apply_uv_transform,
    load_field,
    perturb_field,
    save_field,
)
from .geometry import (
    CalibratedPair,
    Camera,
    epipolar_distance,
    epipolar_distance_matrices,
    fundamental_from_cameras,
    triangulate,
)
from .losses import (
    FieldGradient,
    LossReport,
    LossWeights,
    distillation_loss,
    finite_difference_check,
    grad_multiview,
    grad_photometric,
    grad_total,
    supervised_loss,
)
from .metrics import (
    MetricReport,
    eval_epipolar,
    evaluate,
    gps,
    mpvpe,
    mrci,
    reconstruct,
    vertex_similarity,
)
from .refine import (
    FieldRefiner,
    PairObservations,
    RefineConfig,
    RefineTrace,
    observations_from_scene,
    refine_pair,
    refine_viewset,
)
from .rng import named_stream
from .scene import (
    Pose,
    RenderedView,
    SurfacePatch,
    SyntheticScene,
    camera_ring,
    default_scene,
    render,
    visibility,
)

__version__ = "0.1.0"

__all__ = [
    "AffinitySet",
    "CalibratedPair",
    "Camera",
    "DenseField",
    "DepiError",
    "DivergenceError",
    "FieldGradient",
    "FieldRefiner",
    "LossReport",
    "LossWeights",
    "MaskMismatchError",
    "MatchabilityConfig",
    "MetricReport",
    "NumericalError",
    "PairObservations",
    "Pose",
    "RefineConfig",
    "RefineTrace",
    "RenderedView",
    "SurfacePatch",
    "SyntheticScene",
    "TriangulationError",
    "UndefinedMetricError",
    "UvTransform",
    "ValidationError",
    "apply_uv_transform",
    "build_affinities",
    "camera_ring",
    "default_scene",
    "distillation_loss",
    "epipolar_distance",
    "epipolar_distance_matrices",
    "eval_epipolar",
    "evaluate",
    "expected_error_map",
    "finite_difference_check",
    "fundamental_from_cameras",
    "gps",
    "grad_multiview",
    "grad_photometric",
    "grad_total",
    "load_field",
    "matchability",
    "matchability_matrix",
    "mpvpe",
    "mrci",
    "multiview_loss",
    "named_stream",
    "nearest_neighbor_epipolar_loss",
    "observations_from_scene",
    "omega_points",
    "perturb_field",
    "photometric_loss",
    "reconstruct",
    "refine_pair",
    "refine_viewset",
    "refresh_matchability",
    "render",
    "save_field",
    "supervised_loss",
    "triangulate",
    "vertex_similarity",
    "visibility",
]
