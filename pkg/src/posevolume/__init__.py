"""Two-view 6D object pose estimation toolkit.

Builds a world-space feature volume from two calibrated views, localizes 3D
keypoints as probability fields over the volume, and solves the object pose
with a soft exhaustive-hypothesis solver. Ships a synthetic oracle standing
in for learned feature extractors so the full pipeline is testable without
training.
"""

from .errors import (
    ConfigParseError,
    CountMismatch,
    DegenerateConfiguration,
    DegenerateRays,
    EmptyMask,
    InvalidRange,
    IoError,
    KeypointOutsideGrid,
    NonFiniteInput,
    NonPositiveDepth,
    PoseVolumeError,
    SchemaMismatch,
    SpecMismatch,
    TooFewModelPoints,
    TooFewPoints,
    Unplaceable,
)
from .field import (
    ProbabilityVolume,
    TargetHeatmaps,
    extract_keypoint,
    keypoint_loss,
    kl_divergence,
    normalize_field,
    rasterize_heatmap,
)
from .geometry import (
    CameraIntrinsics,
    RigidTransform,
    ViewPair,
    project_point,
    project_points,
    transform_point,
    triangulate,
    unproject_pixel,
)
from .metrics import (
    ModelPoints,
    OcclusionBin,
    add_metric,
    adds_metric,
    occlusion_curve,
    success,
)
from .pipeline import (
    LevelResult,
    PipelineConfig,
    PipelineResult,
    initial_guess,
    run_coarse_to_fine,
    run_late_fusion,
    run_level,
)
from .solver import (
    Correspondences,
    HypothesisSet,
    SolverParams,
    aggregate_pose,
    enumerate_hypotheses,
    joint_loss,
    kabsch_align,
    pose_loss,
    score_hypotheses,
    solve,
)
from .synth import (
    SceneSample,
    SynthConfig,
    builtin_model,
    generate_scene,
    load_ply,
    load_scene,
    oracle_feature_pyramid,
    oracle_features,
    save_scene,
    select_keypoints,
)
from .volume import (
    FeatureMap,
    GeometricVolume,
    GridSpec,
    bilinear_sample,
    build_grid,
    lift_features,
    load_feature_map,
    load_volume,
    save_feature_map,
    save_volume,
    trilinear_sample,
    trilinear_weights,
)

__version__ = "0.1.0"
