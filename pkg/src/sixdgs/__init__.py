"""6DoF camera pose estimation from a single image and a 3DGS model."""

__version__ = "0.1.0"

from .model import (
    Ellipsoid,
    GaussianCloud,
    covariance,
    load_ply,
    normalize_scene,
    write_ply,
)
from .render import (
    CameraIntrinsics,
    Ellipse,
    Pose,
    project_ellipsoid,
    ray_color,
    ray_colors,
    render_image,
    render_pixel,
    tau,
)
from .ellicell import (
    CellGrid,
    NormalField,
    Ray,
    RaySet,
    arc_positions,
    build_cells,
    cells_per_ring,
    ellipse_perimeter,
    estimate_normals,
    generate_rays,
    ribbon_scale,
    surface_area,
)
from .scoring import (
    FeatureMap,
    ScorerWeights,
    TrainConfig,
    attention_map,
    attention_scores,
    featurize_rays,
    gt_scores,
    load_features,
    oracle_scorer,
    positional_encoding,
    save_features,
    score_loss,
    train_scorer,
)
from .solver import (
    PoseError,
    PoseEstimate,
    SelectedBundle,
    estimate_pose,
    estimate_rotation,
    intersect_rays_wls,
    pose_error,
    select_top_rays,
)

__all__ = [name for name in dir() if not name.startswith("_")]
