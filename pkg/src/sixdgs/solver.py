"""Pose recovery from scored rays: selection, intersection, rotation, errors.

The camera center minimizes the score-weighted sum of squared perpendicular
distances to the selected rays (a 3x3 linear solve); rotation comes from a
weighted orthogonal Procrustes alignment between world bearings (center to
ray origins) and camera bearings (attention-matched pixels through K^-1).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError, InsufficientBundleError
from .render import CameraIntrinsics, Pose

DEFAULT_TOP_RAYS = 100
# Smallest acceptable eigenvalue of the (weight-normalized) normal matrix.
DEGENERACY_EIGENVALUE = 1e-9


@dataclass
class SelectedBundle:
    """Top-scoring rays, at most one per source ellipsoid."""

    origins: np.ndarray         # (F, 3)
    directions: np.ndarray      # (F, 3)
    weights: np.ndarray         # (F,) selection scores, > 0
    sources: np.ndarray         # (F,)
    matched_pixels: np.ndarray  # (F, 2) image coords of the argmax cell

    def __len__(self) -> int:
        return self.origins.shape[0]


@dataclass
class PoseEstimate:
    pose: Pose
    residual: float   # RMS perpendicular distance of selected rays
    inliers: int

    def to_json_dict(self) -> dict:
        return {
            "rotation": [float(x) for x in self.pose.rotation.ravel()],
            "center": [float(x) for x in self.pose.center],
            "residual": float(self.residual),
        }


@dataclass(frozen=True)
class PoseError:
    mae: float  # geodesic rotation error, degrees
    mte: float  # center distance, scene units


def top_ray_indices(sources: np.ndarray, scores: np.ndarray, n_top: int) -> np.ndarray:
    """Indices of the greedy top-score selection, one ray per ellipsoid.

    Ties break toward the lower ray index, making the result independent of
    input ordering for distinct scores.
    """
    if n_top < 2:
        raise ValueError("n_top must be at least 2")
    if len(sources) == 0:
        raise InsufficientBundleError("no rays to select from")
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    seen = set()
    picked = []
    for i in order:
        src = int(sources[i])
        if src in seen or scores[i] <= 0.0:
            continue
        seen.add(src)
        picked.append(i)
        if len(picked) == n_top:
            break
    if len(picked) < 2:
        raise InsufficientBundleError(
            f"only {len(picked)} distinct source ellipsoids scored; need >= 2"
        )
    return np.array(picked)


def select_top_rays(
    rays, scores: np.ndarray, matched_pixels: np.ndarray, n_top: int = DEFAULT_TOP_RAYS
) -> SelectedBundle:
    """Greedy top-score selection constrained to one ray per ellipsoid."""
    idx = top_ray_indices(rays.sources, scores, n_top)
    scores = np.asarray(scores, dtype=np.float64)
    return SelectedBundle(
        origins=rays.origins[idx],
        directions=rays.directions[idx],
        weights=scores[idx],
        sources=rays.sources[idx],
        matched_pixels=np.asarray(matched_pixels)[idx],
    )


def intersect_rays_wls(bundle: SelectedBundle):
    """Weighted least-squares intersection point of the bundle.

    Solves A c = b with A = sum_f w_f (I - d d^T), b = A-weighted origins;
    weights are normalized to sum 1 so the degeneracy threshold and the
    residual are scale-free. Returns (center, rms_perpendicular_distance).
    """
    d = bundle.directions
    w = bundle.weights / bundle.weights.sum()
    proj = np.eye(3)[None, :, :] - d[:, :, None] * d[:, None, :]
    wproj = w[:, None, None] * proj
    a = wproj.sum(axis=0)
    b = np.einsum("fij,fj->i", wproj, bundle.origins)
    eigvals = np.linalg.eigvalsh(a)
    if eigvals[0] <= DEGENERACY_EIGENVALUE:
        raise DegenerateGeometryError(
            "ray bundle is near-parallel; camera center is unobservable",
            condition=float(eigvals[-1] / max(eigvals[0], 1e-300)),
        )
    center = np.linalg.solve(a, b)
    rel = center[None, :] - bundle.origins
    perp = rel - np.einsum("fi,fi->f", rel, d)[:, None] * d
    residual = float(np.sqrt((w * np.einsum("fi,fi->f", perp, perp)).sum()))
    return center, residual


def perpendicular_distances(bundle: SelectedBundle, center: np.ndarray) -> np.ndarray:
    rel = np.asarray(center)[None, :] - bundle.origins
    along = np.einsum("fi,fi->f", rel, bundle.directions)
    perp = rel - along[:, None] * bundle.directions
    return np.linalg.norm(perp, axis=1)


def estimate_rotation(
    center: np.ndarray, bundle: SelectedBundle, k: CameraIntrinsics
) -> np.ndarray:
    """World-to-camera rotation via weighted orthogonal Procrustes.

    World bearings point from the solved center to the ray origins; camera
    bearings come from the matched pixels through the inverse intrinsics.
    SVD with determinant correction keeps the result a proper rotation.
    """
    if len(bundle) < 3:
        raise DegenerateGeometryError("need at least 3 rays to recover rotation")
    world = bundle.origins - np.asarray(center)[None, :]
    norms = np.linalg.norm(world, axis=1)
    if np.any(norms < 1e-12):
        raise DegenerateGeometryError("a ray origin coincides with the center")
    world /= norms[:, None]
    px = bundle.matched_pixels
    cam = np.stack(
        [
            (px[:, 0] - k.cx) / k.fx,
            (px[:, 1] - k.cy) / k.fy,
            np.ones(len(bundle)),
        ],
        axis=1,
    )
    cam /= np.linalg.norm(cam, axis=1)[:, None]
    w = bundle.weights / bundle.weights.sum()
    h = (world * w[:, None]).T @ cam
    u, s, vt = np.linalg.svd(h)
    if s[1] <= 1e-9 * max(s[0], 1e-300):
        raise DegenerateGeometryError(
            "bearing set is rank-deficient; rotation is unobservable",
            condition=float(s[0] / max(s[1], 1e-300)),
        )
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return rot


def estimate_pose(
    cloud,
    rays,
    scores: np.ndarray,
    matched_pixels: np.ndarray,
    k: CameraIntrinsics,
    n_top: int = DEFAULT_TOP_RAYS,
    inlier_tol: float = 0.05,
) -> PoseEstimate:
    """Full solve: select rays, intersect for the center, recover rotation."""
    bundle = select_top_rays(rays, scores, matched_pixels, n_top)
    center, residual = intersect_rays_wls(bundle)
    rotation = estimate_rotation(center, bundle, k)
    inliers = int((perpendicular_distances(bundle, center) <= inlier_tol).sum())
    return PoseEstimate(
        pose=Pose(rotation=rotation, center=center),
        residual=residual,
        inliers=inliers,
    )


def pose_error(est: Pose, gt: Pose) -> PoseError:
    """Geodesic rotation error (degrees) and center distance (scene units)."""
    rel = est.rotation @ gt.rotation.T
    cos = (np.trace(rel) - 1.0) / 2.0
    mae = float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))
    mte = float(np.linalg.norm(est.center - gt.center))
    return PoseError(mae=mae, mte=mte)


def pose_estimate_to_json(est: PoseEstimate, error: PoseError | None = None) -> str:
    doc = est.to_json_dict()
    if error is not None:
        doc["mae"] = error.mae
        doc["mte"] = error.mte
    return json.dumps(doc, indent=2) + "\n"


def pose_from_json(text: str) -> PoseEstimate:
    doc = json.loads(text)
    pose = Pose(
        rotation=np.array(doc["rotation"], dtype=np.float64).reshape(3, 3),
        center=np.array(doc["center"], dtype=np.float64),
    )
    return PoseEstimate(
        pose=pose, residual=float(doc["residual"]), inliers=int(doc.get("inliers", 0))
    )
