"""Splatting math: ellipsoid projection, per-pixel compositing, ray colors.

Projection uses the local affine (Jacobian) approximation of the pinhole map
at each ellipsoid center, the standard splatting-renderer construction. The
camera convention is OpenCV-style: x right, y down, z forward, pixels sampled
at (col + 0.5, row + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError
from .model import GaussianCloud, covariances, inverse_covariances, covariance, Ellipsoid

# Splats farther than this many standard deviations from a pixel/ray are
# culled; keeps per-pixel error below 1/255.
CULL_SIGMA = 3.0
# Stop compositing once remaining transmittance drops below this.
MIN_TRANSMITTANCE = 1e-4
# Centers closer to the image plane than this are treated as behind-camera.
MIN_DEPTH = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True)
class Pose:
    """Camera extrinsics: world-to-camera rotation and camera center."""

    rotation: np.ndarray  # (3, 3) orthonormal, det +1
    center: np.ndarray    # (3,) camera position in world units

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-5):
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation has negative determinant")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(
            self, "center", np.asarray(self.center, dtype=np.float64).reshape(3)
        )

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.center) @ self.rotation.T

    def camera_to_world_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.T
        m[:3, 3] = self.center
        return m

    @classmethod
    def from_camera_to_world(cls, c2w: np.ndarray) -> "Pose":
        c2w = np.asarray(c2w, dtype=np.float64)
        return cls(rotation=c2w[:3, :3].T, center=c2w[:3, 3])


@dataclass(frozen=True)
class Ellipse:
    """A splatted ellipsoid on the image plane."""

    center: np.ndarray      # (2,) pixels
    cov: np.ndarray         # (2, 2) SPD
    depth: float            # camera-frame z
    color: np.ndarray       # (3,)
    opacity: float


def project_ellipsoid(e: Ellipsoid, pose: Pose, k: CameraIntrinsics):
    """Project one ellipsoid to an image-plane Ellipse.

    Returns None when the center is not strictly in front of the camera
    (the culled marker; callers skip it).
    """
    t = pose.rotation @ (e.center - pose.center)
    z = t[2]
    if z <= MIN_DEPTH:
        return None
    y = np.array([k.fx * t[0] / z + k.cx, k.fy * t[1] / z + k.cy])
    jac = np.array(
        [
            [k.fx / z, 0.0, -k.fx * t[0] / (z * z)],
            [0.0, k.fy / z, -k.fy * t[1] / (z * z)],
        ]
    )
    m = jac @ pose.rotation
    cov = m @ covariance(e) @ m.T
    return Ellipse(center=y, cov=cov, depth=float(z), color=e.color, opacity=float(e.opacity))


def project_cloud(cloud: GaussianCloud, pose: Pose, k: CameraIntrinsics):
    """Vectorized projection of all ellipsoids.

    Returns (visible_mask, centers2d, covs2d, depths); entries for culled
    ellipsoids are unspecified where the mask is False.
    """
    t = cloud.centers @ pose.rotation.T - pose.rotation @ pose.center
    z = t[:, 2]
    vis = z > MIN_DEPTH
    zs = np.where(vis, z, 1.0)
    y = np.stack(
        [k.fx * t[:, 0] / zs + k.cx, k.fy * t[:, 1] / zs + k.cy], axis=1
    )
    n = len(cloud)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = k.fx / zs
    jac[:, 0, 2] = -k.fx * t[:, 0] / (zs * zs)
    jac[:, 1, 1] = k.fy / zs
    jac[:, 1, 2] = -k.fy * t[:, 1] / (zs * zs)
    m = jac @ pose.rotation
    covs = np.einsum("kij,kjl,kml->kim", m, covariances(cloud), m)
    return vis, y, covs, z


def tau(ellipse: Ellipse, p: np.ndarray) -> float:
    """Quadratic-form light absorption 0.5 * d^T E^-1 d with d = p - center.

    The Gaussian falloff needs the inverse covariance; evaluating with E
    directly would make large splats decay faster than small ones.
    """
    e = ellipse.cov
    det = e[0, 0] * e[1, 1] - e[0, 1] * e[1, 0]
    tr = e[0, 0] + e[1, 1]
    # 2x2 condition number from the eigenvalue pair.
    disc = max(tr * tr / 4.0 - det, 0.0)
    lam_max = tr / 2.0 + np.sqrt(disc)
    lam_min = tr / 2.0 - np.sqrt(disc)
    if lam_min <= 0 or lam_max / lam_min > 1e12:
        raise DegenerateGeometryError(
            "projected ellipse is numerically singular",
            condition=np.inf if lam_min <= 0 else lam_max / lam_min,
        )
    d = np.asarray(p, dtype=np.float64) - ellipse.center
    inv = np.array([[e[1, 1], -e[0, 1]], [-e[1, 0], e[0, 0]]]) / det
    return float(0.5 * d @ inv @ d)


def render_pixel(splats, p) -> np.ndarray:
    """Composite depth-sorted splats at one pixel (front-to-back alpha).

    phi = sum_i rho_i * alpha_i * exp(-tau_i) * prod_{j<i}(1 - alpha_j e^-tau_j),
    with early exit once transmittance falls below MIN_TRANSMITTANCE.
    """
    depths = [s.depth for s in splats]
    assert all(depths[i] <= depths[i + 1] for i in range(len(depths) - 1)), (
        "splats must be sorted ascending by depth"
    )
    out = np.zeros(3)
    transmittance = 1.0
    for s in splats:
        if transmittance < MIN_TRANSMITTANCE:
            break
        w = s.opacity * np.exp(-tau(s, p))
        out += s.color * (w * transmittance)
        transmittance *= 1.0 - w
    return np.clip(out, 0.0, 1.0)


def _splat_extents(covs: np.ndarray) -> np.ndarray:
    """Per-splat cull radius: CULL_SIGMA times the largest std dev (pixels)."""
    tr = covs[:, 0, 0] + covs[:, 1, 1]
    det = covs[:, 0, 0] * covs[:, 1, 1] - covs[:, 0, 1] * covs[:, 1, 0]
    disc = np.maximum(tr * tr / 4.0 - det, 0.0)
    lam_max = tr / 2.0 + np.sqrt(disc)
    return CULL_SIGMA * np.sqrt(np.maximum(lam_max, 0.0))


def render_image(
    cloud: GaussianCloud, pose: Pose, k: CameraIntrinsics, naive: bool = False
) -> np.ndarray:
    """Render the cloud to an (H, W, 3) float image in [0, 1].

    The default path walks splats front-to-back over their 3-sigma pixel
    footprints with a shared transmittance buffer. ``naive=True`` instead
    evaluates every pixel independently through `render_pixel`; it is the
    slow reference the golden images are generated from.
    """
    h, w = k.height, k.width
    vis, centers2d, covs2d, depths = project_cloud(cloud, pose, k)
    idx = np.flatnonzero(vis)
    if idx.size == 0:
        return np.zeros((h, w, 3))
    order = idx[np.argsort(depths[idx], kind="stable")]
    centers2d = centers2d[order]
    covs2d = covs2d[order]
    depths = depths[order]
    colors = cloud.colors[order]
    alphas = cloud.opacities[order]
    radii = _splat_extents(covs2d)

    x0 = np.clip(np.floor(centers2d[:, 0] - radii).astype(int), 0, w)
    x1 = np.clip(np.ceil(centers2d[:, 0] + radii).astype(int) + 1, 0, w)
    y0 = np.clip(np.floor(centers2d[:, 1] - radii).astype(int), 0, h)
    y1 = np.clip(np.ceil(centers2d[:, 1] + radii).astype(int) + 1, 0, h)

    if naive:
        return _render_image_naive(
            centers2d, covs2d, depths, colors, alphas, (x0, x1, y0, y1), h, w
        )

    px = np.arange(w) + 0.5
    py = np.arange(h) + 0.5
    out = np.zeros((h, w, 3))
    transmittance = np.ones((h, w))
    dets = covs2d[:, 0, 0] * covs2d[:, 1, 1] - covs2d[:, 0, 1] * covs2d[:, 1, 0]
    for i in range(len(order)):
        if x0[i] >= x1[i] or y0[i] >= y1[i] or dets[i] <= 0:
            continue
        dx = px[x0[i]:x1[i]] - centers2d[i, 0]
        dy = py[y0[i]:y1[i]] - centers2d[i, 1]
        a, b, c = covs2d[i, 0, 0], covs2d[i, 0, 1], covs2d[i, 1, 1]
        # 0.5 * d^T E^-1 d expanded with the adjugate of the 2x2 covariance.
        q = (
            c * dx[None, :] ** 2
            - 2.0 * b * dy[:, None] * dx[None, :]
            + a * dy[:, None] ** 2
        ) / (2.0 * dets[i])
        weight = alphas[i] * np.exp(-q)
        t_block = transmittance[y0[i]:y1[i], x0[i]:x1[i]]
        live = t_block >= MIN_TRANSMITTANCE
        contrib = np.where(live, weight * t_block, 0.0)
        out[y0[i]:y1[i], x0[i]:x1[i]] += contrib[:, :, None] * colors[i]
        t_block *= np.where(live, 1.0 - weight, 1.0)
    return np.clip(out, 0.0, 1.0)


def _render_image_naive(centers2d, covs2d, depths, colors, alphas, boxes, h, w):
    x0, x1, y0, y1 = boxes
    out = np.zeros((h, w, 3))
    for row in range(h):
        for col in range(w):
            p = (col + 0.5, row + 0.5)
            cover = np.flatnonzero(
                (x0 <= col) & (col < x1) & (y0 <= row) & (row < y1)
            )
            if cover.size == 0:
                continue
            splats = [
                Ellipse(
                    center=centers2d[i],
                    cov=covs2d[i],
                    depth=float(depths[i]),
                    color=colors[i],
                    opacity=float(alphas[i]),
                )
                for i in cover  # already depth-sorted
            ]
            out[row, col] = render_pixel(splats, p)
    return out


def ray_colors(
    cloud: GaussianCloud,
    origins: np.ndarray,
    directions: np.ndarray,
    chunk: int = 256,
) -> np.ndarray:
    """Synthesize one RGB color per ray by compositing along each ray.

    Every ellipsoid whose 3-sigma Mahalanobis tube the ray enters contributes
    alpha * exp(-m^2 / 2) at the parameter of its closest-approach point, and
    contributions are alpha-composited front to back. Rays are one-sided: the
    closest-approach parameter is clamped at the ray origin.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    n = origins.shape[0]
    inv = inverse_covariances(cloud)                       # (K, 3, 3)
    x = cloud.centers                                      # (K, 3)
    inv_x = np.einsum("kij,kj->ki", inv, x)                # (K, 3)
    x_inv_x = np.einsum("ki,ki->k", x, inv_x)              # (K,)
    inv9 = inv.reshape(-1, 9)                              # (K, 9)

    out = np.zeros((n, 3))
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        o = origins[lo:hi]
        d = directions[lo:hi]
        # Quadratic forms expanded into matmuls against the flattened
        # inverse covariances: A = d^T S d, B = d^T S (x - o), C = |x - o|_S^2.
        dd = np.einsum("ni,nj->nij", d, d).reshape(-1, 9)
        do = np.einsum("ni,nj->nij", d, o).reshape(-1, 9)
        oo = np.einsum("ni,nj->nij", o, o).reshape(-1, 9)
        a = dd @ inv9.T
        b = d @ inv_x.T - do @ inv9.T
        c = x_inv_x[None, :] - 2.0 * (o @ inv_x.T) + oo @ inv9.T
        t_star = np.clip(b / np.maximum(a, 1e-300), 0.0, None)
        m2 = c - 2.0 * t_star * b + t_star * t_star * a
        hit = m2 < (CULL_SIGMA * CULL_SIGMA)
        if not hit.any():
            continue
        ray_idx, ell_idx = np.nonzero(hit)
        order = np.lexsort((ell_idx, t_star[ray_idx, ell_idx], ray_idx))
        ray_idx = ray_idx[order]
        ell_idx = ell_idx[order]
        weight = cloud.opacities[ell_idx] * np.exp(
            -0.5 * m2[ray_idx, ell_idx]
        )
        # Segmented front-to-back compositing: transmittance before each hit
        # is the cumulative product of (1 - w) over earlier hits of the ray.
        log1m = np.log1p(-np.minimum(weight, 1.0 - 1e-15))
        csum = np.cumsum(log1m)
        starts = np.flatnonzero(np.diff(ray_idx, prepend=-1))
        seg_base = np.repeat(csum[starts] - log1m[starts], np.diff(
            np.append(starts, ray_idx.size)
        ))
        transmittance = np.exp(csum - log1m - seg_base)
        contrib = (weight * transmittance)[:, None] * cloud.colors[ell_idx]
        np.add.at(out, (ray_idx + lo,), contrib)
    return np.clip(out, 0.0, 1.0)


def ray_color(cloud: GaussianCloud, origin, direction) -> np.ndarray:
    """Single-ray convenience wrapper around `ray_colors`."""
    d = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(d)
    if not np.isclose(norm, 1.0, atol=1e-6):
        raise ValueError("ray direction must be unit-norm")
    return ray_colors(cloud, np.asarray(origin)[None], d[None])[0]
