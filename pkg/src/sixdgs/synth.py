"""Seeded synthetic scenes: ellipsoid clouds, cameras, renders, features.

The generator writes everything the rest of the pipeline consumes: a model
PLY, camera transforms (train/test splits), rendered PNGs, and matching
RGB-as-feature files, so the full stack runs without any external data or
the feature-extractor sidecar.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import ConfigError
from .model import GaussianCloud, normalize_scene, write_ply
from .render import CameraIntrinsics, Pose, render_image
from .scoring import FeatureMap, save_features


@dataclass
class SynthConfig:
    k: int = 500
    layout: str = "sphere-shell"    # or "box-cluster"
    train_views: int = 12
    test_views: int = 4
    width: int = 64
    height: int = 64
    camera_radius: float = 1.6
    camera_layout: str = "band"     # or "ring"
    coloring: str = "position"      # or "azimuth"
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.train_views < 1 or self.test_views < 0:
            raise ConfigError("synth config counts must be positive")
        if self.layout not in ("sphere-shell", "box-cluster"):
            raise ConfigError(f"unknown layout '{self.layout}'")
        if self.camera_layout not in ("band", "ring"):
            raise ConfigError(f"unknown camera layout '{self.camera_layout}'")
        if self.coloring not in ("position", "azimuth"):
            raise ConfigError(f"unknown coloring '{self.coloring}'")


def _hsv_to_rgb(h, s, v):
    """Vectorized HSV -> RGB, hue in turns."""
    h = np.mod(h, 1.0) * 6.0
    i = np.floor(h).astype(int)
    f = h - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    table = np.stack(
        [
            np.stack([v, t, p], axis=-1),
            np.stack([q, v, p], axis=-1),
            np.stack([p, v, t], axis=-1),
            np.stack([p, q, v], axis=-1),
            np.stack([t, p, v], axis=-1),
            np.stack([v, p, q], axis=-1),
        ],
        axis=0,
    )
    return table[i % 6, np.arange(h.shape[0])]


def make_cloud(k: int, layout: str, seed: int, coloring: str = "position") -> GaussianCloud:
    """Random cloud with position-correlated colors, normalized to unit box.

    ``coloring="position"`` maps the box coordinates linearly to RGB;
    ``"azimuth"`` walks the hue wheel around the z axis (every azimuth gets a
    distinct hue, height modulates brightness), which makes the visible
    palette a sharp function of the viewing direction.
    """
    rng = np.random.default_rng(seed)
    if layout == "sphere-shell":
        dirs = rng.normal(size=(k, 3))
        dirs /= np.linalg.norm(dirs, axis=1)[:, None]
        radii = 0.5 * (1.0 + rng.normal(scale=0.02, size=k))
        centers = dirs * radii[:, None]
    else:
        blobs = rng.uniform(-0.35, 0.35, size=(max(3, k // 60), 3))
        assign = rng.integers(len(blobs), size=k)
        centers = blobs[assign] + rng.normal(scale=0.08, size=(k, 3))
    span = centers.max(axis=0) - centers.min(axis=0)
    unit = (centers - centers.min(axis=0)) / np.maximum(span, 1e-9)
    if coloring == "azimuth":
        hue = np.arctan2(centers[:, 1], centers[:, 0]) / (2.0 * np.pi)
        value = 0.45 + 0.5 * unit[:, 2]
        colors = _hsv_to_rgb(hue, np.full(k, 0.85), value)
        colors = np.clip(colors + rng.normal(scale=0.02, size=(k, 3)), 0.02, 0.98)
    else:
        colors = np.clip(
            0.15 + 0.7 * unit + rng.normal(scale=0.03, size=(k, 3)), 0.02, 0.98
        )
    scales = np.exp(rng.normal(loc=np.log(0.035), scale=0.25, size=(k, 3)))
    scales = np.clip(scales, 0.008, 0.09)
    quats = rng.normal(size=(k, 4))
    quats /= np.linalg.norm(quats, axis=1)[:, None]
    opacities = rng.uniform(0.75, 0.95, size=k)
    cloud = GaussianCloud(
        centers=centers,
        rotations=quats,
        scales=scales,
        opacities=opacities,
        colors=colors,
    )
    return normalize_scene(cloud)


def fibonacci_directions(n: int, polar_lo: float, polar_hi: float) -> np.ndarray:
    """Near-even directions in a polar-angle band of the unit sphere."""
    i = np.arange(n) + 0.5
    cos_lo, cos_hi = np.cos(polar_lo), np.cos(polar_hi)
    cos_theta = cos_lo + (cos_hi - cos_lo) * i / n
    theta = np.arccos(np.clip(cos_theta, -1.0, 1.0))
    golden = np.pi * (3.0 - np.sqrt(5.0))
    phi = golden * np.arange(n)
    return np.stack(
        [
            np.sin(theta) * np.cos(phi),
            np.sin(theta) * np.sin(phi),
            np.cos(theta),
        ],
        axis=1,
    )


def look_at_pose(eye: np.ndarray, target=None) -> Pose:
    """OpenCV-convention pose: +z looks from eye toward the target."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.zeros(3) if target is None else np.asarray(target, dtype=np.float64)
    forward = target - eye
    forward /= np.linalg.norm(forward)
    up_hint = np.array([0.0, 0.0, 1.0])
    if abs(forward @ up_hint) > 0.999:
        up_hint = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up_hint)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    c2w = np.stack([right, down, forward], axis=1)
    return Pose(rotation=c2w.T, center=eye)


def make_cameras(
    n: int,
    radius: float,
    seed: int,
    polar_range=(0.35 * np.pi, 0.75 * np.pi),
    jitter: float = 0.03,
    layout: str = "band",
) -> list:
    """Cameras around the origin, all looking inward.

    ``band`` spreads views over a spherical band (Fibonacci); ``ring``
    spaces them evenly in azimuth at a fixed elevation, a turntable-style
    capture.
    """
    rng = np.random.default_rng(seed)
    if layout == "ring":
        azimuth = 2.0 * np.pi * (np.arange(n) + 0.5) / n
        azimuth += rng.normal(scale=jitter, size=n)
        polar = 0.5 * (polar_range[0] + polar_range[1])
        dirs = np.stack(
            [
                np.sin(polar) * np.cos(azimuth),
                np.sin(polar) * np.sin(azimuth),
                np.full(n, np.cos(polar)),
            ],
            axis=1,
        )
    else:
        dirs = fibonacci_directions(n, polar_range[0], polar_range[1])
        dirs = dirs + rng.normal(scale=jitter, size=dirs.shape)
        dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    return [look_at_pose(radius * d) for d in dirs]


def default_intrinsics(width: int, height: int, radius: float) -> CameraIntrinsics:
    # Focal length chosen so the unit box roughly fills the frame.
    f = 0.85 * width * radius
    return CameraIntrinsics(
        fx=f, fy=f, cx=width / 2.0, cy=height / 2.0, width=width, height=height
    )


def _transforms_dict(k: CameraIntrinsics, frames: list) -> dict:
    return {
        "fl_x": k.fx,
        "fl_y": k.fy,
        "cx": k.cx,
        "cy": k.cy,
        "w": k.width,
        "h": k.height,
        "camera_convention": "opencv",
        "frames": frames,
    }


def load_transforms(path):
    """Read a transforms JSON into (CameraIntrinsics, [(name, Pose, feature_path)])."""
    with open(path) as f:
        doc = json.load(f)
    k = CameraIntrinsics(
        fx=float(doc["fl_x"]),
        fy=float(doc["fl_y"]),
        cx=float(doc["cx"]),
        cy=float(doc["cy"]),
        width=int(doc["w"]),
        height=int(doc["h"]),
    )
    views = []
    for frame in doc["frames"]:
        c2w = np.array(frame["transform_matrix"], dtype=np.float64)
        views.append(
            (
                frame.get("file_path", ""),
                Pose.from_camera_to_world(c2w),
                frame.get("feature_path"),
            )
        )
    return k, views


def save_image_png(image: np.ndarray, path) -> None:
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr, mode="RGB").save(path)


def load_image_png(path) -> np.ndarray:
    return np.asarray(PILImage.open(path).convert("RGB"), dtype=np.float64) / 255.0


def generate_dataset(out_dir, cfg: SynthConfig) -> dict:
    """Write model + splits + renders + RGB feature files; returns a summary."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "features").mkdir(parents=True, exist_ok=True)

    cloud = make_cloud(cfg.k, cfg.layout, cfg.seed, coloring=cfg.coloring)
    write_ply(cloud, out / "model.ply")
    k = default_intrinsics(cfg.width, cfg.height, cfg.camera_radius)
    poses = make_cameras(
        cfg.train_views + cfg.test_views, cfg.camera_radius, cfg.seed + 1,
        layout=cfg.camera_layout,
    )
    # Interleave the split so held-out views sit between training ones.
    if cfg.camera_layout == "ring" and cfg.test_views > 0:
        stride = max(1, len(poses) // cfg.test_views)
        test_ids = set(list(range(stride // 2, len(poses), stride))[: cfg.test_views])
    else:
        order = np.argsort(np.random.default_rng(cfg.seed + 2).random(len(poses)))
        test_ids = set(order[: cfg.test_views].tolist())

    splits = {"train": [], "test": []}
    for i, pose in enumerate(poses):
        split = "test" if i in test_ids else "train"
        name = f"{split}_{i:03d}"
        image = render_image(cloud, pose, k)
        save_image_png(image, out / "images" / f"{name}.png")
        fmap = FeatureMap(
            data=image.astype(np.float32),
            image_width=cfg.width,
            image_height=cfg.height,
        )
        save_features(fmap, out / "features" / f"{name}.feat")
        splits[split].append(
            {
                "file_path": f"images/{name}.png",
                "feature_path": f"features/{name}.feat",
                "transform_matrix": pose.camera_to_world_matrix().tolist(),
            }
        )
    for split, frames in splits.items():
        with open(out / f"transforms_{split}.json", "w") as f:
            json.dump(_transforms_dict(k, frames), f, indent=2, sort_keys=True)
            f.write("\n")
    return {
        "model": str(out / "model.ply"),
        "train_views": len(splits["train"]),
        "test_views": len(splits["test"]),
        "k": len(cloud),
    }
