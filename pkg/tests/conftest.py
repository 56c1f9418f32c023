import numpy as np
import pytest

from sixdgs.model import Ellipsoid, GaussianCloud


def random_cloud(k, rng, spread=0.5, scale_mean=0.03):
    centers = rng.uniform(-spread, spread, size=(k, 3))
    quats = rng.normal(size=(k, 4))
    quats /= np.linalg.norm(quats, axis=1)[:, None]
    scales = np.exp(rng.normal(np.log(scale_mean), 0.3, size=(k, 3)))
    return GaussianCloud(
        centers=centers,
        rotations=quats,
        scales=scales,
        opacities=rng.uniform(0.3, 0.95, size=k),
        colors=rng.uniform(0.05, 0.95, size=(k, 3)),
    )


def sphere_ellipsoid(radius=1.0, center=(0.0, 0.0, 0.0), opacity=1.0, color=(1.0, 1.0, 1.0)):
    return Ellipsoid(
        center=np.array(center, dtype=float),
        rotation=np.array([1.0, 0.0, 0.0, 0.0]),
        scale=np.array([radius, radius, radius], dtype=float),
        opacity=opacity,
        color=np.array(color, dtype=float),
    )


def uniform_ellipsoid_surface(a, b, c, n, rng):
    """Uniform-by-area samples on an ellipsoid surface (rejection sampling)."""
    axes = np.array([a, b, c], dtype=float)
    w_max = float(np.max(1.0 / axes))
    out = []
    have = 0
    while have < n:
        u = rng.normal(size=(n, 3))
        u /= np.linalg.norm(u, axis=1)[:, None]
        w = np.sqrt(np.sum((u / axes) ** 2, axis=1))
        keep = rng.random(n) < w / w_max
        pts = (u * axes)[keep]
        out.append(pts)
        have += len(pts)
    return np.concatenate(out)[:n]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
