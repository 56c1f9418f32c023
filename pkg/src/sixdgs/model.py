"""Gaussian splat model: primitive types, PLY round-trip, normalization.

A scene is a set of anisotropic 3D Gaussians treated as ellipsoids: center,
unit quaternion, per-axis scale, opacity and a DC color term. Files use the
standard 3DGS PLY dialect (binary little-endian, exp-coded scales, logit-coded
opacity, DC spherical-harmonic color).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError, EmptyModelError, FormatError

# Degree-0 spherical harmonic basis constant: color = SH_C0 * f_dc + 0.5.
SH_C0 = 0.28209479177387814

_REQUIRED_PROPS = (
    "x", "y", "z",
    "rot_0", "rot_1", "rot_2", "rot_3",
    "scale_0", "scale_1", "scale_2",
    "opacity",
    "f_dc_0", "f_dc_1", "f_dc_2",
)

_PLY_TYPES = {
    "float": "<f4", "float32": "<f4",
    "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1",
    "char": "i1", "int8": "i1",
    "short": "<i2", "int16": "<i2",
    "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4",
    "uint": "<u4", "uint32": "<u4",
}


@dataclass(frozen=True)
class Ellipsoid:
    """One splat primitive in decoded (linear) parameter space."""

    center: np.ndarray      # (3,)
    rotation: np.ndarray    # (4,) unit quaternion, wxyz
    scale: np.ndarray       # (3,) positive semi-axes
    opacity: float          # in [0, 1]
    color: np.ndarray       # (3,) RGB in [0, 1]


@dataclass
class GaussianCloud:
    """Column-wise storage of K ellipsoids plus the normalization transform.

    ``scene_scale``/``scene_offset`` map normalized coordinates back to the
    source frame: source = normalized * scene_scale + scene_offset.
    """

    centers: np.ndarray     # (K, 3)
    rotations: np.ndarray   # (K, 4) unit quaternions, wxyz
    scales: np.ndarray      # (K, 3)
    opacities: np.ndarray   # (K,)
    colors: np.ndarray      # (K, 3)
    scene_scale: float = 1.0
    scene_offset: np.ndarray = None

    def __post_init__(self):
        if self.scene_offset is None:
            self.scene_offset = np.zeros(3)

    def __len__(self) -> int:
        return self.centers.shape[0]

    def ellipsoid(self, i: int) -> Ellipsoid:
        return Ellipsoid(
            center=self.centers[i],
            rotation=self.rotations[i],
            scale=self.scales[i],
            opacity=float(self.opacities[i]),
            color=self.colors[i],
        )

    def __iter__(self):
        return (self.ellipsoid(i) for i in range(len(self)))


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) (..., 4) wxyz -> rotation matrix (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    out = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    out[..., 0, 0] = 1 - 2 * (yy + zz)
    out[..., 0, 1] = 2 * (xy - wz)
    out[..., 0, 2] = 2 * (xz + wy)
    out[..., 1, 0] = 2 * (xy + wz)
    out[..., 1, 1] = 1 - 2 * (xx + zz)
    out[..., 1, 2] = 2 * (yz - wx)
    out[..., 2, 0] = 2 * (xz - wy)
    out[..., 2, 1] = 2 * (yz + wx)
    out[..., 2, 2] = 1 - 2 * (xx + yy)
    return out


def covariance(e: Ellipsoid) -> np.ndarray:
    """3x3 covariance R * diag(scale^2) * R^T of a single ellipsoid."""
    r = quat_to_rotation(e.rotation)
    return (r * np.square(e.scale)) @ r.T


def covariances(cloud: GaussianCloud) -> np.ndarray:
    """(K, 3, 3) covariances for the whole cloud."""
    r = quat_to_rotation(cloud.rotations)
    return np.einsum("kij,kj,klj->kil", r, np.square(cloud.scales), r)


def inverse_covariances(cloud: GaussianCloud) -> np.ndarray:
    """(K, 3, 3) inverse covariances, exact via R * diag(scale^-2) * R^T."""
    r = quat_to_rotation(cloud.rotations)
    return np.einsum("kij,kj,klj->kil", r, np.square(cloud.scales) ** -1.0, r)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _parse_header(stream) -> tuple[int, list[tuple[str, str]]]:
    line = stream.readline()
    if line.strip() != b"ply":
        raise FormatError("not a PLY file (missing 'ply' magic)")
    count = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    while True:
        line = stream.readline()
        if not line:
            raise FormatError("unterminated PLY header")
        tokens = line.decode("ascii", errors="replace").split()
        if not tokens:
            continue
        if tokens[0] == "format":
            if tokens[1] != "binary_little_endian":
                raise FormatError(f"unsupported PLY format '{tokens[1]}'")
        elif tokens[0] == "element":
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                count = int(tokens[2])
        elif tokens[0] == "property" and in_vertex:
            if tokens[1] == "list":
                raise FormatError("list properties are not supported")
            if tokens[1] not in _PLY_TYPES:
                raise FormatError(f"unknown property type '{tokens[1]}'")
            props.append((tokens[2], _PLY_TYPES[tokens[1]]))
        elif tokens[0] == "end_header":
            break
    if count is None:
        raise FormatError("PLY header has no vertex element")
    return count, props


def load_ply(path) -> GaussianCloud:
    """Load a 3DGS PLY and decode it into linear parameter space.

    Scales are exp-decoded, opacity sigmoid-decoded, color recovered from the
    DC spherical-harmonic term and clamped to [0, 1]; quaternions normalized.
    Extra per-vertex properties (e.g. higher SH bands) are ignored.
    """
    with open(path, "rb") as f:
        count, props = _parse_header(f)
        names = [n for n, _ in props]
        for need in _REQUIRED_PROPS:
            if need not in names:
                raise FormatError(f"PLY is missing required property '{need}'")
        if count == 0:
            raise EmptyModelError("PLY contains zero vertices")
        dtype = np.dtype(props)
        raw = f.read(dtype.itemsize * count)
    if len(raw) != dtype.itemsize * count:
        raise FormatError(
            f"PLY body truncated: expected {dtype.itemsize * count} bytes, "
            f"got {len(raw)}"
        )
    rec = np.frombuffer(raw, dtype=dtype, count=count)

    def cols(names_):
        return np.stack(
            [rec[n].astype(np.float64) for n in names_], axis=1
        )

    centers = cols(["x", "y", "z"])
    quats = cols(["rot_0", "rot_1", "rot_2", "rot_3"])
    norms = np.linalg.norm(quats, axis=1)
    bad = norms < 1e-12
    if np.any(bad):
        raise FormatError(
            f"vertex {int(np.argmax(bad))} has a zero-norm quaternion"
        )
    quats /= norms[:, None]
    scales = np.exp(cols(["scale_0", "scale_1", "scale_2"]))
    opacities = _sigmoid(rec["opacity"].astype(np.float64))
    colors = np.clip(SH_C0 * cols(["f_dc_0", "f_dc_1", "f_dc_2"]) + 0.5, 0.0, 1.0)
    return GaussianCloud(centers, quats, scales, opacities, colors)


def write_ply(cloud: GaussianCloud, path) -> None:
    """Write the minimal 3DGS PLY dialect that `load_ply` reads back.

    Encoding inverts the load-time decode (log scales, logit opacity, DC
    color), so write -> read round-trips the float32 payload bit-exactly for
    in-range values.
    """
    k = len(cloud)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {k}\n"
        + "".join(f"property float {n}\n" for n in _REQUIRED_PROPS)
        + "end_header\n"
    )
    dtype = np.dtype([(n, "<f4") for n in _REQUIRED_PROPS])
    rec = np.empty(k, dtype=dtype)
    rec["x"], rec["y"], rec["z"] = cloud.centers.T.astype(np.float32)
    quats = cloud.rotations / np.linalg.norm(cloud.rotations, axis=1)[:, None]
    for i in range(4):
        rec[f"rot_{i}"] = quats[:, i].astype(np.float32)
    logs = np.log(cloud.scales)
    for i in range(3):
        rec[f"scale_{i}"] = logs[:, i].astype(np.float32)
    op = np.clip(cloud.opacities, 1e-7, 1.0 - 1e-7)
    rec["opacity"] = np.log(op / (1.0 - op)).astype(np.float32)
    fdc = (cloud.colors - 0.5) / SH_C0
    for i in range(3):
        rec[f"f_dc_{i}"] = fdc[:, i].astype(np.float32)
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(rec.tobytes())


def normalize_scene(cloud: GaussianCloud) -> GaussianCloud:
    """Rescale so the bounding box of centers has max extent 1 at the origin.

    Ellipsoid scales shrink by the same factor; the factor (source units per
    normalized unit) is recorded in ``scene_scale``. One normalized unit then
    equals the scene's largest dimension.
    """
    if len(cloud) == 0:
        raise EmptyModelError("cannot normalize an empty cloud")
    lo = cloud.centers.min(axis=0)
    hi = cloud.centers.max(axis=0)
    extent = float((hi - lo).max())
    if extent < 1e-12:
        raise DegenerateGeometryError(
            "all ellipsoid centers coincide; scene extent is zero"
        )
    mid = (hi + lo) / 2.0
    return GaussianCloud(
        centers=(cloud.centers - mid) / extent,
        rotations=cloud.rotations.copy(),
        scales=cloud.scales / extent,
        opacities=cloud.opacities.copy(),
        colors=cloud.colors.copy(),
        scene_scale=extent,
        scene_offset=mid,
    )
