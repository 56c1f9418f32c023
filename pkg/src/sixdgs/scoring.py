"""Ray/pixel binding: featurize rays, attend against image features, train.

Rays are positional-encoded and pushed through a small MLP whose outputs act
as attention queries against per-pixel image features (keys). Summing each
ray's attention column over pixels gives its score; supervision derives
target scores from the distance between each ray and the known camera center
of a training view. Everything here is plain numpy with hand-written
gradients so the analytic/finite-difference check is meaningful.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, TrainingError
from .model import GaussianCloud

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"6DFEAT1\x00"
WEIGHTS_MAGIC = b"6DGSWTS1"

RAY_INPUT_DIM = 9  # origin, direction, color
HIDDEN_LAYERS = 3


# ---------------------------------------------------------------------------
# Feature maps


@dataclass
class FeatureMap:
    """Dense per-pixel descriptor grid for one target image."""

    data: np.ndarray      # (grid_h, grid_w, channels) float32
    image_width: int
    image_height: int

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] < 1:
            raise FormatError("feature data must be (grid_h, grid_w, channels)")
        if not np.isfinite(self.data).all():
            raise FormatError("feature map contains non-finite values")

    @property
    def grid_height(self) -> int:
        return self.data.shape[0]

    @property
    def grid_width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def pixel_count(self) -> int:
        return self.grid_height * self.grid_width

    def flat(self) -> np.ndarray:
        return self.data.reshape(self.pixel_count, self.channels)

    def cell_centers(self) -> np.ndarray:
        """Image-plane coordinates of each feature cell center, (M, 2)."""
        sx = self.image_width / self.grid_width
        sy = self.image_height / self.grid_height
        xs = (np.arange(self.grid_width) + 0.5) * sx
        ys = (np.arange(self.grid_height) + 0.5) * sy
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx.ravel(), gy.ravel()], axis=1)


def save_features(fmap: FeatureMap, path) -> None:
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(
            struct.pack(
                "<5I",
                fmap.grid_width,
                fmap.grid_height,
                fmap.channels,
                fmap.image_width,
                fmap.image_height,
            )
        )
        f.write(np.ascontiguousarray(fmap.data, dtype="<f4").tobytes())


def load_features(path) -> FeatureMap:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != FEATURE_MAGIC:
            raise FormatError(f"bad feature file magic {magic!r}")
        header = f.read(20)
        if len(header) != 20:
            raise FormatError("feature file header truncated")
        grid_w, grid_h, channels, width, height = struct.unpack("<5I", header)
        body = f.read()
    expected = grid_w * grid_h * channels * 4
    if len(body) != expected:
        raise FormatError(
            f"feature file truncated: expected {expected} data bytes, "
            f"got {len(body)}"
        )
    data = np.frombuffer(body, dtype="<f4").reshape(grid_h, grid_w, channels)
    return FeatureMap(data=data.copy(), image_width=width, image_height=height)


# ---------------------------------------------------------------------------
# Encoding and the ray featurizer


def positional_encoding(x: np.ndarray, num_frequencies: int) -> np.ndarray:
    """Fourier encoding: concat(x, sin(2^k pi x), cos(2^k pi x)), k < L.

    Output width is dim(x) * (1 + 2L); L = 0 is the identity. The input
    dtype is preserved.
    """
    x = np.asarray(x)
    if num_frequencies == 0:
        return x.copy()
    d = x.shape[-1]
    out = np.empty(x.shape[:-1] + (d * (1 + 2 * num_frequencies),), dtype=x.dtype)
    out[..., :d] = x
    for k in range(num_frequencies):
        scaled = x * x.dtype.type(2.0**k * np.pi)
        base = d * (1 + 2 * k)
        np.sin(scaled, out=out[..., base:base + d])
        np.cos(scaled, out=out[..., base + d:base + 2 * d])
    return out


def encode_rays(rays, num_frequencies: int, dtype=np.float64) -> np.ndarray:
    """Per-ray MLP input: positional-encoded concat(origin, direction, color)."""
    raw = np.concatenate([rays.origins, rays.directions, rays.colors], axis=1)
    return positional_encoding(raw.astype(dtype), num_frequencies)


@dataclass
class ScorerWeights:
    """MLP layers plus the attention query/key projections."""

    layers: list              # [(weight (in, out), bias (out,)), ...]
    wq: np.ndarray            # (C, C) query projection for ray features
    wk: np.ndarray            # (C, C) key projection for image features
    num_frequencies: int

    def __post_init__(self):
        dims_ok = all(
            w.shape[1] == b.shape[0] for w, b in self.layers
        ) and all(
            self.layers[i][0].shape[1] == self.layers[i + 1][0].shape[0]
            for i in range(len(self.layers) - 1)
        )
        c = self.channels
        if not dims_ok or self.wq.shape != (c, c) or self.wk.shape != (c, c):
            raise ConfigError("weight shapes do not chain")

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def width(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def channels(self) -> int:
        return self.layers[-1][0].shape[1]

    def parameters(self) -> list:
        out = []
        for w, b in self.layers:
            out.extend([w, b])
        out.extend([self.wq, self.wk])
        return out

    def parameter_names(self) -> list:
        names = []
        for i in range(len(self.layers)):
            names.extend([f"layer{i}.weight", f"layer{i}.bias"])
        names.extend(["query.weight", "key.weight"])
        return names

    def astype(self, dtype) -> "ScorerWeights":
        return ScorerWeights(
            layers=[(w.astype(dtype), b.astype(dtype)) for w, b in self.layers],
            wq=self.wq.astype(dtype),
            wk=self.wk.astype(dtype),
            num_frequencies=self.num_frequencies,
        )

    @classmethod
    def initialize(
        cls,
        channels: int,
        width: int = 512,
        num_frequencies: int = 6,
        seed: int = 0,
        dtype=np.float32,
    ) -> "ScorerWeights":
        rng = np.random.default_rng(seed)
        input_dim = RAY_INPUT_DIM * (1 + 2 * num_frequencies)
        dims = [input_dim] + [width] * HIDDEN_LAYERS + [channels]
        layers = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            scale = np.sqrt(2.0 / fan_in)
            layers.append(
                (
                    (rng.standard_normal((fan_in, fan_out)) * scale).astype(dtype),
                    np.zeros(fan_out, dtype=dtype),
                )
            )
        proj_scale = 1.0 / np.sqrt(channels)
        wq = (rng.standard_normal((channels, channels)) * proj_scale).astype(dtype)
        wk = (rng.standard_normal((channels, channels)) * proj_scale).astype(dtype)
        return cls(layers=layers, wq=wq, wk=wk, num_frequencies=num_frequencies)


def _sigmoid(x):
    out = np.exp(-x)
    out += 1.0
    np.divide(1.0, out, out=out)
    return out


def _mlp_forward(x, layers):
    """Forward pass returning the output and the activation cache.

    The cache keeps each hidden layer's pre-activation and sigmoid so the
    backward pass never re-evaluates exp.
    """
    pres = []
    sigs = []
    acts = [x]
    h = x
    for w, b in layers[:-1]:
        pre = h @ w + b
        sig = _sigmoid(pre)
        pres.append(pre)
        sigs.append(sig)
        h = pre * sig  # silu
        acts.append(h)
    w, b = layers[-1]
    out = h @ w + b
    return out, (pres, sigs, acts)


def _mlp_backward(d_out, cache, layers):
    """Gradients for every layer given d(loss)/d(output).

    The input gradient of the first layer is never needed and is skipped.
    """
    pres, sigs, acts = cache
    grads = [None] * len(layers)
    w, _ = layers[-1]
    grads[-1] = (acts[-1].T @ d_out, d_out.sum(axis=0))
    dh = d_out @ w.T
    for i in range(len(layers) - 2, -1, -1):
        # silu'(x) = sig * (1 + x * (1 - sig)), from the cached sigmoid
        dsilu = 1.0 - sigs[i]
        dsilu *= pres[i]
        dsilu += 1.0
        dsilu *= sigs[i]
        dpre = dh
        dpre *= dsilu
        grads[i] = (acts[i].T @ dpre, dpre.sum(axis=0))
        if i > 0:
            dh = dpre @ layers[i][0].T
    return grads


def featurize_rays(rays_or_encoded, weights: ScorerWeights) -> np.ndarray:
    """Map rays to the (N, C) query feature matrix via the MLP."""
    if hasattr(rays_or_encoded, "origins"):
        x = encode_rays(
            rays_or_encoded, weights.num_frequencies, dtype=weights.wq.dtype
        )
    else:
        x = np.asarray(rays_or_encoded)
    if x.shape[1] != weights.input_dim:
        raise ConfigError(
            f"encoded ray width {x.shape[1]} does not match weights "
            f"(expect {weights.input_dim})"
        )
    out, _ = _mlp_forward(x, weights.layers)
    return out


# ---------------------------------------------------------------------------
# Attention


def attention_map(v: np.ndarray, features: np.ndarray, weights: ScorerWeights):
    """Dense (M, N) attention: per-pixel softmax over rays.

    Logits are (F Wk)(V Wq)^T / sqrt(C). Every pixel row sums to one.
    """
    if v.shape[1] != features.shape[1]:
        raise ConfigError("ray features and image features disagree on C")
    q = v @ weights.wq
    k = features @ weights.wk
    logits = (k @ q.T) / np.sqrt(v.shape[1])
    logits -= logits.max(axis=1, keepdims=True)
    a = np.exp(logits)
    a /= a.sum(axis=1, keepdims=True)
    return a


def attention_scores(
    v: np.ndarray,
    fmap: FeatureMap,
    weights: ScorerWeights,
    chunk_pixels: int | None = None,
    return_pixels: bool = False,
    return_row_stats: bool = False,
):
    """Per-ray scores (column sums of the attention map), chunked over pixels.

    With ``return_pixels`` also returns, per ray, the image coordinate of the
    feature cell holding its strongest attention entry. The softmax runs
    within pixel rows, so chunking over pixels is exact.
    ``return_row_stats`` instead appends the per-pixel softmax normalizers
    (row max and exp-sum of the scaled logits), which let callers recover
    exact attention entries for a ray subset later without the full map.
    """
    features = fmap.flat().astype(v.dtype)
    m, n = features.shape[0], v.shape[0]
    if chunk_pixels is None:
        chunk_pixels = max(1, int(16_000_000 // max(n, 1)))
    q = v @ weights.wq
    k_all = features @ weights.wk
    inv_sqrt_c = v.dtype.type(1.0 / np.sqrt(v.shape[1]))
    scores = np.zeros(n, dtype=np.float64)
    best_val = np.full(n, -np.inf)
    best_pix = np.zeros(n, dtype=np.int64)
    row_max = np.empty(m, dtype=v.dtype)
    row_sum = np.empty(m, dtype=v.dtype)
    for lo in range(0, m, chunk_pixels):
        hi = min(lo + chunk_pixels, m)
        logits = k_all[lo:hi] @ q.T
        logits *= inv_sqrt_c
        mx = logits.max(axis=1)
        row_max[lo:hi] = mx
        logits -= mx[:, None]
        block = np.exp(logits)
        sums = block.sum(axis=1)
        row_sum[lo:hi] = sums
        block /= sums[:, None]
        scores += block.sum(axis=0)
        if return_pixels:
            cand = block.max(axis=0)
            cand_row = block.argmax(axis=0) + lo
            better = cand > best_val
            best_val[better] = cand[better]
            best_pix[better] = cand_row[better]
    if return_pixels:
        return scores, fmap.cell_centers()[best_pix]
    if return_row_stats:
        return scores, (row_max, row_sum)
    return scores


def attention_argmax_pixels(
    v_subset: np.ndarray,
    fmap: FeatureMap,
    weights: ScorerWeights,
    row_stats,
) -> np.ndarray:
    """Strongest-attention cell centers for a (small) ray subset.

    ``row_stats`` are the per-pixel normalizers from `attention_scores`
    over the full ray set; with them the subset's exact attention entries
    are cheap to reconstruct.
    """
    row_max, row_sum = row_stats
    q = v_subset @ weights.wq
    k = fmap.flat().astype(v_subset.dtype) @ weights.wk
    logits = (k @ q.T) * v_subset.dtype.type(1.0 / np.sqrt(v_subset.shape[1]))
    attn = np.exp(logits - row_max[:, None]) / row_sum[:, None]
    return fmap.cell_centers()[attn.argmax(axis=0)]


# ---------------------------------------------------------------------------
# Ground-truth scores (the oracle path)


def normalize_scores(delta: np.ndarray, m_pixels: int) -> np.ndarray:
    """Rescale raw closeness values so they sum to the pixel count."""
    total = delta.sum()
    if total <= 0.0:
        logger.warning(
            "all rays infinitely far from the camera center; "
            "falling back to uniform scores"
        )
        return np.full(delta.shape, m_pixels / len(delta))
    return delta * (m_pixels / total)


def ray_camera_distances(rays, camera_center: np.ndarray) -> np.ndarray:
    """Distance from the camera center to its projection on each ray.

    The projection parameter is clamped at zero: rays are half-lines, so a
    camera behind a ray origin is measured to the origin itself.
    """
    o = np.asarray(camera_center, dtype=np.float64).reshape(3)
    rel = o - rays.origins
    l = np.clip(np.einsum("ni,ni->n", rel, rays.directions), 0.0, None)
    foot = rays.origins + l[:, None] * rays.directions
    return np.linalg.norm(foot - o, axis=1)


def gt_scores(rays, camera_center, lam: float, m_pixels: int) -> np.ndarray:
    """Target scores from camera-to-ray distance: delta = 1 - tanh(h / lam).

    ``lam`` sets how many rays count as close; scores are normalized to sum
    to ``m_pixels`` to match the attention-score scale.
    """
    if lam <= 0:
        raise ConfigError("lam must be positive")
    h = ray_camera_distances(rays, camera_center)
    delta = 1.0 - np.tanh(h / lam)
    return normalize_scores(delta, m_pixels)


def oracle_scorer(rays, gt_pose, lam: float, m_pixels: int | None = None) -> np.ndarray:
    """Exact test-time stand-in for the trained scorer (no weights needed)."""
    if m_pixels is None:
        m_pixels = len(rays)
    return gt_scores(rays, gt_pose.center, lam, m_pixels)


def oracle_bindings(rays, gt_pose, intrinsics, fmap: FeatureMap | None = None):
    """Ideal ray-to-pixel matches: each source center projected by the pose.

    Stands in for the attention argmax when scoring with the oracle. Returns
    (pixels (N, 2), in_front (N,) bool); pixels snap to feature cell centers
    when a map is given, and rays whose source sits behind the camera get the
    principal point with in_front False (callers zero their scores).
    """
    t = (rays.origins - gt_pose.center) @ gt_pose.rotation.T
    in_front = t[:, 2] > 1e-9
    z = np.where(in_front, t[:, 2], 1.0)
    px = np.stack(
        [
            intrinsics.fx * t[:, 0] / z + intrinsics.cx,
            intrinsics.fy * t[:, 1] / z + intrinsics.cy,
        ],
        axis=1,
    )
    px[:, 0] = np.clip(px[:, 0], 0.0, intrinsics.width)
    px[:, 1] = np.clip(px[:, 1], 0.0, intrinsics.height)
    px[~in_front] = (intrinsics.cx, intrinsics.cy)
    if fmap is not None:
        sx = fmap.image_width / fmap.grid_width
        sy = fmap.image_height / fmap.grid_height
        col = np.clip((px[:, 0] // sx), 0, fmap.grid_width - 1)
        row = np.clip((px[:, 1] // sy), 0, fmap.grid_height - 1)
        px = np.stack([(col + 0.5) * sx, (row + 0.5) * sy], axis=1)
    return px, in_front


def score_loss(pred: np.ndarray, gt: np.ndarray, m_pixels: int = 1) -> float:
    """Squared-error training loss with the 1/(M N) normalization."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(
            f"score vectors disagree in length: {pred.shape} vs {gt.shape}"
        )
    diff = pred - gt
    return float((diff @ diff) / (m_pixels * pred.shape[0]))


# ---------------------------------------------------------------------------
# Training


def forward_backward(
    x_encoded: np.ndarray,
    features: np.ndarray,
    target_scores: np.ndarray,
    weights: ScorerWeights,
    m_pixels: int | None = None,
    want_grads: bool = True,
):
    """Loss and analytic gradients of the full scoring pipeline.

    Returns (loss, grads, predicted_scores); grads align with
    ``weights.parameters()`` order. Everything is hand-differentiated:
    MLP -> projections -> per-pixel softmax -> column sums -> squared error.
    """
    m, n = features.shape[0], x_encoded.shape[0]
    if m_pixels is None:
        m_pixels = m
    target_scores = np.asarray(target_scores, dtype=x_encoded.dtype)
    c = weights.channels
    inv_sqrt_c = 1.0 / np.sqrt(c)

    v, cache = _mlp_forward(x_encoded, weights.layers)
    q = v @ weights.wq
    k = features @ weights.wk
    logits = (k @ q.T) * inv_sqrt_c
    logits -= logits.max(axis=1, keepdims=True)
    attn = np.exp(logits)
    attn /= attn.sum(axis=1, keepdims=True)
    pred = attn.sum(axis=0)

    diff = pred - target_scores
    loss = float((diff @ diff) / (m_pixels * n))
    if not want_grads:
        return loss, None, pred

    d_pred = (2.0 / (m_pixels * n)) * diff               # (N,)
    # d(loss)/d(logits): softmax rows share d_pred across pixels.
    row_dot = attn @ d_pred                              # (M,)
    d_logits = attn * (d_pred[None, :] - row_dot[:, None])
    d_q = (d_logits.T @ k) * inv_sqrt_c                  # (N, C)
    d_k = (d_logits @ q) * inv_sqrt_c                    # (M, C)
    d_wq = v.T @ d_q
    d_wk = features.T @ d_k
    d_v = d_q @ weights.wq.T
    mlp_grads = _mlp_backward(d_v, cache, weights.layers)

    grads = []
    for gw, gb in mlp_grads:
        grads.extend([gw, gb])
    grads.extend([d_wq, d_wk])
    return loss, grads, pred


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay."""

    def __init__(self, params, lr=1e-3, weight_decay=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads):
        self.step_count += 1
        b1, b2 = self.betas
        bias1 = 1.0 - b1**self.step_count
        bias2 = 1.0 - b2**self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g.astype(p.dtype, copy=False)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p -= self.lr * (update + self.weight_decay * p)


@dataclass
class TrainConfig:
    """Knobs of one scorer training run; defaults follow the reference setup."""

    iterations: int = 1500
    ellipsoid_subsample: int = 2000
    weight_decay: float = 1e-3
    learning_rate: float = 1e-3
    lam: float = 0.1
    seed: int = 0
    mlp_width: int = 512
    num_frequencies: int = 6
    g_cells: int = 100
    dtype: str = "float32"

    def __post_init__(self):
        if min(
            self.iterations, self.ellipsoid_subsample, self.mlp_width,
            self.g_cells,
        ) <= 0 or self.lam <= 0 or self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("train config values must be positive")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def train_scorer(
    cloud: GaussianCloud,
    views: list,
    cfg: TrainConfig,
    rays=None,
    log_every: int = 0,
):
    """Fit scorer weights against the views used to build the model.

    ``views`` is a list of (FeatureMap, Pose, CameraIntrinsics). Each
    iteration samples one view, subsamples ellipsoids, gathers their rays,
    runs the scoring pipeline forward and backward, and takes one AdamW step
    on the squared-error score loss. Returns (weights, loss_curve). Fixed
    seeds give identical runs.
    """
    if len(views) < 2:
        raise ConfigError("need at least 2 training views")
    channels = views[0][0].channels
    if any(fmap.channels != channels for fmap, _, _ in views):
        raise ConfigError("training views disagree on feature channels")
    dtype = np.dtype(cfg.dtype).type

    if rays is None:
        from .ellicell import estimate_normals, generate_rays

        normals = estimate_normals(cloud, k=min(16, len(cloud) - 1))
        rays = generate_rays(cloud, cfg.g_cells, normals)
    if len(rays) == 0:
        raise ConfigError("no rays to train on")

    x_all = encode_rays(rays, cfg.num_frequencies, dtype=dtype)
    # Rays are ordered by source ellipsoid; per-ellipsoid contiguous ranges.
    starts = np.searchsorted(rays.sources, np.arange(len(cloud)))
    ends = np.searchsorted(rays.sources, np.arange(len(cloud)), side="right")

    feats = [np.ascontiguousarray(f.flat(), dtype=dtype) for f, _, _ in views]
    m_pixels = [f.pixel_count for f, _, _ in views]
    deltas = []
    for _, pose, _ in views:
        h = ray_camera_distances(rays, pose.center)
        deltas.append((1.0 - np.tanh(h / cfg.lam)).astype(np.float64))

    rng = np.random.default_rng(cfg.seed)
    weights = ScorerWeights.initialize(
        channels=channels,
        width=cfg.mlp_width,
        num_frequencies=cfg.num_frequencies,
        seed=cfg.seed,
        dtype=dtype,
    )
    optimizer = AdamW(
        weights.parameters(),
        lr=cfg.learning_rate,
        weight_decay=cfg.weight_decay,
    )

    k_total = len(cloud)
    subsample = min(cfg.ellipsoid_subsample, k_total)
    losses = np.empty(cfg.iterations)
    for it in range(cfg.iterations):
        view_idx = int(rng.integers(len(views)))
        if subsample < k_total:
            chosen = np.sort(rng.choice(k_total, size=subsample, replace=False))
            ray_idx = np.concatenate(
                [np.arange(starts[i], ends[i]) for i in chosen]
            )
            x = x_all[ray_idx]
            delta = deltas[view_idx][ray_idx]
        else:
            x = x_all
            delta = deltas[view_idx]
        target = normalize_scores(delta, m_pixels[view_idx])
        # overflow surfaces as a non-finite loss and a typed error below
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads, _ = forward_backward(
                x, feats[view_idx], target, weights, m_pixels=m_pixels[view_idx]
            )
        if not np.isfinite(loss):
            raise TrainingError(
                f"loss became non-finite at iteration {it}", iteration=it
            )
        optimizer.step(grads)
        losses[it] = loss
        if log_every and (it + 1) % log_every == 0:
            logger.info("iter %d/%d loss %.6f", it + 1, cfg.iterations, loss)
    return weights, losses


# ---------------------------------------------------------------------------
# Weights serialization


def save_weights(
    weights: ScorerWeights, bin_path, manifest_path, extra: dict | None = None
) -> None:
    """Sectioned binary (name + shape headers + float data) plus a manifest."""
    names = weights.parameter_names()
    params = weights.parameters()
    with open(bin_path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<I", len(params)))
        for name, arr in zip(names, params):
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BB", arr.ndim, arr.dtype.itemsize))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).astype(f"<f{arr.dtype.itemsize}").tobytes())
    manifest = {
        "input_dim": weights.input_dim,
        "width": weights.width,
        "channels": weights.channels,
        "hidden_layers": HIDDEN_LAYERS,
        "num_frequencies": weights.num_frequencies,
    }
    if extra:
        manifest.update(extra)
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_weights(bin_path, manifest_path) -> tuple:
    """Read the sectioned weights binary; returns (ScorerWeights, manifest)."""
    with open(manifest_path) as f:
        manifest = json.load(f)
    sections = {}
    with open(bin_path, "rb") as f:
        magic = f.read(8)
        if magic != WEIGHTS_MAGIC:
            raise FormatError(f"bad weights magic {magic!r}")
        (count,) = struct.unpack("<I", f.read(4))
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            ndim, itemsize = struct.unpack("<BB", f.read(2))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            nbytes = int(np.prod(shape)) * itemsize
            raw = f.read(nbytes)
            if len(raw) != nbytes:
                raise FormatError(f"weights section '{name}' truncated")
            sections[name] = np.frombuffer(raw, dtype=f"<f{itemsize}").reshape(shape).copy()
    layers = []
    i = 0
    while f"layer{i}.weight" in sections:
        layers.append((sections[f"layer{i}.weight"], sections[f"layer{i}.bias"]))
        i += 1
    if not layers or "query.weight" not in sections or "key.weight" not in sections:
        raise FormatError("weights file is missing required sections")
    weights = ScorerWeights(
        layers=layers,
        wq=sections["query.weight"],
        wk=sections["key.weight"],
        num_frequencies=int(manifest["num_frequencies"]),
    )
    return weights, manifest
