import json

import numpy as np
import pytest

from conftest import random_cloud
from sixdgs.ellicell import NormalField, RaySet, generate_rays
from sixdgs.errors import ConfigError, FormatError, TrainingError
from sixdgs.render import CameraIntrinsics
from sixdgs.scoring import (
    FeatureMap,
    ScorerWeights,
    TrainConfig,
    attention_map,
    attention_scores,
    encode_rays,
    featurize_rays,
    forward_backward,
    gt_scores,
    load_features,
    load_weights,
    normalize_scores,
    oracle_scorer,
    positional_encoding,
    ray_camera_distances,
    save_features,
    save_weights,
    score_loss,
    train_scorer,
    _mlp_backward,
    _mlp_forward,
)
from sixdgs.synth import look_at_pose


def make_rayset(rng, n, sources=None):
    origins = rng.uniform(-0.5, 0.5, size=(n, 3))
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    colors = rng.uniform(0, 1, size=(n, 3))
    if sources is None:
        sources = np.arange(n, dtype=np.int32)
    return RaySet(origins, dirs, colors, np.asarray(sources, dtype=np.int32))


def make_fmap(rng, grid=4, channels=3, image=32):
    data = rng.uniform(0, 1, size=(grid, grid, channels)).astype(np.float32)
    return FeatureMap(data=data, image_width=image, image_height=image)


class TestPositionalEncoding:
    def test_zero_input(self):
        out = positional_encoding(np.array([0.0]), 2)
        assert np.allclose(out, [0.0, 0.0, 1.0, 0.0, 1.0])

    def test_identity_at_zero_frequencies(self, rng):
        x = rng.normal(size=7)
        assert np.array_equal(positional_encoding(x, 0), x)

    def test_half_at_one_frequency(self):
        out = positional_encoding(np.array([0.5]), 1)
        assert np.allclose(out, [0.5, 1.0, 0.0], atol=1e-12)

    def test_output_width(self, rng):
        x = rng.normal(size=(5, 9))
        out = positional_encoding(x, 6)
        assert out.shape == (5, 9 * 13)


class TestFeaturizeRays:
    def test_zero_weights_zero_output(self, rng):
        rays = make_rayset(rng, 8)
        w = ScorerWeights.initialize(channels=4, width=16, num_frequencies=2, seed=0)
        zeroed = ScorerWeights(
            layers=[(np.zeros_like(a), np.zeros_like(b)) for a, b in w.layers],
            wq=np.zeros_like(w.wq),
            wk=np.zeros_like(w.wk),
            num_frequencies=w.num_frequencies,
        )
        assert np.allclose(featurize_rays(rays, zeroed), 0.0)

    def test_permutation_equivariance(self, rng):
        rays = make_rayset(rng, 10)
        w = ScorerWeights.initialize(channels=4, width=16, num_frequencies=2, seed=1)
        v = featurize_rays(rays, w)
        perm = rng.permutation(10)
        v_perm = featurize_rays(rays.take(perm), w)
        assert np.allclose(v_perm, v[perm])

    def test_dimension_mismatch_raises(self, rng):
        w = ScorerWeights.initialize(channels=4, width=16, num_frequencies=2, seed=1)
        with pytest.raises(ConfigError):
            featurize_rays(rng.normal(size=(3, 11)), w)

    def test_mlp_gradient_matches_finite_differences(self, rng):
        # One output entry differentiated against one weight, both routes.
        rays = make_rayset(rng, 4)
        w = ScorerWeights.initialize(
            channels=3, width=8, num_frequencies=2, seed=3, dtype=np.float64
        )
        x = encode_rays(rays, 2, dtype=np.float64)
        out, cache = _mlp_forward(x, w.layers)
        i, j = 2, 1
        d_out = np.zeros_like(out)
        d_out[i, j] = 1.0
        grads = _mlp_backward(d_out, cache, w.layers)
        for li, (wmat, _) in enumerate(w.layers):
            r, c = 1, 0
            eps = 1e-6
            wmat[r, c] += eps
            up, _ = _mlp_forward(x, w.layers)
            wmat[r, c] -= 2 * eps
            dn, _ = _mlp_forward(x, w.layers)
            wmat[r, c] += eps
            fd = (up[i, j] - dn[i, j]) / (2 * eps)
            an = grads[li][0][r, c]
            assert abs(fd - an) <= 1e-4 * max(1.0, abs(fd))


def naive_attention(v, features, wq, wk):
    """Dense oracle: explicit softmax per pixel row."""
    logits = (features @ wk) @ (v @ wq).T / np.sqrt(v.shape[1])
    a = np.zeros_like(logits)
    for i in range(logits.shape[0]):
        row = np.exp(logits[i] - logits[i].max())
        a[i] = row / row.sum()
    return a


class TestAttention:
    def test_single_ray_gets_all_mass(self, rng):
        fmap = make_fmap(rng, grid=3, channels=4)
        w = ScorerWeights.initialize(channels=4, width=8, num_frequencies=1, seed=0)
        v = rng.normal(size=(1, 4))
        scores = attention_scores(v, fmap, w)
        assert np.allclose(scores, [fmap.pixel_count])

    def test_uniform_logits_split_evenly(self, rng):
        fmap = make_fmap(rng, grid=4, channels=3)
        w = ScorerWeights.initialize(channels=3, width=8, num_frequencies=1, seed=0)
        n = 5
        v = np.tile(rng.normal(size=(1, 3)), (n, 1))  # identical rays
        scores = attention_scores(v, fmap, w)
        assert np.allclose(scores, fmap.pixel_count / n)

    def test_matches_dense_oracle(self, rng):
        fmap = make_fmap(rng, grid=4, channels=4)  # M = 16... use 8x4 case too
        w = ScorerWeights.initialize(channels=4, width=8, num_frequencies=1, seed=2)
        v = rng.normal(size=(4, 4))
        a = naive_attention(v, fmap.flat().astype(np.float64), w.wq, w.wk)
        scores, pixels = attention_scores(
            v, fmap, w, chunk_pixels=3, return_pixels=True
        )
        assert np.allclose(scores, a.sum(axis=0), atol=1e-6)
        best = a.argmax(axis=0)
        assert np.allclose(pixels, fmap.cell_centers()[best])

    def test_rows_stochastic_and_total_mass(self, rng):
        fmap = make_fmap(rng, grid=5, channels=3)
        w = ScorerWeights.initialize(channels=3, width=8, num_frequencies=1, seed=4)
        v = rng.normal(size=(7, 3))
        a = attention_map(v, fmap.flat().astype(np.float64), w)
        assert np.allclose(a.sum(axis=1), 1.0, atol=1e-6)
        assert abs(attention_scores(v, fmap, w).sum() - fmap.pixel_count) < 1e-4

    def test_channel_mismatch(self, rng):
        fmap = make_fmap(rng, grid=3, channels=4)
        w = ScorerWeights.initialize(channels=3, width=8, num_frequencies=1, seed=0)
        with pytest.raises(ConfigError):
            attention_map(rng.normal(size=(2, 3)), fmap.flat(), w)


class TestGtScores:
    def test_ray_through_camera_center(self, rng):
        center = np.array([0.3, -0.2, 0.9])
        origin = np.array([0.0, 0.0, 0.0])
        d = center / np.linalg.norm(center)
        rays = RaySet(
            origins=np.array([origin, origin]),
            directions=np.array([d, [1.0, 0.0, 0.0]]),
            colors=np.zeros((2, 3)),
            sources=np.array([0, 1], dtype=np.int32),
        )
        h = ray_camera_distances(rays, center)
        assert h[0] < 1e-12
        delta = 1.0 - np.tanh(h / 0.1)
        assert delta[0] > 1.0 - 1e-9
        # exact-zero case: ray starting at the camera center itself
        exact = RaySet(
            origins=center[None, :].copy(),
            directions=np.array([[1.0, 0.0, 0.0]]),
            colors=np.zeros((1, 3)),
            sources=np.array([0], dtype=np.int32),
        )
        h0 = ray_camera_distances(exact, center)
        assert h0[0] == 0.0
        assert (1.0 - np.tanh(h0 / 0.1))[0] == 1.0

    def test_backward_ray_clamps_projection(self):
        center = np.array([0.0, 0.0, -2.0])
        rays = RaySet(
            origins=np.zeros((1, 3)),
            directions=np.array([[0.0, 0.0, 1.0]]),  # points away from camera
            colors=np.zeros((1, 3)),
            sources=np.array([0], dtype=np.int32),
        )
        h = ray_camera_distances(rays, center)
        assert np.isclose(h[0], 2.0)  # distance to the origin itself

    def test_scores_sum_to_m(self, rng):
        rays = make_rayset(rng, 50)
        s = gt_scores(rays, np.array([1.0, 1.0, 1.0]), lam=0.1, m_pixels=64)
        assert abs(s.sum() - 64.0) < 1e-9

    def test_delta_monotone_decreasing_in_distance(self):
        h = np.linspace(0, 3, 100)
        delta = 1.0 - np.tanh(h / 0.1)
        assert np.all(np.diff(delta) <= 0)
        # strictly decreasing until tanh saturates in float64
        live = h < 1.5
        assert np.all(np.diff(delta[live]) < 0)
        assert delta[0] == 1.0
        assert delta[-1] < 1e-9

    def test_rescaling_invariance(self, rng):
        delta = rng.uniform(0.0, 1.0, size=40)
        a = normalize_scores(delta, 128)
        b = normalize_scores(3.7 * delta, 128)
        assert np.allclose(a, b, atol=1e-9)

    def test_all_far_fallback_uniform(self, rng, caplog):
        rays = make_rayset(rng, 8)
        with caplog.at_level("WARNING"):
            s = normalize_scores(np.zeros(8), 16)
        assert np.allclose(s, 2.0)
        assert any("uniform" in r.message for r in caplog.records)

    def test_near_rays_beat_far_rays(self, rng):
        lam = 0.1
        center = np.array([0.2, 0.1, 1.2])
        rays = make_rayset(rng, 200)
        # aim a handful of rays near the camera center
        for i in range(10):
            target = center + rng.normal(scale=0.3 * lam, size=3)
            d = target - rays.origins[i]
            rays.directions[i] = d / np.linalg.norm(d)
        s = gt_scores(rays, center, lam, m_pixels=256)
        h = ray_camera_distances(rays, center)
        near, far = h < lam, h > 5 * lam
        assert near.any() and far.any()
        assert s[near].min() > s[far].max()

    def test_oracle_scorer_equals_gt_scores(self, rng):
        rays = make_rayset(rng, 30)
        pose = look_at_pose(np.array([0.0, -1.5, 0.9]))
        a = oracle_scorer(rays, pose, 0.1, m_pixels=100)
        b = gt_scores(rays, pose.center, 0.1, m_pixels=100)
        assert np.array_equal(a, b)

    def test_rejects_bad_lambda(self, rng):
        with pytest.raises(ConfigError):
            gt_scores(make_rayset(rng, 3), np.zeros(3), lam=0.0, m_pixels=4)


class TestScoreLoss:
    def test_zero_when_equal(self, rng):
        s = rng.uniform(size=20)
        assert score_loss(s, s, m_pixels=16) == 0.0

    def test_unit_offset_scaling_constant(self, rng):
        s = rng.uniform(size=20)
        assert np.isclose(score_loss(s + 1.0, s, m_pixels=16), 1.0 / 16.0)

    def test_matches_loop_oracle(self, rng):
        a, b, m = rng.normal(size=33), rng.normal(size=33), 7
        total = 0.0
        for x, y in zip(a, b):
            total += (x - y) ** 2
        assert abs(score_loss(a, b, m) - total / (m * 33)) < 1e-9

    def test_length_mismatch(self, rng):
        with pytest.raises(ValueError):
            score_loss(np.zeros(3), np.zeros(4))


def finite_difference_grads(x, features, target, weights, m_pixels, step=1e-4):
    grads = []
    for param in weights.parameters():
        g = np.zeros_like(param)
        it = np.nditer(param, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = param[idx]
            param[idx] = orig + step
            up, _, _ = forward_backward(x, features, target, weights, m_pixels, want_grads=False)
            param[idx] = orig - step
            dn, _, _ = forward_backward(x, features, target, weights, m_pixels, want_grads=False)
            param[idx] = orig
            g[idx] = (up - dn) / (2 * step)
            it.iternext()
        grads.append(g)
    return grads


def tiny_instance(rng, n_rays=5, grid=2, channels=3):
    rays = make_rayset(rng, n_rays)
    fmap = make_fmap(rng, grid=grid, channels=channels, image=16)
    weights = ScorerWeights.initialize(
        channels=channels, width=6, num_frequencies=1, seed=7, dtype=np.float64
    )
    x = encode_rays(rays, 1, dtype=np.float64)
    center = np.array([0.1, 0.2, 1.0])
    target = gt_scores(rays, center, lam=0.3, m_pixels=fmap.pixel_count)
    return x, fmap.flat().astype(np.float64), target, weights, fmap.pixel_count


class TestGradients:
    def test_analytic_matches_central_differences(self, rng):
        x, feats, target, weights, m = tiny_instance(rng)
        loss, grads, _ = forward_backward(x, feats, target, weights, m)
        fd = finite_difference_grads(x, feats, target, weights, m)
        for name, a, b in zip(weights.parameter_names(), grads, fd):
            scale = max(np.abs(b).max(), 1e-8)
            rel = np.abs(a - b).max() / scale
            assert rel < 1e-3, f"{name}: rel err {rel}"

    def test_loss_decreases_on_tiny_overfit(self, rng):
        x, feats, target, weights, m = tiny_instance(rng, n_rays=12, grid=3)
        from sixdgs.scoring import AdamW

        opt = AdamW(weights.parameters(), lr=3e-3, weight_decay=0.0)
        losses = []
        for _ in range(400):
            loss, grads, _ = forward_backward(x, feats, target, weights, m)
            opt.step(grads)
            losses.append(loss)
        assert min(losses) < 0.1 * losses[0]


def build_training_setup(rng, k=40, n_views=4, grid=6, width=12, image=24):
    cloud = random_cloud(k, rng)
    cloud.centers /= max(1.0, 2 * np.abs(cloud.centers).max())
    dirs = rng.normal(size=(k, 3))
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    normals = NormalField(dirs, 0, np.zeros(k, bool))
    rays = generate_rays(cloud, 20, normals, color_mode="source")
    intr = CameraIntrinsics(fx=30, fy=30, cx=image / 2, cy=image / 2,
                            width=image, height=image)
    views = []
    for i in range(n_views):
        e = rng.normal(size=3)
        e = 1.4 * e / np.linalg.norm(e)
        pose = look_at_pose(e)
        data = rng.uniform(0, 1, size=(grid, grid, 3)).astype(np.float32)
        views.append((FeatureMap(data, image, image), pose, intr))
    return cloud, rays, views


class TestTrainScorer:
    def test_zero_learning_rate_keeps_weights(self, rng):
        cloud, rays, views = build_training_setup(rng)
        cfg = TrainConfig(iterations=5, learning_rate=0.0, mlp_width=8,
                          num_frequencies=1, seed=3)
        weights, _ = train_scorer(cloud, views, cfg, rays=rays)
        fresh = ScorerWeights.initialize(
            channels=3, width=8, num_frequencies=1, seed=3, dtype=np.float32
        )
        for a, b in zip(weights.parameters(), fresh.parameters()):
            assert np.array_equal(a, b)

    def test_seeded_runs_identical(self, rng):
        cloud, rays, views = build_training_setup(rng)
        cfg = TrainConfig(iterations=20, mlp_width=8, num_frequencies=1, seed=5)
        _, l1 = train_scorer(cloud, views, cfg, rays=rays)
        _, l2 = train_scorer(cloud, views, cfg, rays=rays)
        assert np.array_equal(l1, l2)

    def test_loss_improves_on_synthetic_scene(self, rng):
        cloud, rays, views = build_training_setup(rng, k=200, n_views=8)
        cfg = TrainConfig(iterations=300, mlp_width=64, num_frequencies=2, seed=2)
        _, losses = train_scorer(cloud, views, cfg, rays=rays)
        assert losses[-50:].mean() < losses[:50].mean()

    def test_divergence_raises_with_iteration(self, rng):
        cloud, rays, views = build_training_setup(rng)
        cfg = TrainConfig(iterations=200, learning_rate=1e18, mlp_width=8,
                          num_frequencies=1, seed=1)
        with np.errstate(all="ignore"), pytest.raises(TrainingError) as err:
            train_scorer(cloud, views, cfg, rays=rays)
        assert err.value.iteration is not None

    def test_requires_two_views(self, rng):
        cloud, rays, views = build_training_setup(rng)
        with pytest.raises(ConfigError):
            train_scorer(cloud, views[:1], TrainConfig(iterations=2), rays=rays)

    def test_subsampling_path(self, rng):
        cloud, rays, views = build_training_setup(rng, k=50)
        cfg = TrainConfig(iterations=8, ellipsoid_subsample=10, mlp_width=8,
                          num_frequencies=1, seed=0)
        _, losses = train_scorer(cloud, views, cfg, rays=rays)
        assert np.isfinite(losses).all()


class TestFeatureIO:
    def test_round_trip_bitwise(self, tmp_path, rng):
        fmap = make_fmap(rng, grid=5, channels=7, image=70)
        path = tmp_path / "f.feat"
        save_features(fmap, path)
        back = load_features(path)
        assert np.array_equal(back.data, fmap.data)
        assert back.image_width == 70 and back.image_height == 70

    def test_truncated_file_reports_counts(self, tmp_path, rng):
        fmap = make_fmap(rng)
        path = tmp_path / "f.feat"
        save_features(fmap, path)
        path.write_bytes(path.read_bytes()[:-7])
        with pytest.raises(FormatError, match="expected"):
            load_features(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "f.feat"
        path.write_bytes(b"6DWRONG\x00" + b"\x00" * 24)
        with pytest.raises(FormatError, match="magic"):
            load_features(path)

    def test_cell_centers_scale_to_image(self, rng):
        fmap = FeatureMap(
            data=np.zeros((2, 4, 3), dtype=np.float32),
            image_width=448, image_height=224,
        )
        centers = fmap.cell_centers()
        assert centers.shape == (8, 2)
        assert np.allclose(centers[0], [56.0, 56.0])
        assert np.allclose(centers[-1], [392.0, 168.0])

    def test_non_finite_rejected(self):
        data = np.full((2, 2, 1), np.nan, dtype=np.float32)
        with pytest.raises(FormatError):
            FeatureMap(data=data, image_width=2, image_height=2)


class TestWeightsIO:
    def test_round_trip(self, tmp_path):
        w = ScorerWeights.initialize(channels=5, width=16, num_frequencies=3, seed=9)
        save_weights(w, tmp_path / "w.bin", tmp_path / "m.json", extra={"seed": 9})
        back, manifest = load_weights(tmp_path / "w.bin", tmp_path / "m.json")
        for a, b in zip(w.parameters(), back.parameters()):
            assert np.array_equal(a, b)
        assert manifest["seed"] == 9
        assert manifest["width"] == 16
        assert back.num_frequencies == 3

    def test_bad_magic(self, tmp_path):
        (tmp_path / "w.bin").write_bytes(b"XXXXXXXX")
        (tmp_path / "m.json").write_text(json.dumps({"num_frequencies": 1}))
        with pytest.raises(FormatError):
            load_weights(tmp_path / "w.bin", tmp_path / "m.json")

    def test_truncated_section(self, tmp_path):
        w = ScorerWeights.initialize(channels=3, width=8, num_frequencies=1, seed=0)
        save_weights(w, tmp_path / "w.bin", tmp_path / "m.json")
        raw = (tmp_path / "w.bin").read_bytes()
        (tmp_path / "w.bin").write_bytes(raw[:-20])
        with pytest.raises(FormatError, match="truncated"):
            load_weights(tmp_path / "w.bin", tmp_path / "m.json")
