"""Command-line surface: synth data, ray dumps, training, estimation, eval.

Exit codes are a stable contract: 0 success, 2 bad input, 3 degenerate
geometry, 4 training failure. Every run writes a ``run.json`` echo (seed,
knobs, input hashes) sufficient to reproduce it.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .ellicell import (
    estimate_normals,
    generate_rays,
    read_rays,
    write_rays,
    write_rays_csv,
)
from .errors import (
    ConfigError,
    DegenerateGeometryError,
    FormatError,
    TrainingError,
)
from .model import GaussianCloud, load_ply, normalize_scene
from .render import Pose, render_image
from .scoring import (
    TrainConfig,
    attention_argmax_pixels,
    attention_scores,
    featurize_rays,
    load_features,
    load_weights,
    oracle_bindings,
    oracle_scorer,
    save_weights,
    train_scorer,
)
from .solver import (
    PoseEstimate,
    SelectedBundle,
    estimate_pose,
    estimate_rotation,
    intersect_rays_wls,
    perpendicular_distances,
    pose_error,
    pose_estimate_to_json,
    top_ray_indices,
)
from .synth import SynthConfig, generate_dataset, load_transforms, save_image_png

logger = logging.getLogger("sixdgs")

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_DEGENERATE = 3
EXIT_TRAINING = 4


def _hash_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()[:16]


def _write_run_echo(out_dir: Path, command: str, args: argparse.Namespace, inputs: dict):
    echo = {
        "command": command,
        "version": __version__,
        "options": {
            k: v for k, v in sorted(vars(args).items()) if k != "func" and v is not None
        },
        "input_hashes": {
            name: _hash_file(p) for name, p in inputs.items() if p and Path(p).exists()
        },
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run.json", "w") as f:
        json.dump(echo, f, indent=2, sort_keys=True)
        f.write("\n")


def _thread_count(args) -> int:
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("SIXDGS_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _load_model(path) -> GaussianCloud:
    return normalize_scene(load_ply(path))


def _normalized_pose(pose: Pose, cloud: GaussianCloud) -> Pose:
    return Pose(
        rotation=pose.rotation,
        center=(pose.center - cloud.scene_offset) / cloud.scene_scale,
    )


def _load_views(transforms_path, cloud, features_dir=None, need_features=True):
    """Views from a transforms file: (name, pose, fmap-or-None, missing-path)."""
    k, frames = load_transforms(transforms_path)
    base = Path(transforms_path).parent
    views = []
    for name, pose, feature_path in frames:
        pose = _normalized_pose(pose, cloud)
        fpath = None
        if features_dir is not None and feature_path is not None:
            fpath = Path(features_dir) / Path(feature_path).name
        elif feature_path is not None:
            fpath = base / feature_path
        fmap = None
        missing = None
        if need_features:
            if fpath is not None and fpath.exists():
                fmap = load_features(fpath)
            else:
                missing = str(fpath) if fpath else f"{name} (no feature_path)"
        views.append((name, pose, fmap, missing))
    return k, views


def _prepare_rays(cloud, args, rays_path=None):
    if rays_path and Path(rays_path).exists():
        return read_rays(rays_path)
    g_cells = args.g_cells
    if getattr(args, "target_rays", None):
        g_cells = 2 * args.target_rays
    normals = estimate_normals(cloud, k=min(16, len(cloud) - 1))
    return generate_rays(cloud, g_cells, normals)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        k=args.k,
        layout=args.layout,
        train_views=args.train_views,
        test_views=args.test_views,
        width=args.width,
        height=args.height,
        camera_radius=args.camera_radius,
        camera_layout=args.camera_layout,
        coloring=args.coloring,
        seed=args.seed,
    )
    summary = generate_dataset(args.out, cfg)
    _write_run_echo(Path(args.out), "synth", args, {"model": summary["model"]})
    print(json.dumps(summary))
    return EXIT_OK


def cmd_rays(args) -> int:
    cloud = _load_model(args.model)
    rays = _prepare_rays(cloud, args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_rays(rays, out)
    if args.csv:
        write_rays_csv(rays, args.csv)
    _write_run_echo(out.parent, "rays", args, {"model": args.model})
    print(json.dumps({"rays": len(rays), "path": str(out)}))
    return EXIT_OK


def cmd_train(args) -> int:
    cloud = _load_model(args.model)
    _, views_raw = _load_views(args.transforms, cloud, args.features)
    missing = [m for _, _, _, m in views_raw if m]
    if missing:
        raise FormatError(f"missing feature files: {missing}")
    k, _ = load_transforms(args.transforms)

    cfg = TrainConfig(
        iterations=args.iters,
        ellipsoid_subsample=args.subsample,
        weight_decay=args.weight_decay,
        learning_rate=args.lr,
        lam=args.lam,
        seed=args.seed,
        mlp_width=args.mlp_width,
        num_frequencies=args.frequencies,
        g_cells=args.g_cells,
    )
    rays = _prepare_rays(cloud, args)
    views = [(fmap, pose, k) for _, pose, fmap, _ in views_raw]
    t0 = time.perf_counter()
    weights, losses = train_scorer(cloud, views, cfg, rays=rays, log_every=args.log_every)
    seconds = time.perf_counter() - t0

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_weights(
        weights,
        out / "weights.bin",
        out / "manifest.json",
        extra={"seed": cfg.seed, "config": cfg.to_dict(), "train_seconds": seconds},
    )
    write_rays(rays, out / "rays.bin")
    curve = np.stack([np.arange(len(losses)), losses], axis=1)
    np.savetxt(out / "loss_curve.csv", curve, delimiter=",",
               header="iteration,loss", comments="", fmt=["%d", "%.8g"])
    _write_run_echo(out, "train", args, {
        "model": args.model, "transforms": args.transforms,
    })
    print(json.dumps({
        "weights": str(out / "weights.bin"),
        "final_loss": float(losses[-1]),
        "seconds": seconds,
    }))
    return EXIT_OK


def _estimate_one(cloud, rays, weights, fmap, k, n_top):
    # Same composition as solver.estimate_pose, but the attention argmax is
    # only evaluated for the selected rays (the solve never reads the rest).
    v = featurize_rays(rays, weights)
    scores, row_stats = attention_scores(v, fmap, weights, return_row_stats=True)
    idx = top_ray_indices(rays.sources, scores, n_top)
    pixels = attention_argmax_pixels(v[idx], fmap, weights, row_stats)
    bundle = SelectedBundle(
        origins=rays.origins[idx],
        directions=rays.directions[idx],
        weights=np.asarray(scores, dtype=np.float64)[idx],
        sources=rays.sources[idx],
        matched_pixels=pixels,
    )
    center, residual = intersect_rays_wls(bundle)
    rotation = estimate_rotation(center, bundle, k)
    inliers = int((perpendicular_distances(bundle, center) <= 0.05).sum())
    return PoseEstimate(
        pose=Pose(rotation=rotation, center=center), residual=residual,
        inliers=inliers,
    )


def _estimate_oracle(cloud, rays, gt_pose, k, lam, n_top, fmap=None):
    m_pixels = fmap.pixel_count if fmap is not None else None
    scores = oracle_scorer(rays, gt_pose, lam, m_pixels=m_pixels)
    pixels, in_front = oracle_bindings(rays, gt_pose, k, fmap)
    scores = np.where(in_front, scores, 0.0)
    return estimate_pose(cloud, rays, scores, pixels, k, n_top=n_top)


def cmd_estimate(args) -> int:
    t0 = time.perf_counter()
    cloud = _load_model(args.model)
    k, frames = load_transforms(args.transforms)
    rays_path = args.rays
    weights = None
    if args.oracle:
        if args.view is None:
            raise ConfigError("--oracle needs --view for the ground-truth pose")
    else:
        if not args.weights:
            raise ConfigError("provide --weights or use --oracle")
        wdir = Path(args.weights)
        weights, _ = load_weights(wdir / "weights.bin", wdir / "manifest.json")
        if rays_path is None and (wdir / "rays.bin").exists():
            rays_path = wdir / "rays.bin"
    rays = _prepare_rays(cloud, args, rays_path=rays_path)

    fmap = load_features(args.features) if args.features else None
    gt = None
    if args.view is not None:
        if not (0 <= args.view < len(frames)):
            raise ConfigError(f"--view {args.view} outside 0..{len(frames) - 1}")
        gt = _normalized_pose(frames[args.view][1], cloud)

    if args.oracle:
        estimate = _estimate_oracle(cloud, rays, gt, k, args.lam, args.n_top, fmap)
    else:
        if fmap is None:
            raise ConfigError("estimation from an image needs --features")
        estimate = _estimate_one(cloud, rays, weights, fmap, k, args.n_top)
    seconds = time.perf_counter() - t0

    err = pose_error(estimate.pose, gt) if gt is not None else None
    text = pose_estimate_to_json(estimate, err)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    print(f"estimated in {seconds:.3f}s", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    cloud = _load_model(args.model)
    k, views = _load_views(args.transforms, cloud, args.features)
    if not views:
        raise ConfigError("no views in the test split")
    wdir = Path(args.weights) if args.weights else None
    weights = None
    rays_path = args.rays
    if not args.oracle:
        if wdir is None:
            raise ConfigError("provide --weights or use --oracle")
        weights, _ = load_weights(wdir / "weights.bin", wdir / "manifest.json")
        if rays_path is None and (wdir / "rays.bin").exists():
            rays_path = wdir / "rays.bin"
    rays = _prepare_rays(cloud, args, rays_path=rays_path)

    gaps = [m for _, _, fmap, m in views if fmap is None and m]
    usable = [(n, p, f) for n, p, f, m in views if f is not None or args.oracle]

    def run_view(item):
        name, pose, fmap = item
        start = time.perf_counter()
        if args.oracle:
            est = _estimate_oracle(cloud, rays, pose, k, args.lam, args.n_top, fmap)
        else:
            est = _estimate_one(cloud, rays, weights, fmap, k, args.n_top)
        err = pose_error(est.pose, pose)
        return {
            "view": name,
            "mae": err.mae,
            "mte": err.mte,
            "residual": est.residual,
            "seconds": time.perf_counter() - start,
        }

    t0 = time.perf_counter()
    workers = _thread_count(args)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_view, usable))
    else:
        rows = [run_view(item) for item in usable]
    total = time.perf_counter() - t0
    rows.sort(key=lambda r: r["view"])

    report = {
        "views": rows,
        "mean_mae": float(np.mean([r["mae"] for r in rows])) if rows else None,
        "mean_mte": float(np.mean([r["mte"] for r in rows])) if rows else None,
        "fps": len(rows) / total if total > 0 else None,
        "total_seconds": total,
        "threads": workers,
        "gaps": gaps,
        "config": {
            "n_top": args.n_top, "lam": args.lam, "g_cells": args.g_cells,
            "oracle": bool(args.oracle), "seed": args.seed,
        },
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    _plot_report(rows, out)
    _write_run_echo(out, "eval", args, {
        "model": args.model, "transforms": args.transforms,
        "weights": str(wdir / "weights.bin") if wdir else None,
    })
    print(json.dumps({
        "views": len(rows), "mean_mae": report["mean_mae"],
        "mean_mte": report["mean_mte"], "fps": report["fps"],
    }))
    return EXIT_OK


def _plot_report(rows, out_dir: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    mae = [r["mae"] for r in rows]
    mte = [r["mte"] for r in rows]

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(mae, mte, s=24)
    ax.set_xlabel("rotation error (deg)")
    ax.set_ylabel("center error (units)")
    ax.set_title("per-view pose errors")
    fig.tight_layout()
    fig.savefig(out_dir / "errors_scatter.svg")
    plt.close(fig)

    fig, axes = plt.subplots(1, 2, figsize=(8, 3.5))
    axes[0].hist(mae, bins=min(20, max(3, len(mae))))
    axes[0].set_xlabel("rotation error (deg)")
    axes[1].hist(mte, bins=min(20, max(3, len(mte))))
    axes[1].set_xlabel("center error (units)")
    fig.tight_layout()
    fig.savefig(out_dir / "errors_hist.svg")
    plt.close(fig)


def cmd_render(args) -> int:
    cloud = _load_model(args.model)
    k, frames = load_transforms(args.transforms)
    if not (0 <= args.view < len(frames)):
        raise ConfigError(f"--view {args.view} outside 0..{len(frames) - 1}")
    pose = _normalized_pose(frames[args.view][1], cloud)
    image = render_image(cloud, pose, k)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_image_png(image, args.out)
    print(json.dumps({"image": str(args.out), "view": args.view}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument plumbing


def _add_common(parser, *, model=False, weights=False, features=False,
                transforms=False, out=None):
    if model:
        parser.add_argument("--model", required=True, help="3DGS PLY model")
    if transforms:
        parser.add_argument("--transforms", required=True,
                            help="camera transforms JSON")
    if weights:
        parser.add_argument("--weights", help="directory written by 'train'")
    if features:
        parser.add_argument("--features", help=features)
    if out:
        parser.add_argument("--out", required=True, help=out)
    parser.add_argument("--g-cells", type=int, default=100,
                        help="surface cells cast per ellipsoid")
    parser.add_argument("--target-rays", type=int,
                        help="post-filter ray budget (sets g-cells to 2x this)")
    parser.add_argument("--n-top", type=int, default=100,
                        help="rays kept for pose solving")
    parser.add_argument("--lambda", dest="lam", type=float, default=0.1,
                        help="score distance bandwidth")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int,
                        help="worker pool size (or SIXDGS_THREADS)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sixdgs",
        description="6DoF pose estimation from a single image and a 3DGS model",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a seeded synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=500)
    p.add_argument("--layout", default="sphere-shell",
                   choices=["sphere-shell", "box-cluster"])
    p.add_argument("--train-views", type=int, default=12)
    p.add_argument("--test-views", type=int, default=4)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--camera-radius", type=float, default=1.6)
    p.add_argument("--camera-layout", default="band", choices=["band", "ring"])
    p.add_argument("--coloring", default="position", choices=["position", "azimuth"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("rays", help="dump the ray table for a model")
    _add_common(p, model=True, out="output rays.bin path")
    p.add_argument("--csv", help="also dump a CSV copy")
    p.set_defaults(func=cmd_rays)

    p = sub.add_parser("train", help="train the ray scorer on a model's views")
    _add_common(p, model=True, transforms=True,
                features="directory overriding per-frame feature paths",
                out="output directory for weights + rays + loss curve")
    p.add_argument("--iters", type=int, default=1500)
    p.add_argument("--subsample", type=int, default=2000,
                   help="ellipsoids sampled per iteration")
    p.add_argument("--mlp-width", type=int, default=512)
    p.add_argument("--frequencies", type=int, default=6,
                   help="positional encoding frequency count")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=1e-3)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("estimate", help="estimate the pose of one image")
    _add_common(p, model=True, weights=True, transforms=True,
                features="6DFEAT file of the target image")
    p.add_argument("--rays", help="precomputed ray table (default: from weights dir)")
    p.add_argument("--view", type=int,
                   help="transforms frame index for ground-truth comparison")
    p.add_argument("--oracle", action="store_true",
                   help="score rays with the exact oracle instead of weights")
    p.add_argument("--out", help="write the pose JSON here too")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("eval", help="evaluate pose errors over a test split")
    _add_common(p, model=True, weights=True, transforms=True,
                features="directory overriding per-frame feature paths",
                out="output directory for report + plots")
    p.add_argument("--rays", help="precomputed ray table (default: from weights dir)")
    p.add_argument("--oracle", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render the model from a known camera")
    p.add_argument("--model", required=True)
    p.add_argument("--transforms", required=True)
    p.add_argument("--view", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingError as exc:
        _report_error("training_failure", exc, EXIT_TRAINING)
        return EXIT_TRAINING
    except DegenerateGeometryError as exc:
        _report_error("degenerate_geometry", exc, EXIT_DEGENERATE)
        return EXIT_DEGENERATE
    except (FormatError, ConfigError, FileNotFoundError, ValueError, OSError) as exc:
        _report_error("bad_input", exc, EXIT_BAD_INPUT)
        return EXIT_BAD_INPUT


def _report_error(code_name: str, exc: Exception, code: int) -> None:
    print(json.dumps({"error": code_name, "exit_code": code, "detail": str(exc)}))
    print(f"error: {exc}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
