"""Batch extraction: images in, one 6DFEAT patch-token grid per image out."""

import logging
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .backbone import IMAGE_MEAN, IMAGE_STD, PATCH_SIZE, load_backbone
from .feat_io import read_feature_file, write_feature_file

logger = logging.getLogger(__name__)


@dataclass
class ExtractJob:
    images: list
    out_dir: Path
    variant: str = "small"
    short_side: int = 448
    seed: int = 0

    def __post_init__(self):
        if self.short_side % PATCH_SIZE != 0:
            raise ValueError(
                f"short side {self.short_side} must be a multiple of the "
                f"patch stride {PATCH_SIZE}"
            )
        self.out_dir = Path(self.out_dir)
        self.images = [Path(p) for p in self.images]


def _resize_for_patches(image: Image.Image, short_side: int) -> Image.Image:
    w, h = image.size
    scale = short_side / min(w, h)
    # both sides must land on the patch grid
    new_w = max(PATCH_SIZE, round(w * scale / PATCH_SIZE) * PATCH_SIZE)
    new_h = max(PATCH_SIZE, round(h * scale / PATCH_SIZE) * PATCH_SIZE)
    return image.resize((new_w, new_h), Image.BILINEAR)


def _to_tensor(image: Image.Image) -> torch.Tensor:
    arr = np.asarray(image, dtype=np.float32) / 255.0
    arr = (arr - np.array(IMAGE_MEAN, dtype=np.float32)) / np.array(
        IMAGE_STD, dtype=np.float32
    )
    return torch.from_numpy(arr.transpose(2, 0, 1))[None]


def extract_image(model, image: Image.Image, short_side: int) -> np.ndarray:
    """Patch-token grid (grid_h, grid_w, C) for one image."""
    resized = _resize_for_patches(image.convert("RGB"), short_side)
    grid_w = resized.size[0] // PATCH_SIZE
    grid_h = resized.size[1] // PATCH_SIZE
    with torch.no_grad():
        tokens = model(pixel_values=_to_tensor(resized)).last_hidden_state
    patches = tokens[0, 1:]  # drop the class token
    grid = patches.reshape(grid_h, grid_w, -1).numpy().astype(np.float32)
    if not np.isfinite(grid).all():
        raise ValueError("backbone produced non-finite features")
    return grid


def extract(job: ExtractJob) -> int:
    """Run the job; returns the number of images that failed to decode."""
    job.out_dir.mkdir(parents=True, exist_ok=True)
    model, channels, pretrained = load_backbone(job.variant, seed=job.seed)
    logger.info(
        "backbone %s (C=%d, pretrained=%s), short side %d",
        job.variant, channels, pretrained, job.short_side,
    )
    failures = 0
    for path in job.images:
        try:
            image = Image.open(path)
            original_size = image.size
        except Exception as exc:
            logger.error("skipping undecodable image %s: %s", path, exc)
            failures += 1
            continue
        grid = extract_image(model, image, job.short_side)
        out_path = job.out_dir / (path.stem + ".feat")
        write_feature_file(out_path, grid, original_size[0], original_size[1])
        logger.info("%s -> %s grid %dx%dx%d", path.name, out_path.name,
                    grid.shape[1], grid.shape[0], grid.shape[2])
    return failures


def selfcheck(variant: str = "small", short_side: int = 224) -> bool:
    """Round-trip a tiny synthetic image and verify the byte layout exactly."""
    rng = np.random.default_rng(0)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        img_path = tmp / "synthetic.png"
        Image.fromarray(
            rng.integers(0, 255, size=(96, 128, 3), dtype=np.uint8)
        ).save(img_path)
        job = ExtractJob(
            images=[img_path], out_dir=tmp / "out",
            variant=variant, short_side=short_side,
        )
        failures = extract(job)
        if failures:
            return False
        feat_path = tmp / "out" / "synthetic.feat"
        grid, (w, h) = read_feature_file(feat_path)
        expected_h = short_side // PATCH_SIZE
        if (w, h) != (128, 96):
            logger.error("header size mismatch: %s", (w, h))
            return False
        if grid.shape[0] != expected_h or grid.shape[2] < 1:
            logger.error("grid shape mismatch: %s", grid.shape)
            return False
        # byte-exact: re-serialize the parsed grid and compare files
        again = tmp / "again.feat"
        write_feature_file(again, grid, w, h)
        if again.read_bytes() != feat_path.read_bytes():
            logger.error("layout round-trip is not byte-exact")
            return False
        if not np.isfinite(grid).all():
            return False
    return True
