"""The 6DFEAT byte layout, written and re-read here without touching the
consumer package: magic "6DFEAT1\\0", five u32 (grid_w, grid_h, channels,
image_w, image_h), then grid_h*grid_w*channels float32, row-major (y, x, c),
little-endian throughout."""

import struct

import numpy as np

MAGIC = b"6DFEAT1\x00"


def write_feature_file(path, grid, image_width, image_height):
    grid = np.ascontiguousarray(grid, dtype="<f4")
    if grid.ndim != 3:
        raise ValueError("feature grid must be (grid_h, grid_w, channels)")
    grid_h, grid_w, channels = grid.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<5I", grid_w, grid_h, channels,
                            image_width, image_height))
        f.write(grid.tobytes())


def read_feature_file(path):
    """Minimal independent parser used by the selfcheck."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        grid_w, grid_h, channels, image_w, image_h = struct.unpack("<5I", f.read(20))
        body = f.read()
    expected = grid_w * grid_h * channels * 4
    if len(body) != expected:
        raise ValueError(f"expected {expected} data bytes, got {len(body)}")
    grid = np.frombuffer(body, dtype="<f4").reshape(grid_h, grid_w, channels)
    return grid, (image_w, image_h)
