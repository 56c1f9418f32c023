"""Image-to-descriptor sidecar feeding the pose estimator via 6DFEAT files."""

__version__ = "0.1.0"

from .feat_io import read_feature_file, write_feature_file
from .backbone import VARIANTS, load_backbone
from .extract import ExtractJob, extract, selfcheck

__all__ = [
    "ExtractJob",
    "VARIANTS",
    "extract",
    "load_backbone",
    "read_feature_file",
    "selfcheck",
    "write_feature_file",
]
