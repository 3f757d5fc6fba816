from .io import EpisodeFormatError, read_episode, write_episode
from .metrics import IoUAccumulator, accumulate, fb_iou, mean_iou
from .splits import SplitSpec, all_folds, make_splits
from .synthetic import (
    FAMILIES,
    Episode,
    ShapeClassParams,
    class_params,
    generate_synthetic_episode,
    render_image,
    shape_mask,
)

__all__ = [
    "Episode",
    "EpisodeFormatError",
    "FAMILIES",
    "IoUAccumulator",
    "ShapeClassParams",
    "SplitSpec",
    "accumulate",
    "all_folds",
    "class_params",
    "fb_iou",
    "generate_synthetic_episode",
    "make_splits",
    "mean_iou",
    "read_episode",
    "render_image",
    "shape_mask",
    "write_episode",
]
