"""Procedural few-shot segmentation episodes built from textured 2-D shapes.

Each class pairs one shape family with its own hue and texture. An image
holds one target instance over a noisy background, plus up to two
distractor instances of other classes from the same role; the mask covers
the target only.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from ..sampling import make_rng
from .splits import SplitSpec

FAMILIES = (
    "ellipse", "rectangle", "triangle", "ring", "cross", "star",
    "diamond", "crescent", "hexagon", "ell", "half_disk", "blob",
)
TEXTURES = ("flat", "stripes", "checker", "dots")
ROLE_STREAM = {"train": 1, "test": 2}


@dataclass(frozen=True)
class ShapeClassParams:
    class_id: int
    family: str
    color: Tuple[float, float, float]
    texture: str
    texture_freq: float
    scale: Tuple[float, float] = (0.2, 0.32)  # radius as a fraction of the image side
    aspect: Tuple[float, float] = (0.75, 1.0)
    max_distractors: int = 2


@dataclass
class Episode:
    supports: List[Tuple[np.ndarray, np.ndarray]]
    query_image: np.ndarray
    query_mask: Optional[np.ndarray]
    class_id: int

    @property
    def K(self) -> int:
        return len(self.supports)

    @property
    def support_images(self) -> List[np.ndarray]:
        return [img for img, _ in self.supports]

    @property
    def support_masks(self) -> List[np.ndarray]:
        return [m for _, m in self.supports]

    def without_query_mask(self) -> "Episode":
        return Episode(self.supports, self.query_image, None, self.class_id)


def class_params(class_id: int, n_classes: int = 12) -> ShapeClassParams:
    if not 0 <= class_id < len(FAMILIES) * 8:
        raise ValueError(f"class id {class_id} out of range")
    hue = (class_id * 5 % n_classes) / n_classes  # spread neighbouring ids around the wheel
    r, g, b = colorsys.hsv_to_rgb(hue, 0.75, 0.9)
    return ShapeClassParams(
        class_id=class_id,
        family=FAMILIES[class_id % len(FAMILIES)],
        color=(r, g, b),
        texture=TEXTURES[class_id % len(TEXTURES)],
        texture_freq=1.2 + 0.35 * (class_id % 3),
    )


def shape_mask(family: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Inside-test in the unit frame of a shape (radius 1, centred at the origin)."""
    r = np.hypot(u, v)
    theta = np.arctan2(v, u)
    if family == "ellipse":
        return r <= 1.0
    if family == "rectangle":
        return (np.abs(u) <= 0.95) & (np.abs(v) <= 0.6)
    if family == "triangle":
        inside = np.ones_like(u, dtype=bool)
        for ang in (np.pi / 2, np.pi / 2 + 2 * np.pi / 3, np.pi / 2 + 4 * np.pi / 3):
            inside &= u * np.cos(ang) + v * np.sin(ang) >= -0.5
        return inside
    if family == "ring":
        return (r <= 1.0) & (r >= 0.55)
    if family == "cross":
        return ((np.abs(u) <= 0.32) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= 0.32) & (np.abs(u) <= 1.0))
    if family == "star":
        return r <= 0.55 + 0.45 * np.cos(5 * theta)
    if family == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    if family == "crescent":
        return (r <= 1.0) & (np.hypot(u - 0.45, v) >= 0.75)
    if family == "hexagon":
        inside = np.ones_like(u, dtype=bool)
        for ang in (0.0, np.pi / 3, 2 * np.pi / 3):
            inside &= np.abs(u * np.cos(ang) + v * np.sin(ang)) <= 0.87
        return inside
    if family == "ell":
        return ((u >= -0.9) & (u <= -0.25) & (np.abs(v) <= 0.9)) | ((np.abs(u) <= 0.9) & (v >= 0.25) & (v <= 0.9))
    if family == "half_disk":
        return (r <= 1.0) & (v >= -0.15)
    if family == "blob":
        return r <= 0.72 + 0.28 * np.sin(3 * theta + 0.7)
    raise ValueError(f"unknown shape family {family!r}")


def _texture(params: ShapeClassParams, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    f = params.texture_freq * np.pi
    if params.texture == "flat":
        return np.zeros_like(u)
    if params.texture == "stripes":
        return np.sign(np.sin(f * 2 * u))
    if params.texture == "checker":
        return np.sign(np.sin(f * u) * np.sin(f * v))
    return np.where(np.hypot((u * f / np.pi) % 1 - 0.5, (v * f / np.pi) % 1 - 0.5) < 0.3, 1.0, -1.0)


def _background(rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    base = rng.uniform(0.25, 0.75, size=3) * 0.6 + 0.2
    coarse = rng.normal(0.0, 0.12, size=(H // 8 + 2, W // 8 + 2, 3))
    ys = np.linspace(0, coarse.shape[0] - 1.001, H)
    xs = np.linspace(0, coarse.shape[1] - 1.001, W)
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None, None], (xs - x0)[None, :, None]
    smooth = (
        coarse[y0][:, x0] * (1 - fy) * (1 - fx)
        + coarse[y0 + 1][:, x0] * fy * (1 - fx)
        + coarse[y0][:, x0 + 1] * (1 - fy) * fx
        + coarse[y0 + 1][:, x0 + 1] * fy * fx
    )
    return base + smooth + rng.normal(0.0, 0.04, size=(H, W, 3))


def render_instance(image: np.ndarray, params: ShapeClassParams, rng: np.random.Generator) -> np.ndarray:
    """Paint one randomly placed instance into ``image`` in place; return its mask."""
    H, W, _ = image.shape
    side = min(H, W)
    radius = rng.uniform(*params.scale) * side
    margin = 0.6 * radius
    cy, cx = rng.uniform(margin, H - margin), rng.uniform(margin, W - margin)
    angle = rng.uniform(0, 2 * np.pi)
    aspect = rng.uniform(*params.aspect)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    u = (dx * np.cos(angle) + dy * np.sin(angle)) / (radius * aspect)
    v = (-dx * np.sin(angle) + dy * np.cos(angle)) / radius
    mask = shape_mask(params.family, u, v)
    color = np.clip(np.asarray(params.color) + rng.normal(0.0, 0.05, size=3), 0.0, 1.0)
    shade = 1.0 + 0.18 * _texture(params, u, v)
    paint = color[None, None, :] * shade[..., None] + rng.normal(0.0, 0.03, size=(H, W, 3))
    image[mask] = paint[mask]
    return mask


def render_image(
    target: ShapeClassParams, distractor_pool: Tuple[int, ...], rng: np.random.Generator, H: int, W: int
) -> Tuple[np.ndarray, np.ndarray]:
    image = _background(rng, H, W)
    n_distractors = int(rng.integers(0, target.max_distractors + 1)) if distractor_pool else 0
    for _ in range(n_distractors):
        render_instance(image, class_params(int(rng.choice(distractor_pool))), rng)
    mask = render_instance(image, target, rng)
    return np.clip(image, 0.0, 1.0), mask.astype(np.uint8)


def generate_synthetic_episode(split: SplitSpec, role: str, K: int, H: int, W: int, seed: int) -> Episode:
    """Deterministic K-shot episode for a class drawn from the role's class list."""
    classes = split.classes_for(role)
    if not classes:
        raise ValueError(f"no {role} classes in split {split.split_index}")
    if K < 1:
        raise ValueError("K must be at least 1")
    rng = make_rng(seed, ROLE_STREAM[role])
    class_id = int(rng.choice(classes))
    params = class_params(class_id, len(split.all_classes))
    pool = tuple(c for c in classes if c != class_id)
    supports = [render_image(params, pool, rng, H, W) for _ in range(K)]
    query_image, query_mask = render_image(params, pool, rng, H, W)
    return Episode(supports, query_image, query_mask, class_id)
