"""Mask-guided sparse sampling of support tokens and grid flattening."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .numtensor import Tensor, concat, reshape


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based Philox generator keyed by ``seed`` and a stream path.

    Distinct stream paths give independent generators, so callers can split
    one seed into per-purpose streams without sharing state.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


@dataclass
class TokenSequence:
    """Tokens (N, d) plus the grid they were flattened from (0, 0 for non-grid sequences)."""

    tokens: Tensor
    height: int = 0
    width: int = 0

    def __post_init__(self):
        if self.height * self.width and self.height * self.width != self.tokens.shape[0]:
            raise ValueError(f"grid {self.height}x{self.width} does not hold {self.tokens.shape[0]} tokens")

    @property
    def is_grid(self) -> bool:
        return self.height * self.width > 0

    def __len__(self) -> int:
        return self.tokens.shape[0]


@dataclass
class SampledSupport:
    tokens: Tensor
    labels: np.ndarray
    sources: List[Tuple[int, int, int]]
    short: bool = False

    def __len__(self) -> int:
        return len(self.labels)


def flatten_grid(features: Tensor) -> TokenSequence:
    """Row-major (H, W, d) -> (H*W, d); token t sits at (t // W, t % W)."""
    H, W, d = features.shape
    return TokenSequence(reshape(features, (H * W, d)), H, W)


def unflatten(seq: TokenSequence) -> Tensor:
    if not seq.is_grid:
        raise ValueError("sequence has no grid to unflatten into")
    return reshape(seq.tokens, (seq.height, seq.width, seq.tokens.shape[1]))


def token_position(t: int, width: int) -> Tuple[int, int]:
    return t // width, t % width


def mask_guided_sample(
    features: Sequence[Tensor],
    masks: Sequence[np.ndarray],
    n_samples: int,
    seed: int,
    foreground_only: bool = False,
) -> SampledSupport:
    """Draw support tokens from the pooled K shots, at most half foreground.

    ``features[k]`` is (H*W, d) for shot k and ``masks[k]`` its (H, W) binary
    mask. ``min(n_samples // 2, |fg|)`` foreground tokens are drawn uniformly
    without replacement across all shots, then the remainder from the pooled
    background. A stratum that runs dry is not backfilled; ``short`` is set
    when fewer than ``n_samples`` tokens come back. With
    ``foreground_only`` the whole budget goes to foreground.
    """
    if len(features) == 0:
        raise ValueError("empty support set")
    if len(features) != len(masks):
        raise ValueError(f"{len(features)} feature maps but {len(masks)} masks")
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    flat_masks, widths = [], []
    for k, (feat, mask) in enumerate(zip(features, masks)):
        mask = np.asarray(mask)
        if mask.ndim != 2 or mask.size != feat.shape[0]:
            raise ValueError(f"shot {k}: mask {mask.shape} does not match {feat.shape[0]} feature tokens")
        flat_masks.append(mask.reshape(-1).astype(bool))
        widths.append(mask.shape[1])
    labels_all = np.concatenate(flat_masks)
    offsets = np.cumsum([0] + [m.size for m in flat_masks])

    # candidates come out of nonzero in ascending pooled index: a canonical order
    fg = np.flatnonzero(labels_all)
    bg = np.flatnonzero(~labels_all)
    rng = make_rng(seed)
    fg_budget = n_samples if foreground_only else n_samples // 2
    n_fg = min(fg_budget, fg.size)
    n_bg = 0 if foreground_only else min(n_samples - n_fg, bg.size)
    picked_fg = np.sort(rng.choice(fg, size=n_fg, replace=False)) if n_fg else fg[:0]
    picked_bg = np.sort(rng.choice(bg, size=n_bg, replace=False)) if n_bg else bg[:0]
    picked = np.concatenate([picked_fg, picked_bg])
    if picked.size == 0:
        raise ValueError("no support tokens available to sample")

    shots = np.searchsorted(offsets, picked, side="right") - 1
    sources = []
    for g, k in zip(picked, shots):
        local = int(g - offsets[k])
        sources.append((int(k),) + token_position(local, widths[k]))
    pooled = features[0] if len(features) == 1 else concat(list(features), axis=0)
    return SampledSupport(
        tokens=pooled[picked],
        labels=labels_all[picked].astype(np.int64),
        sources=sources,
        short=picked.size < n_samples,
    )
