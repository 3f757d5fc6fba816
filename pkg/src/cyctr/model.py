"""Few-shot segmentation model: a small conv backbone, prior map, prototype
fusion, a stack of transformer encoders over the query tokens, and a conv
segmentation head.

Images are channels-last float arrays (H, W, 3); the backbone downsamples by
4, so every encoder works on an (H/4, W/4) token grid.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numtensor as nt
from .attention import (
    AttentionParams,
    AttentionStats,
    PredictedOffsetAttention,
    cycle_consistent_attention,
    multi_head_attention,
)
from .numtensor import Conv2d, LayerNorm, Linear, Module, Tensor
from .numtensor import functional as F
from .sampling import SampledSupport, TokenSequence, flatten_grid, make_rng, mask_guided_sample, unflatten

log = logging.getLogger(__name__)

VARIANTS = ("baseline", "self_only", "vanilla_cross", "cyctr_pred_cross", "cyctr_fg_only", "cyctr")
CROSS_KIND = {
    "baseline": None,
    "self_only": None,
    "vanilla_cross": "vanilla",
    "cyctr_pred_cross": "pred",
    "cyctr_fg_only": "cycle",
    "cyctr": "cycle",
}
INIT_STREAM = 7


@dataclass
class CyCTRConfig:
    L: int = 2
    d: int = 32
    h: int = 1
    N_s: int = 32
    P: int = 9
    mlp_ratio: int = 3
    head_channels: int = 32
    backbone_widths: Tuple[int, int] = (32, 64)

    def __post_init__(self):
        self.backbone_widths = tuple(self.backbone_widths)
        if self.L < 1:
            raise ValueError("L must be at least 1")
        if self.d % (4 * self.h):
            raise ValueError(f"d={self.d} must be divisible by 4*h={4 * self.h}")
        if self.mlp_ratio < 1:
            raise ValueError("mlp_ratio must be at least 1")
        if self.N_s < 2 or self.P < 1 or self.head_channels < 1:
            raise ValueError("N_s >= 2, P >= 1 and head_channels >= 1 are required")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["backbone_widths"] = list(self.backbone_widths)
        return out


@dataclass
class ModelOutput:
    logits: Tensor  # (H, W, 2): background, foreground
    prior: Tensor  # (h, w) in [0, 1]
    diagnostics: Dict[str, object] = field(default_factory=dict)

    def prediction(self) -> np.ndarray:
        return (self.logits.data[..., 1] > self.logits.data[..., 0]).astype(np.uint8)


# backbone ------------------------------------------------------------------

class Extractor(Module):
    """Shared stride-4 conv stack; ``mid`` and ``high`` are 1x1 projections of its last two layers."""

    def __init__(self, d: int, widths: Tuple[int, int], rng: np.random.Generator):
        w1, w2 = widths
        self.conv1 = Conv2d(3, w1, 3, rng, stride=2, padding=1)
        self.conv2 = Conv2d(w1, w2, 3, rng, stride=2, padding=1)
        self.conv3 = Conv2d(w2, d, 3, rng, stride=1, padding=1)
        self.mid_proj = Conv2d(w2, d, 1, rng)
        self.high_proj = Conv2d(d, d, 1, rng)

    def __call__(self, image) -> Tuple[Tensor, Tensor]:
        image = nt.as_tensor(image)
        if image.ndim != 3 or image.shape[0] % 4 or image.shape[1] % 4:
            raise nt.DimensionError(f"image {image.shape} must be (H, W, C) with H and W divisible by 4")
        x = nt.relu(self.conv1(image))
        x2 = nt.relu(self.conv2(x))
        x3 = nt.relu(self.conv3(x2))
        return self.mid_proj(x2), self.high_proj(x3)


def extract_features(extractor: Extractor, image) -> Tuple[Tensor, Tensor]:
    return extractor(image)


def downsample_mask(mask: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Binary mask at feature resolution: cells at least half covered are foreground.

    A non-empty mask never vanishes; if no cell reaches half coverage the
    best-covered cells are kept.
    """
    mask = np.asarray(mask, dtype=np.float64)
    h, w = size
    H, W = mask.shape
    if H % h or W % w:
        raise nt.DimensionError(f"mask {mask.shape} does not tile into {size}")
    frac = mask.reshape(h, H // h, w, W // w).mean(axis=(1, 3))
    out = frac >= 0.5
    if not out.any() and frac.max() > 0:
        out = frac == frac.max()
    return out.astype(np.uint8)


# prior and fusion ----------------------------------------------------------

def _foreground_tokens(support_seqs: Sequence[Tensor], masks: Sequence[np.ndarray]) -> Optional[Tensor]:
    parts = []
    for seq, m in zip(support_seqs, masks):
        idx = np.flatnonzero(np.asarray(m).reshape(-1))
        if idx.size:
            parts.append(seq[idx])
    if not parts:
        return None
    return parts[0] if len(parts) == 1 else nt.concat(parts, axis=0)


def prior_similarity(query_high: Tensor, support_high: Sequence[Tensor], masks: Sequence[np.ndarray]) -> Optional[Tensor]:
    """Per query token, the max cosine similarity to any foreground support token."""
    fg = _foreground_tokens(support_high, masks)
    if fg is None:
        return None
    sims = F.l2_normalize(query_high) @ F.l2_normalize(fg).T
    return nt.tmax(sims, axis=1)


def prior_map(
    query_high: Tensor, support_high: Sequence[Tensor], masks: Sequence[np.ndarray], grid: Tuple[int, int]
) -> Tensor:
    """Min-max normalised similarity map (h, w); all zeros without foreground or for a constant map."""
    h, w = grid
    sim = prior_similarity(query_high, support_high, masks)
    if sim is None:
        return Tensor(np.zeros((h, w)))
    lo, hi = nt.tmin(sim, axis=0), nt.tmax(sim, axis=0)
    nt.note_branch(np.array(hi.data > lo.data), "prior_constant")
    if not hi.data > lo.data:
        return Tensor(np.zeros((h, w)))
    return ((sim - lo) / (hi - lo)).reshape(h, w)


def masked_prototype(support_mid: Sequence[Tensor], masks: Sequence[np.ndarray]) -> Tensor:
    """Average of foreground support features over all shots, shape (1, d)."""
    d = support_mid[0].shape[-1]
    fg = _foreground_tokens(support_mid, masks)
    if fg is None:
        log.warning("support masks have no foreground at feature resolution; prototype is zero")
        return Tensor(np.zeros((1, d)))
    return fg.mean(axis=0, keepdims=True)


class Fusion(Module):
    """1x1 projection of [feature | prototype | prior] back to width d (as a per-token linear map).

    A shared LayerNorm follows, so query and support tokens enter the
    encoder on the same scale as the normalised query tokens it produces.
    """

    def __init__(self, d: int, rng: np.random.Generator):
        self.proj = Linear(2 * d + 1, d, rng)
        self.norm = LayerNorm(d)

    def __call__(self, feature: Tensor, prototype: Tensor, prior: Optional[Tensor]) -> Tensor:
        n, d = feature.shape
        proto = prototype + Tensor(np.zeros((n, d)))
        extra = Tensor(np.zeros((n, 1))) if prior is None else prior.reshape(n, 1)
        return self.norm(self.proj(nt.concat([feature, proto, extra], axis=1)))


def fuse_inputs(
    fusion: Fusion,
    query_mid: Tensor,
    support_mid: Sequence[Tensor],
    support_masks: Sequence[np.ndarray],
    prior: Tensor,
) -> Tuple[TokenSequence, List[TokenSequence]]:
    """Inputs are (h, w, d) maps and feature-resolution masks; outputs are token sequences.

    The prior goes into the query only; the support gets a zero prior channel.
    """
    h, w, d = query_mid.shape
    q = flatten_grid(query_mid).tokens
    s = [flatten_grid(m).tokens for m in support_mid]
    proto = masked_prototype(s, support_masks)
    query_seq = TokenSequence(fusion(q, proto, prior), h, w)
    support_seqs = [TokenSequence(fusion(t, proto, None), h, w) for t in s]
    return query_seq, support_seqs


# encoder -------------------------------------------------------------------

class MLP(Module):
    def __init__(self, d: int, ratio: int, rng: np.random.Generator):
        self.fc1 = Linear(d, ratio * d, rng)
        self.fc2 = Linear(ratio * d, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nt.relu(self.fc1(x)))


class EncoderLayer(Module):
    """Self-alignment block, then (optionally) a cross-alignment block.

    Each attention and MLP sub-layer is followed by residual add and LayerNorm.
    ``cross`` is one of None, "cycle", "vanilla" or "pred".
    """

    def __init__(self, cfg: CyCTRConfig, rng: np.random.Generator, cross: Optional[str]):
        d = cfg.d
        self.cross = cross
        self.h = cfg.h
        self.self_attn = PredictedOffsetAttention(d, cfg.P, rng)
        self.norm1 = LayerNorm(d)
        self.mlp1 = MLP(d, cfg.mlp_ratio, rng)
        self.norm2 = LayerNorm(d)
        if cross is not None:
            if cross == "pred":
                self.cross_attn = PredictedOffsetAttention(d, cfg.P, rng)
            elif cross in ("cycle", "vanilla"):
                self.cross_attn = AttentionParams(d, rng)
            else:
                raise ValueError(f"unknown cross-attention kind {cross!r}")
            self.norm3 = LayerNorm(d)
            self.mlp2 = MLP(d, cfg.mlp_ratio, rng)
            self.norm4 = LayerNorm(d)

    def _cross(self, z: TokenSequence, support: Optional[SampledSupport], support_grids, stats) -> Tensor:
        if self.cross == "pred":
            return self.cross_attn(z, values_from=support_grids).tokens
        if self.cross == "vanilla":
            kv = TokenSequence(support.tokens)
            return multi_head_attention(z, kv, self.cross_attn, h=self.h).tokens
        return cycle_consistent_attention(z, support, self.cross_attn, h=self.h, stats=stats).tokens

    def __call__(self, z: TokenSequence, support=None, support_grids=None, stats=None) -> TokenSequence:
        x = self.norm1(z.tokens + self.self_attn(z).tokens)
        x = self.norm2(x + self.mlp1(x))
        if self.cross is not None:
            zq = TokenSequence(x, z.height, z.width)
            x = self.norm3(x + self._cross(zq, support, support_grids, stats))
            x = self.norm4(x + self.mlp2(x))
        return TokenSequence(x, z.height, z.width)


def encoder_forward(
    query_seq: TokenSequence,
    sampled_support: Optional[SampledSupport],
    layers: Sequence[EncoderLayer],
    support_grids: Optional[Sequence[TokenSequence]] = None,
    stats: Optional[AttentionStats] = None,
) -> TokenSequence:
    """Run the encoder stack; an empty stack is the identity."""
    z = query_seq
    for layer in layers:
        z = layer(z, sampled_support, support_grids, stats)
    return z


class ResidualBlock(Module):
    def __init__(self, d: int, rng: np.random.Generator):
        self.conv1 = Conv2d(d, d, 3, rng, padding=1)
        self.conv2 = Conv2d(d, d, 3, rng, padding=1)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.conv2(nt.relu(self.conv1(x)))


class BaselineEncoder(Module):
    def __init__(self, d: int, rng: np.random.Generator):
        self.blocks = [ResidualBlock(d, rng), ResidualBlock(d, rng)]

    def __call__(self, seq: TokenSequence) -> TokenSequence:
        x = unflatten(seq)
        for block in self.blocks:
            x = block(x)
        return flatten_grid(x)


def baseline_encoder(encoder: BaselineEncoder, query_seq: TokenSequence) -> TokenSequence:
    return encoder(query_seq)


# head and loss -------------------------------------------------------------

class SegmentationHead(Module):
    def __init__(self, d: int, channels: int, rng: np.random.Generator):
        self.conv = Conv2d(d, channels, 3, rng, padding=1)
        self.cls = Conv2d(channels, 2, 1, rng)

    def __call__(self, seq: TokenSequence, out_size: Tuple[int, int]) -> Tensor:
        x = self.cls(nt.relu(self.conv(unflatten(seq))))
        return F.resize_bilinear(x, out_size)


def segmentation_head(head: SegmentationHead, seq: TokenSequence, out_size: Tuple[int, int]) -> Tensor:
    return head(seq, out_size)


DICE_EPS = 1.0


def foreground_probability(logits: Tensor) -> Tensor:
    H, W, _ = logits.shape
    return F.softmax_rows(logits.reshape(H * W, 2))[:, 1].reshape(H, W)


def dice_loss(logits: Tensor, target, eps: float = DICE_EPS) -> Tensor:
    """1 - (2 sum(p y) + eps) / (sum(p) + sum(y) + eps) with p the softmax foreground probability."""
    y = np.asarray(target, dtype=np.float64)
    if logits.shape[:2] != y.shape:
        raise nt.DimensionError(f"logits {logits.shape} and target {y.shape} differ")
    p = foreground_probability(logits)
    inter = (p * Tensor(y)).sum()
    return 1.0 - (2.0 * inter + eps) / (p.sum() + float(y.sum()) + eps)


# full model ----------------------------------------------------------------

class CyCTRModel(Module):
    def __init__(self, cfg: CyCTRConfig, variant: str = "cyctr", seed: int = 0):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.cfg = cfg
        self.variant = variant
        rng = make_rng(seed, INIT_STREAM)
        d = cfg.d
        self.extractor = Extractor(d, cfg.backbone_widths, rng)
        self.fusion = Fusion(d, rng)
        if variant == "baseline":
            self.baseline = BaselineEncoder(d, rng)
            self.layers = []
        else:
            self.layers = [EncoderLayer(cfg, rng, CROSS_KIND[variant]) for _ in range(cfg.L)]
        self.head = SegmentationHead(d, cfg.head_channels, rng)

    @property
    def cross_kind(self) -> Optional[str]:
        return CROSS_KIND[self.variant]

    def encode_inputs(self, support_images, support_masks, query_image, sample_seed: int = 0) -> "EncoderInputs":
        """Backbone, prior map, fusion and support sampling: everything before the encoder stack."""
        if len(support_images) == 0 or len(support_images) != len(support_masks):
            raise ValueError("need one mask per support image and at least one shot")
        q_mid, q_high = self.extractor(query_image)
        s_feats = [self.extractor(img) for img in support_images]
        h, w = q_mid.shape[:2]
        masks = [downsample_mask(m, (h, w)) for m in support_masks]
        prior = prior_map(
            flatten_grid(q_high).tokens, [flatten_grid(hi).tokens for _, hi in s_feats], masks, (h, w)
        )
        query_seq, support_seqs = fuse_inputs(self.fusion, q_mid, [mid for mid, _ in s_feats], masks, prior)
        support = None
        if self.cross_kind in ("cycle", "vanilla"):
            support = mask_guided_sample(
                [s.tokens for s in support_seqs],
                masks,
                self.cfg.N_s,
                sample_seed,
                foreground_only=self.variant == "cyctr_fg_only",
            )
        return EncoderInputs(query_seq, support_seqs, support, prior)

    def __call__(self, support_images, support_masks, query_image, sample_seed: int = 0) -> ModelOutput:
        H, W = np.asarray(query_image).shape[:2]
        inputs = self.encode_inputs(support_images, support_masks, query_image, sample_seed)
        stats = AttentionStats()
        diagnostics: Dict[str, object] = {"variant": self.variant}
        if self.variant == "baseline":
            z = self.baseline(inputs.query_seq)
        else:
            support = inputs.support
            if support is not None:
                diagnostics["n_support"] = len(support)
                diagnostics["n_support_fg"] = int(support.labels.sum())
                diagnostics["support_short"] = support.short
            z = encoder_forward(inputs.query_seq, support, self.layers, inputs.support_seqs, stats)
        logits = self.head(z, (H, W))
        diagnostics.update(
            fallback_rows=stats.fallback_rows,
            fallback_calls=stats.fallback_calls,
            consistent_count=list(stats.consistent_counts),
        )
        return ModelOutput(logits, inputs.prior, diagnostics)


@dataclass
class EncoderInputs:
    query_seq: TokenSequence
    support_seqs: List[TokenSequence]
    support: Optional[SampledSupport]
    prior: Tensor


def build_model(cfg: CyCTRConfig, variant: str = "cyctr", seed: int = 0) -> CyCTRModel:
    return CyCTRModel(cfg, variant, seed)
