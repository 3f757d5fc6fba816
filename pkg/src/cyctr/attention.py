"""Scaled dot-product / multi-head attention, cycle-consistent attention,
2-D sinusoidal positions and predicted-offset (deformable-style) attention."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import numtensor as nt
from .numtensor import Linear, Module, Tensor
from .numtensor import functional as F
from .sampling import SampledSupport, TokenSequence

log = logging.getLogger(__name__)

NEG_INF = -np.inf


@dataclass
class AttentionConfig:
    d: int
    h: int = 1
    P: int = 9

    def __post_init__(self):
        if self.d % self.h:
            raise ValueError(f"d={self.d} is not divisible by h={self.h}")


@dataclass
class CycleBias:
    bias: np.ndarray
    consistent_count: int


@dataclass
class AttentionStats:
    """Diagnostics gathered while attending; one instance per forward pass."""

    fallback_rows: int = 0
    fallback_calls: int = 0
    consistent_counts: List[int] = field(default_factory=list)


def affinity(Q: Tensor, K: Tensor) -> Tensor:
    if Q.shape[1] != K.shape[1]:
        raise nt.DimensionError(f"Query/Key widths differ: {Q.shape} vs {K.shape}")
    return (Q @ K.T) * (1.0 / np.sqrt(Q.shape[1]))


def attend(A: Tensor, V: Tensor, bias: Optional[np.ndarray] = None, stats: Optional[AttentionStats] = None):
    """softmax(A + bias) V for precomputed affinities; returns (output, weights).

    A row left without any finite logit by the bias falls back to its
    unbiased affinities.
    """
    if A.shape[1] != V.shape[0]:
        raise nt.DimensionError(f"affinity {A.shape} does not match values {V.shape}")
    logits = A
    if bias is not None:
        offsets = np.broadcast_to(np.asarray(bias, dtype=np.float64), A.shape)
        dead = ~np.isfinite(A.data + offsets).any(axis=1)
        nt.note_branch(dead, "attention_fallback")
        if dead.any():
            offsets = offsets.copy()
            offsets[dead] = 0.0
            if stats is not None:
                stats.fallback_rows += int(dead.sum())
        logits = A + Tensor(offsets)
    weights = F.softmax_rows(logits)
    return weights @ V, weights


def scaled_dot_attention(
    Q: Tensor,
    K: Tensor,
    V: Tensor,
    bias: Optional[np.ndarray] = None,
    stats: Optional[AttentionStats] = None,
    return_weights: bool = False,
):
    """softmax(Q K^T / sqrt(d) + bias) V with the bias broadcast along query rows."""
    if K.shape[0] != V.shape[0]:
        raise nt.DimensionError(f"Key/Value lengths differ: {K.shape} vs {V.shape}")
    out, weights = attend(affinity(Q, K), V, bias, stats)
    return (out, weights) if return_weights else out


def cycle_consistency_bias(A: np.ndarray, support_labels: np.ndarray) -> CycleBias:
    """Argmax round trip support j -> query i* -> support j*; keep j iff labels agree.

    Ties resolve to the lowest index. The result is a constant for backprop.
    """
    A = np.asarray(A)
    labels = np.asarray(support_labels)
    if A.ndim != 2 or A.shape[1] == 0:
        raise ValueError("cycle-consistency needs a non-empty support axis")
    if labels.shape != (A.shape[1],):
        raise ValueError(f"{labels.shape} labels for {A.shape[1]} support tokens")
    i_star = A.argmax(axis=0)
    j_star = A[i_star].argmax(axis=1)
    consistent = labels[j_star] == labels
    nt.note_branch(consistent, "cycle_consistency")
    return CycleBias(np.where(consistent, 0.0, NEG_INF), int(consistent.sum()))


class AttentionParams(Module):
    """Bias-free projections W_q, W_k, W_v and the output projection.

    A key bias would only shift each affinity row by a constant, which the
    softmax cancels, so it is left out.
    """

    def __init__(self, d: int, rng: np.random.Generator):
        self.q = Linear(d, d, rng, bias=False)
        self.k = Linear(d, d, rng, bias=False)
        self.v = Linear(d, d, rng, bias=False)
        self.o = Linear(d, d, rng)


def _heads(x: Tensor, h: int) -> List[Tensor]:
    if h == 1:
        return [x]
    w = x.shape[1] // h
    return [x[:, i * w : (i + 1) * w] for i in range(h)]


def _attend(zq, kv, params, h, labels=None, bias=None, stats=None, return_weights=False):
    Q, K, V = params.q(zq.tokens), params.k(kv), params.v(kv)
    heads, weights = [], []
    for Qh, Kh, Vh in zip(_heads(Q, h), _heads(K, h), _heads(V, h)):
        A = affinity(Qh, Kh)
        head_bias = bias
        if labels is not None:
            cb = cycle_consistency_bias(A.data, labels)
            if stats is not None:
                stats.consistent_counts.append(cb.consistent_count)
            if cb.consistent_count == 0:
                log.warning("every support token is cycle-inconsistent; using unbiased attention")
                if stats is not None:
                    stats.fallback_calls += 1
                head_bias = None
            elif cb.consistent_count < len(labels):
                head_bias = cb.bias
        out, w = attend(A, Vh, head_bias, stats)
        heads.append(out)
        weights.append(w)
    merged = heads[0] if h == 1 else nt.concat(heads, axis=1)
    out = TokenSequence(params.o(merged), zq.height, zq.width)
    return (out, weights) if return_weights else out


def multi_head_attention(
    zq: TokenSequence,
    zkv: TokenSequence,
    params: AttentionParams,
    h: int = 1,
    bias: Optional[np.ndarray] = None,
    return_weights: bool = False,
):
    """Project, split the width into ``h`` heads, attend per head, concat, project."""
    return _attend(zq, zkv.tokens, params, h, bias=bias, return_weights=return_weights)


def cycle_consistent_attention(
    zq: TokenSequence,
    support: SampledSupport,
    params: AttentionParams,
    h: int = 1,
    stats: Optional[AttentionStats] = None,
    return_weights: bool = False,
):
    """Cross-attention from query tokens to sampled support tokens with the
    cycle-consistency bias recomputed from the current affinities."""
    if len(support) == 0:
        raise ValueError("empty support")
    return _attend(zq, support.tokens, params, h, labels=np.asarray(support.labels), stats=stats, return_weights=return_weights)


def positional_encoding(H: int, W: int, d: int) -> np.ndarray:
    """Fixed 2-D sine encoding, (H*W, d): columns in the first d/2 channels, rows in the rest.

    Within each half, channel pairs (2k, 2k+1) hold sin/cos of pos / 10000^(2k/(d/2)).
    """
    if d % 4:
        raise ValueError(f"positional encoding width {d} must be divisible by 4")
    half = d // 2
    k = np.arange(half)
    freq = 10000.0 ** (2 * (k // 2) / half)

    def encode(pos):
        phase = pos[:, None] / freq[None, :]
        return np.where(k % 2 == 0, np.sin(phase), np.cos(phase))

    rows, cols = np.divmod(np.arange(H * W), W)
    return np.concatenate([encode(cols.astype(float)), encode(rows.astype(float))], axis=1)


def grid_positions(H: int, W: int) -> np.ndarray:
    rows, cols = np.divmod(np.arange(H * W), W)
    return np.stack([rows, cols], axis=1).astype(np.float64)


class PredictedOffsetAttention(Module):
    """Each token predicts P fractional offsets and P logits from Q + Coord and
    sums softmax-weighted values sampled bilinearly at those offsets."""

    def __init__(self, d: int, P: int, rng: np.random.Generator):
        self.P = P
        self.q = Linear(d, d, rng, bias=False)
        self.v = Linear(d, d, rng, bias=False)
        self.offsets = Linear(d, 2 * P, rng)
        self.logits = Linear(d, P, rng)

    def sampling_plan(self, zq: TokenSequence) -> Tuple[Tensor, Tensor]:
        """Absolute (row, col) sample positions (N, P, 2) and weights (N, P)."""
        if not zq.is_grid:
            raise ValueError("predicted-offset attention needs a grid sequence")
        H, W = zq.height, zq.width
        N, d = zq.tokens.shape
        q = self.q(zq.tokens) + Tensor(positional_encoding(H, W, d))
        delta = self.offsets(q).reshape(N, self.P, 2)
        positions = delta + Tensor(grid_positions(H, W)[:, None, :])
        weights = F.softmax_rows(self.logits(q))
        return positions, weights

    def __call__(self, zq: TokenSequence, values_from: Optional[Sequence[TokenSequence]] = None) -> TokenSequence:
        """Aggregate from ``zq`` itself, or from each grid in ``values_from`` (averaged)."""
        positions, weights = self.sampling_plan(zq)
        sources = [zq] if values_from is None else list(values_from)
        N, d = zq.tokens.shape
        gathered = None
        for src in sources:
            v = self.v(src.tokens).reshape(src.height, src.width, d)
            sampled = F.bilinear_sample(v, positions)
            gathered = sampled if gathered is None else gathered + sampled
        if len(sources) > 1:
            gathered = gathered * (1.0 / len(sources))
        out = (gathered * weights.reshape(N, self.P, 1)).sum(axis=1)
        return TokenSequence(out, zq.height, zq.width)
