"""mIoU and FB-IoU over a stream of binary predictions.

Counts are integers, so accumulation is exact and independent of episode
order; accumulators from parallel workers merge by summation.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np


def _binary(mask, name: str) -> np.ndarray:
    m = np.asarray(mask)
    if m.dtype != bool:
        if not np.isin(m, (0, 1)).all():
            raise ValueError(f"{name} is not a binary mask")
        m = m.astype(bool)
    return m


@dataclass
class IoUAccumulator:
    """Per-class and class-agnostic intersection/union counts."""

    inter: Dict[int, int] = field(default_factory=lambda: defaultdict(int))
    union: Dict[int, int] = field(default_factory=lambda: defaultdict(int))
    fg_inter: int = 0
    fg_union: int = 0
    bg_inter: int = 0
    bg_union: int = 0
    n_episodes: int = 0
    # (class_id, intersection, union) per episode, kept for episode-averaged IoU
    episodes: List[Tuple[int, int, int]] = field(default_factory=list)

    def add(self, prediction, truth, class_id: int) -> None:
        p, t = _binary(prediction, "prediction"), _binary(truth, "ground truth")
        if p.shape != t.shape:
            raise ValueError(f"prediction {p.shape} and truth {t.shape} differ")
        i = int(np.count_nonzero(p & t))
        u = int(np.count_nonzero(p | t))
        bi = int(np.count_nonzero(~p & ~t))
        bu = int(np.count_nonzero(~p | ~t))
        c = int(class_id)
        self.inter[c] += i
        self.union[c] += u
        self.fg_inter += i
        self.fg_union += u
        self.bg_inter += bi
        self.bg_union += bu
        self.n_episodes += 1
        self.episodes.append((c, i, u))

    def merge(self, other: "IoUAccumulator") -> "IoUAccumulator":
        out = IoUAccumulator()
        for acc in (self, other):
            for c in acc.inter:
                out.inter[c] += acc.inter[c]
                out.union[c] += acc.union[c]
            out.fg_inter += acc.fg_inter
            out.fg_union += acc.fg_union
            out.bg_inter += acc.bg_inter
            out.bg_union += acc.bg_union
            out.n_episodes += acc.n_episodes
            out.episodes.extend(acc.episodes)
        return out

    def per_class_iou(self, per_episode: bool = False) -> Dict[int, Optional[float]]:
        """IoU per class; ``None`` for classes whose union is empty."""
        if self.n_episodes == 0:
            raise ValueError("no episodes accumulated")
        if not per_episode:
            return {c: (self.inter[c] / self.union[c] if self.union[c] else None) for c in sorted(self.inter)}
        grouped = defaultdict(list)
        for c, i, u in self.episodes:
            grouped[c].append(i / u if u else None)
        out = {}
        for c in sorted(grouped):
            vals = [v for v in grouped[c] if v is not None]
            out[c] = math.fsum(vals) / len(vals) if vals else None
        return out

    def miou(self, per_episode: bool = False) -> float:
        ious = [v for v in self.per_class_iou(per_episode).values() if v is not None]
        if not ious:
            raise ValueError("every class has an empty union")
        return math.fsum(ious) / len(ious)

    def fb_iou(self) -> float:
        if self.n_episodes == 0:
            raise ValueError("no episodes accumulated")
        parts = [i / u for i, u in ((self.fg_inter, self.fg_union), (self.bg_inter, self.bg_union)) if u]
        return math.fsum(parts) / len(parts)

    def summary(self, per_episode: bool = False) -> dict:
        per_class = self.per_class_iou(per_episode)
        return {
            "per_class_iou": {str(c): v for c, v in per_class.items()},
            "miou": self.miou(per_episode),
            "fb_iou": self.fb_iou(),
            "n_episodes": self.n_episodes,
            "empty_union_classes": [c for c, v in per_class.items() if v is None],
            "iou_convention": "episode" if per_episode else "dataset",
        }


def accumulate(predictions: Iterable, ground_truths: Iterable, class_ids: Iterable[int]) -> IoUAccumulator:
    predictions, ground_truths, class_ids = list(predictions), list(ground_truths), list(class_ids)
    if not (len(predictions) == len(ground_truths) == len(class_ids)):
        raise ValueError("predictions, ground truths and class ids differ in count")
    if not predictions:
        raise ValueError("no episodes")
    acc = IoUAccumulator()
    for p, t, c in zip(predictions, ground_truths, class_ids):
        acc.add(p, t, c)
    return acc


def mean_iou(predictions, ground_truths, class_ids, per_episode: bool = False) -> Tuple[Dict[int, Optional[float]], float]:
    acc = accumulate(predictions, ground_truths, class_ids)
    return acc.per_class_iou(per_episode), acc.miou(per_episode)


def fb_iou(predictions, ground_truths) -> float:
    predictions = list(predictions)
    return accumulate(predictions, ground_truths, [0] * len(predictions)).fb_iou()
