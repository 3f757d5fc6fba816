from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence


@dataclass(frozen=True)
class SplitSpec:
    all_classes: tuple
    split_index: int
    train_classes: tuple
    test_classes: tuple

    def classes_for(self, role: str) -> tuple:
        if role == "train":
            return self.train_classes
        if role == "test":
            return self.test_classes
        raise ValueError(f"role must be 'train' or 'test', got {role!r}")


def make_splits(all_classes: Sequence[int], split_index: int, n_folds: int = 4) -> SplitSpec:
    """Fold ``split_index`` (contiguous block of ceil(|C|/n_folds)) is held out for test."""
    classes = tuple(all_classes)
    if not 0 <= split_index < n_folds:
        raise ValueError(f"split_index {split_index} outside 0..{n_folds - 1}")
    block = math.ceil(len(classes) / n_folds)
    test = classes[split_index * block : (split_index + 1) * block]
    train = tuple(c for c in classes if c not in test)
    return SplitSpec(classes, split_index, train, test)


def all_folds(all_classes: Sequence[int], n_folds: int = 4) -> List[SplitSpec]:
    return [make_splits(all_classes, i, n_folds) for i in range(n_folds)]
