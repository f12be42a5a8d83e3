"""Class-balanced window sampling for the expression track."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import DataError
from ..model import NUM_EXPR_CLASSES
from .windows import Window


def majority_label(expr, valid) -> int | None:
    """Most frequent valid expression id; ties go to the smallest id."""
    y = np.asarray(expr)[np.asarray(valid, dtype=bool)]
    if y.size == 0:
        return None
    return int(np.argmax(np.bincount(y, minlength=NUM_EXPR_CLASSES)))


def window_classes(windows: Sequence[Window]) -> list[int | None]:
    return [majority_label(w.labels.expr, w.labels.valid("expr")) for w in windows]


class BalancedSampler:
    """Infinite stream of window indices, uniform over the classes present.

    Each draw picks a class uniformly among those that are the majority label
    of at least one window, then a window of that class uniformly.  Windows
    with no valid expression frame are never drawn.  The generator state can
    be saved and restored through :attr:`rng`.
    """

    def __init__(self, classes: Sequence[int | None], seed: int):
        groups: dict[int, list[int]] = {}
        for i, c in enumerate(classes):
            if c is not None:
                groups.setdefault(c, []).append(i)
        if not groups:
            raise DataError("balanced sampling needs at least one window with a valid expression label")
        self.class_ids = sorted(groups)
        self._groups = [np.asarray(groups[c]) for c in self.class_ids]
        self.rng = np.random.default_rng(seed)

    @classmethod
    def from_windows(cls, windows: Sequence[Window], seed: int):
        return cls(window_classes(windows), seed)

    def __iter__(self):
        return self

    def __next__(self) -> int:
        g = self._groups[self.rng.integers(len(self._groups))]
        return int(g[self.rng.integers(len(g))])

    def draw(self, n: int) -> list[int]:
        return [next(self) for _ in range(n)]


def balanced_index_stream(labels, seed: int) -> BalancedSampler:
    """``labels`` is a sequence of per-window expression LabelTracks (or Windows)."""
    classes = []
    for item in labels:
        if isinstance(item, Window):
            classes.append(majority_label(item.labels.expr, item.labels.valid("expr")))
        else:
            classes.append(majority_label(item.payload, item.mask))
    return BalancedSampler(classes, seed)
