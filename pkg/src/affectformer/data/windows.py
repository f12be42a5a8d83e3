from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .formats import FeatureSequence, LabelSet


@dataclass
class Window:
    """Contiguous slice ``[start, start + length)`` of one video."""

    video_id: str
    start: int
    frame_ids: np.ndarray
    features: np.ndarray
    labels: LabelSet

    @property
    def length(self):
        return len(self.frame_ids)

    @property
    def center(self):
        return self.start + (self.length - 1) / 2


def window_starts(T: int, win_len: int, stride: int, valid=None) -> list[tuple[int, int]]:
    """``(start, length)`` pairs at offsets 0, stride, 2*stride, ...

    Full-length windows are emitted while they fit.  If frames at the end are
    still uncovered, one shorter window starting at the next offset covers
    them, provided it holds at least one valid frame (``valid`` is a boolean
    per-frame array; None means every frame counts).
    """
    if win_len < 1 or stride < 1:
        raise ValueError(f"win_len and stride must be >= 1, got {win_len}, {stride}")
    out = []
    start = 0
    while start + win_len <= T:
        out.append((start, win_len))
        start += stride
    covered = out[-1][0] + win_len if out else 0
    if covered < T and start < T:
        if valid is None or np.any(np.asarray(valid)[start:T]):
            out.append((start, T - start))
    return out


def make_windows(seq: FeatureSequence, labels: LabelSet | None, win_len: int, stride: int,
                 valid=None) -> list[Window]:
    if labels is None:
        labels = LabelSet.unannotated(seq.frame_ids, seq.video_id)
    elif valid is None:
        valid = labels.any_valid()
    return [
        Window(seq.video_id, s, seq.frame_ids[s:s + n], seq.features[s:s + n],
               labels.slice(s, s + n))
        for s, n in window_starts(seq.T, win_len, stride, valid)
    ]
