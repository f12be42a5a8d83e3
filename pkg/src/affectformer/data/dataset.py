from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DataError
from .formats import (
    DatasetManifest,
    FeatureSequence,
    LabelSet,
    check_alignment,
    merge_streams,
    read_feature_file,
    read_label_file,
    read_manifest,
)


@dataclass
class Video:
    features: FeatureSequence  # streams already merged
    labels: LabelSet

    @property
    def video_id(self):
        return self.features.video_id


def load_features(paths) -> FeatureSequence:
    seqs = [read_feature_file(p) for p in paths]
    seq = seqs[0]
    for other in seqs[1:]:
        seq = merge_streams(seq, other)
    return seq


def load_dataset(manifest) -> list[Video]:
    """Read every record of a manifest (object or path), merging streams."""
    if not isinstance(manifest, DatasetManifest):
        manifest = read_manifest(manifest, validate=False)
    if not manifest.records:
        raise DataError(f"manifest {manifest.path or manifest.split} lists no videos")
    videos = []
    dim = None
    for r in manifest.records:
        seq = load_features(r.feature_paths)
        if seq.video_id != r.video_id:
            raise DataError(f"feature file declares video {seq.video_id!r}, manifest says {r.video_id!r}")
        if dim is None:
            dim = seq.dim
        elif seq.dim != dim:
            raise DataError(f"{r.video_id}: feature dim {seq.dim} differs from {dim}")
        labels = read_label_file(r.label_path, video_id=r.video_id)
        check_alignment(seq, labels)
        videos.append(Video(seq, labels))
    return videos


def valid_frame_count(videos, task: str) -> int:
    return int(sum(np.count_nonzero(v.labels.valid(task)) for v in videos))
