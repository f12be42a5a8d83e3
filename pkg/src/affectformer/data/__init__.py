from .augment import AugmentPolicy, augment_window
from .dataset import Video, load_dataset, load_features, valid_frame_count
from .formats import (
    EXPR_NAMES,
    SENTINEL,
    DatasetManifest,
    FeatureSequence,
    LabelSet,
    LabelTrack,
    ManifestRecord,
    merge_streams,
    read_feature_file,
    read_label_file,
    read_manifest,
    write_feature_file,
    write_label_file,
    write_manifest,
)
from .sampling import BalancedSampler, balanced_index_stream, majority_label
from .synth import SynthSpec, generate, synthesize_dataset
from .windows import Window, make_windows, window_starts

__all__ = [
    "augment_window",
    "AugmentPolicy",
    "balanced_index_stream",
    "BalancedSampler",
    "DatasetManifest",
    "EXPR_NAMES",
    "FeatureSequence",
    "generate",
    "LabelSet",
    "LabelTrack",
    "load_dataset",
    "load_features",
    "majority_label",
    "make_windows",
    "ManifestRecord",
    "merge_streams",
    "read_feature_file",
    "read_label_file",
    "read_manifest",
    "SENTINEL",
    "synthesize_dataset",
    "SynthSpec",
    "valid_frame_count",
    "Video",
    "Window",
    "window_starts",
    "write_feature_file",
    "write_label_file",
    "write_manifest",
]
