"""Deterministic synthetic affect dataset for desk-scale verification.

Each video is a run of class segments.  A frame's features are its class
centroid plus AR(1)-smoothed Gaussian noise; valence/arousal follow a class
anchor plus smooth noise; AU bits come from a class-conditional Bernoulli
pattern drawn once per segment.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from ..model import NUM_AUS, NUM_EXPR_CLASSES
from .formats import (
    SENTINEL,
    DatasetManifest,
    FeatureSequence,
    LabelSet,
    ManifestRecord,
    write_feature_file,
    write_label_file,
    write_manifest,
)


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = NUM_EXPR_CLASSES
    train_videos: int = 8
    val_videos: int = 2
    frames: int = 256
    stream_a: int = 8
    stream_b: int = 8       # 0 writes a single stream
    cluster_sep: float = 6.0
    noise_sigma: float = 0.5
    smoothing: float = 0.8  # AR(1) coefficient of the feature noise
    segment_min: int = 6
    segment_max: int = 16
    va_noise: float = 0.05
    unannotated_frac: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_classes <= NUM_EXPR_CLASSES:
            raise ConfigError(f"num_classes must lie in 1..{NUM_EXPR_CLASSES}")
        if self.train_videos < 1 or self.val_videos < 0 or self.frames < 1:
            raise ConfigError("need at least one training video with at least one frame")
        if self.stream_a < 1 or self.stream_b < 0:
            raise ConfigError("stream dims must be positive (stream_b may be 0)")
        if not 1 <= self.segment_min <= self.segment_max:
            raise ConfigError("segment lengths must satisfy 1 <= segment_min <= segment_max")
        if not 0.0 <= self.smoothing < 1.0:
            raise ConfigError("smoothing must lie in [0, 1)")
        if self.noise_sigma < 0 or self.va_noise < 0 or self.cluster_sep < 0:
            raise ConfigError("noise levels and cluster_sep must be nonnegative")
        if not 0.0 <= self.unannotated_frac < 1.0:
            raise ConfigError("unannotated_frac must lie in [0, 1)")

    @property
    def d_v(self):
        return self.stream_a + self.stream_b

    @classmethod
    def parse(cls, text: str) -> "SynthSpec":
        """``key=value`` pairs separated by commas or newlines."""
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for item in text.replace("\n", ",").split(","):
            item = item.strip()
            if not item or item.startswith("#"):
                continue
            if "=" not in item:
                raise ConfigError(f"bad synth spec entry {item!r}")
            k, v = (s.strip() for s in item.split("=", 1))
            if k not in types:
                raise ConfigError(f"unknown synth spec key {k!r}")
            try:
                kw[k] = int(v) if types[k] in (int, "int") else float(v)
            except ValueError:
                raise ConfigError(f"bad value for {k}: {v!r}") from None
        return cls(**kw)


def _ar1(rng, n, d, rho, sigma):
    eps = rng.standard_normal((n, d))
    out = np.empty((n, d))
    out[0] = eps[0]
    c = np.sqrt(1.0 - rho * rho)
    for t in range(1, n):
        out[t] = rho * out[t - 1] + c * eps[t]
    return sigma * out


class _World:
    """Class-level parameters shared by every video of one dataset."""

    def __init__(self, spec: SynthSpec, rng):
        k, d = spec.num_classes, spec.d_v
        self.centroids = rng.standard_normal((k, d)) * (spec.cluster_sep / np.sqrt(2 * d))
        self.va_anchor = rng.uniform(-0.8, 0.8, size=(k, 2))
        pattern = rng.random((k, NUM_AUS)) < 0.4
        self.au_prob = np.where(pattern, 0.9, 0.1)


def _video(spec: SynthSpec, world: _World, rng, video_id: str):
    t = spec.frames
    cls = np.empty(t, dtype=np.int64)
    au = np.empty((t, NUM_AUS), dtype=np.int64)
    pos, prev = 0, -1
    while pos < t:
        n = int(rng.integers(spec.segment_min, spec.segment_max + 1))
        c = int(rng.integers(spec.num_classes))
        if spec.num_classes > 1 and c == prev:
            c = (c + 1 + int(rng.integers(spec.num_classes - 1))) % spec.num_classes
        cls[pos:pos + n] = c
        au[pos:pos + n] = rng.random(NUM_AUS) < world.au_prob[c]
        prev = c
        pos += n
    feats = world.centroids[cls] + _ar1(rng, t, spec.d_v, spec.smoothing, spec.noise_sigma)
    feats = feats.astype(np.float32).astype(np.float64)
    va = np.clip(world.va_anchor[cls] + _ar1(rng, t, 2, spec.smoothing, spec.va_noise), -1.0, 1.0)
    expr = cls.copy()
    drop = rng.random((t, 3)) < spec.unannotated_frac
    va[drop[:, 0]] = SENTINEL
    expr[drop[:, 1]] = SENTINEL
    au[drop[:, 2]] = SENTINEL
    frame_ids = np.arange(t, dtype=np.int64)
    labels = LabelSet(frame_ids, va, expr, au, np.ones(t, bool), video_id)
    return FeatureSequence(video_id, frame_ids, feats), labels


def generate(spec: SynthSpec):
    """In-memory generation: ``{split: [(FeatureSequence, LabelSet), ...]}``."""
    rng = np.random.default_rng(spec.seed)
    world = _World(spec, rng)
    splits = {"train": spec.train_videos}
    if spec.val_videos:
        splits["val"] = spec.val_videos
    out = {}
    for split, n in splits.items():
        out[split] = [_video(spec, world, rng, f"{split}_{i:03d}") for i in range(n)]
    return out


def synthesize_dataset(spec: SynthSpec, out_dir) -> dict[str, DatasetManifest]:
    """Write features, labels and one manifest per split under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    manifests = {}
    for split, videos in generate(spec).items():
        records = []
        for seq, labels in videos:
            vid = seq.video_id
            paths = []
            if spec.stream_b:
                for tag, cols in (("a", slice(0, spec.stream_a)), ("b", slice(spec.stream_a, None))):
                    p = out_dir / "features" / f"{vid}_{tag}.afsq"
                    write_feature_file(p, FeatureSequence(vid, seq.frame_ids, seq.features[:, cols]))
                    paths.append(p)
            else:
                p = out_dir / "features" / f"{vid}.afsq"
                write_feature_file(p, seq)
                paths.append(p)
            lp = out_dir / "labels" / f"{vid}.txt"
            write_label_file(lp, labels)
            records.append(ManifestRecord(vid, tuple(paths), lp))
        dims = (spec.stream_a, spec.stream_b) if spec.stream_b else (spec.stream_a,)
        manifest = DatasetManifest(split, records, dims, out_dir / f"{split}.tsv")
        write_manifest(manifest.path, manifest)
        manifests[split] = manifest
    return manifests
