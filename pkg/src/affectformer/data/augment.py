"""Feature-space augmentation for pre-extracted per-frame features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from .windows import Window


@dataclass(frozen=True)
class AugmentPolicy:
    noise_prob: float = 0.0
    noise_sigma: float = 0.05
    crop_prob: float = 0.0
    min_crop_frac: float = 0.5
    drop_prob: float = 0.0
    drop_frac: float = 0.1

    def __post_init__(self):
        for name in ("noise_prob", "crop_prob", "drop_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"augment {name} must lie in [0, 1], got {v}")
        if self.noise_sigma < 0:
            raise ConfigError("augment noise_sigma must be nonnegative")
        if not 0.5 <= self.min_crop_frac <= 1.0:
            raise ConfigError("augment min_crop_frac must lie in [0.5, 1]")
        if not 0.0 <= self.drop_frac <= 0.1:
            raise ConfigError("augment drop_frac must lie in [0, 0.1]")

    @property
    def is_identity(self):
        return self.noise_prob == 0 and self.crop_prob == 0 and self.drop_prob == 0


def augment_window(w: Window, policy: AugmentPolicy, rng: np.random.Generator) -> Window:
    """Noise, temporal crop and frame dropout, each applied independently.

    Labels and masks are only ever selected alongside their frames, never
    edited.  One uniform draw per transform is consumed even when it does not
    fire so the stream position does not depend on earlier outcomes.
    """
    if policy.is_identity:
        return w
    u_crop, u_drop, u_noise = rng.random(3)
    start, stop = 0, w.length
    if u_crop < policy.crop_prob and w.length > 1:
        min_len = max(1, int(np.ceil(policy.min_crop_frac * w.length)))
        n = int(rng.integers(min_len, w.length + 1))
        start = int(rng.integers(0, w.length - n + 1))
        stop = start + n
    feats = w.features[start:stop].copy()
    if u_drop < policy.drop_prob:
        n_drop = int(np.floor(policy.drop_frac * len(feats)))
        if n_drop:
            rows = rng.choice(len(feats), size=n_drop, replace=False)
            feats[rows] = feats.mean(axis=0)
    if u_noise < policy.noise_prob and policy.noise_sigma > 0:
        feats = feats + rng.normal(0.0, policy.noise_sigma, size=feats.shape)
    return Window(w.video_id, w.start + start, w.frame_ids[start:stop], feats,
                  w.labels.slice(start, stop))
