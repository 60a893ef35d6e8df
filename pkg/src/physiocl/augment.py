"""Mini-batch expansion: scaling, SNR-fixed Gaussian noise, and extras.

The default policy expands each batch five-fold: original, low-range scale,
high-range scale, additive noise, and scale-then-noise.  Channel permutation
and temporal flipping can replace the two noise variants.  Random draws are
independent per clip, but the (slot, variant) index is shared across the two
subjects so augmented positives stay aligned.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dataset import Clip, MiniBatch, SlotKey


class AugmentError(Exception):
    pass


@dataclass
class AugmentPolicy:
    scale_low_range: tuple = (0.7, 0.8)
    scale_high_range: tuple = (1.2, 1.3)
    snr_db: float = 5.0
    enable_cp: bool = False
    enable_tf: bool = False
    expansion: int = 5

    def __post_init__(self):
        for name in ("scale_low_range", "scale_high_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"{name} must be a nonempty positive range")
        if not np.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite")
        if self.expansion < 1:
            raise ValueError("expansion must be >= 1")


def scale_clip(clip: Clip, factor: float) -> Clip:
    """Multiply every sample by `factor`; metadata preserved, variant bumped."""
    if factor <= 0:
        raise ValueError("scale factor must be positive")
    return replace(clip, data=clip.data * factor, variant=clip.variant + 1)


def add_noise_snr(clip: Clip, snr_db: float, rng: np.random.Generator) -> Clip:
    """Add zero-mean Gaussian noise sized to the requested SNR over the whole clip."""
    power = float(np.mean(clip.data.astype(np.float64) ** 2))
    if power == 0.0:
        raise AugmentError("cannot set an SNR on an all-zero clip")
    sigma = np.sqrt(power * 10.0 ** (-snr_db / 10.0))
    noise = (sigma * rng.standard_normal(clip.data.shape)).astype(clip.data.dtype)
    return replace(clip, data=clip.data + noise, variant=clip.variant + 1)


def channel_permute(clip: Clip, rng: np.random.Generator) -> Clip:
    perm = rng.permutation(clip.n_channels)
    return replace(clip, data=clip.data[perm], variant=clip.variant + 1)


def time_flip(clip: Clip) -> Clip:
    return replace(clip, data=clip.data[:, ::-1].copy(), variant=clip.variant + 1)


def _variant(clip: Clip, v: int, policy: AugmentPolicy, rng: np.random.Generator) -> Clip:
    if v == 0:
        return replace(clip, data=clip.data.copy())
    if v == 1:
        return scale_clip(clip, rng.uniform(*policy.scale_low_range))
    if v == 2:
        return scale_clip(clip, rng.uniform(*policy.scale_high_range))
    if v == 3:
        if policy.enable_cp:
            return channel_permute(clip, rng)
        return add_noise_snr(clip, policy.snr_db, rng)
    if v == 4:
        if policy.enable_tf:
            return time_flip(clip)
        rng_range = policy.scale_low_range if rng.random() < 0.5 else policy.scale_high_range
        return add_noise_snr(scale_clip(clip, rng.uniform(*rng_range)), policy.snr_db, rng)
    raise AugmentError(f"no variant recipe for index {v}")


def expand_batch(batch: MiniBatch, policy: AugmentPolicy, rng: np.random.Generator) -> MiniBatch:
    """Expand a variant-0 mini-batch to `policy.expansion` aligned variants per slot."""
    if any(c.variant != 0 for c in batch.clips.values()):
        raise AugmentError("expand_batch expects a batch of variant-0 clips")
    if policy.expansion == 1:
        return batch
    if policy.expansion != 5:
        raise AugmentError(f"unsupported expansion factor {policy.expansion}; use 1 or 5")

    n = policy.expansion
    slots = []
    clips = {}
    for i, slot in enumerate(batch.slots):
        for v in range(n):
            out_idx = i * n + v
            slots.append(SlotKey(slot.stimulus, slot.position, v))
            for subj in batch.subjects:
                for mod in batch.modalities:
                    src = batch.clips[(i, subj, mod)]
                    aug = _variant(src, v, policy, rng)
                    clips[(out_idx, subj, mod)] = replace(aug, variant=v)
    return MiniBatch(
        subjects=batch.subjects,
        modalities=batch.modalities,
        slots=slots,
        clips=clips,
        t_seconds=batch.t_seconds,
    )
