"""Fine-tuning head: resolution fusion, confidence weighting, classification.

Per modality, the long-resolution feature is optionally concatenated with a
pooled summary of the short-resolution features.  The two modality features
are then combined by one of three strategies:

  mcp              weight each modality by its auxiliary classifier's maximum
                   class probability, concatenate, classify jointly
  feature_concat   unweighted concatenation into the joint classifier
  decision_average mean of the two auxiliary softmax outputs

The joint classifier is bias-free, so equal confidence weights scale its
logits uniformly and cannot change the argmax.  Confidence weights are
treated as constants: no gradient flows through the max.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import Clip

STRATEGIES = ("mcp", "feature_concat", "decision_average")


@dataclass
class ResolutionPlan:
    t_long: float = 5.0
    t_short: float = 1.0
    use_short: bool = True
    short_pooling: str = "mean"  # "mean" or "concat"

    def __post_init__(self):
        if self.use_short:
            ratio = self.t_long / self.t_short
            if abs(ratio - round(ratio)) > 1e-9:
                raise ValueError("t_long must be divisible by t_short")
        if self.short_pooling not in ("mean", "concat"):
            raise ValueError(f"unknown short_pooling {self.short_pooling!r}")

    @property
    def n_short(self) -> int:
        return round(self.t_long / self.t_short)

    def feature_dim(self, embed_dim: int) -> int:
        if not self.use_short:
            return embed_dim
        if self.short_pooling == "concat":
            return (1 + self.n_short) * embed_dim
        return 2 * embed_dim


def decompose_long(clip: Clip, t_short: float) -> list:
    """Split a long clip into contiguous short clips; concatenation round-trips."""
    ratio = clip.t_seconds / t_short
    if abs(ratio - round(ratio)) > 1e-9:
        raise ValueError(f"clip of {clip.t_seconds}s does not divide into {t_short}s pieces")
    n = round(ratio)
    step = clip.n_samples // n
    out = []
    for j in range(n):
        out.append(replace(clip, data=clip.data[:, j * step:(j + 1) * step].copy(),
                           position=j, t_seconds=t_short))
    return out


def modality_feature(long_feat, short_feats, plan: ResolutionPlan) -> Tensor:
    """Fuse one modality's long feature [B, D] with its short features.

    `short_feats` is a list of [B, D] tensors (one per short segment) or None
    when the plan is long-only.
    """
    long_feat = ad.as_tensor(long_feat)
    if not plan.use_short:
        return long_feat
    if not short_feats:
        raise ValueError("plan.use_short is set but no short features were given")
    shorts = [ad.as_tensor(s) for s in short_feats]
    if plan.short_pooling == "concat":
        return ad.concat([long_feat] + shorts, axis=1)
    pooled = ad.reduce_mean(ad.stack(shorts, axis=1), axis=1)
    return ad.concat([long_feat, pooled], axis=1)


def mcp(probs: np.ndarray) -> float:
    """Maximum class probability of one softmax output (the confidence score)."""
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-5:
        raise ValueError("mcp expects a probability simplex vector")
    return float(p.max())


def ce_loss(probs: Tensor, label: int) -> Tensor:
    """Cross-entropy -log p[label] of one probability vector (clamped at 1e-12)."""
    probs = ad.as_tensor(probs)
    if probs.ndim != 1:
        raise ValueError("ce_loss takes a single probability vector; use batch_ce for batches")
    if not 0 <= label < probs.shape[0]:
        raise ValueError(f"label {label} out of range")
    p = ad.clamp_min(ad.take_index(probs, label, axis=0), 1e-12)
    return ad.scale(ad.log(p), -1.0)


def batch_ce(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of a probability batch [B, n] against integer labels."""
    picked = ad.clamp_min(ad.take_per_row(ad.as_tensor(probs), labels), 1e-12)
    return ad.scale(ad.log(picked).mean(), -1.0)


class FusionHead:
    """Auxiliary per-modality classifiers plus a bias-free joint classifier."""

    def __init__(self, feature_dim: int, n_classes: int, strategy: str,
                 rng: np.random.Generator, hidden_dim: int = 256,
                 modalities: tuple = ("eeg", "pps")):
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown fusion strategy {strategy!r}")
        if n_classes not in (2, 4):
            raise ValueError("n_classes must be 2 or 4")
        self.feature_dim = feature_dim
        self.n_classes = n_classes
        self.strategy = strategy
        self.modalities = modalities
        self.params: dict[str, Tensor] = {}
        lin = lambda fan_in, *shape: rng.standard_normal(shape) / math.sqrt(fan_in)
        if strategy in ("mcp", "decision_average"):
            for m in modalities:
                self.params[f"aux.{m}.w"] = ad.parameter(lin(feature_dim, feature_dim, n_classes))
                self.params[f"aux.{m}.b"] = ad.parameter(np.zeros(n_classes))
        if strategy in ("mcp", "feature_concat"):
            self.params["joint.w1"] = ad.parameter(lin(2 * feature_dim, 2 * feature_dim, hidden_dim))
            self.params["joint.w2"] = ad.parameter(lin(hidden_dim, hidden_dim, n_classes))

    def aux_probs(self, features: dict) -> dict:
        out = {}
        for m in self.modalities:
            logits = ad.add(ad.matmul(features[m], self.params[f"aux.{m}.w"]),
                            self.params[f"aux.{m}.b"])
            out[m] = ad.softmax(logits, axis=1)
        return out

    def _joint(self, joint_in: Tensor) -> Tensor:
        h = ad.relu(ad.matmul(joint_in, self.params["joint.w1"]))
        return ad.softmax(ad.matmul(h, self.params["joint.w2"]), axis=1)

    def fuse_and_classify(self, h_eeg: Tensor, h_pps: Tensor) -> tuple:
        """Run the configured fusion strategy; returns (probs [B, n], aux probs dict)."""
        features = {"eeg": ad.as_tensor(h_eeg), "pps": ad.as_tensor(h_pps)}
        if self.strategy == "feature_concat":
            return self._joint(ad.concat([features["eeg"], features["pps"]], axis=1)), {}
        aux = self.aux_probs(features)
        if self.strategy == "decision_average":
            return ad.scale(ad.add(aux["eeg"], aux["pps"]), 0.5), aux
        # mcp: confidence weights are detached scalars, one per sample.
        weights = {m: aux[m].data.max(axis=1) for m in self.modalities}
        joint_in = ad.concat([ad.scale_rows(features["eeg"], weights["eeg"]),
                              ad.scale_rows(features["pps"], weights["pps"])], axis=1)
        return self._joint(joint_in), aux

    def named_params(self) -> dict:
        return dict(self.params)

    def named_arrays(self) -> dict:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_arrays(self, arrays: dict, prefix: str = "") -> None:
        dt = ad.default_dtype()
        for name, t in self.params.items():
            t.data = arrays[prefix + name].astype(dt)
