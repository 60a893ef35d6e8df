"""Synthetic multimodal dataset with ground-truth stimulus-driven structure.

Each stimulus gets one smooth latent trajectory shared by every subject;
each (subject, modality) observes it through a perturbed linear map plus
Gaussian noise.  Same-stimulus recordings from different subjects are
therefore correlated — the synchronization structure the contrastive
pipeline is supposed to find — and ratings derive from the latent means,
so labels are decodable from the signals.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import ModalityDescriptor, RatingScale, TrialDescriptor, write_container


@dataclass
class SynthConfig:
    n_subjects: int = 4
    n_stimuli: int = 8
    trial_seconds: float = 60.0
    sample_rate_hz: int = 128
    eeg_channels: int = 8
    pps_channels: int = 2
    latent_dim: int = 4
    subject_mixing_noise: float = 0.3
    observation_snr_db: float = 10.0
    latent_cutoff_hz: float = 1.0
    latent_offset_scale: float = 1.0   # per-stimulus DC component (drives labels)
    latent_fluct_scale: float = 0.7    # smooth band-limited component
    min_label_margin: float = 0.0      # lower bound on |trial-mean| of label components
    balance_labels: bool = False       # force a half/half high-low split per label component
    # Slow subject-specific artifact along a random per-(subject, modality)
    # direction, relative to clean-signal RMS.  It carries no label or
    # stimulus information and does not correlate across subjects, so
    # cross-subject alignment has to suppress it.
    subject_drift_scale: float = 0.0
    drift_cutoff_hz: float = 0.05
    # Deterministic within-trial ramp (-1..+1 over the trial) along another
    # subject-specific direction: a sensor-drift analogue that shifts late
    # clip positions away from early ones.
    position_ramp_scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_subjects", "n_stimuli", "trial_seconds", "sample_rate_hz",
                     "eeg_channels", "pps_channels", "latent_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.latent_dim < 2:
            raise ValueError("latent_dim must be at least 2 (label components 0 and 1)")


def _smooth_noise(rng: np.random.Generator, n: int, cutoff_hz: float, fs: int) -> np.ndarray:
    """Zero-mean band-limited noise with unit variance."""
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, d=1.0 / fs)
    spec[freqs > cutoff_hz] = 0.0
    sig = np.fft.irfft(spec, n=n)
    sig -= sig.mean()
    std = sig.std()
    return sig / std if std > 0 else sig


def _rating_from_mean(mean: float, scale: RatingScale) -> float:
    """Map a latent mean into the rating scale; high iff mean >= 0."""
    mid = scale.threshold
    span = min(scale.maximum - mid, mid - scale.minimum)
    return float(mid + span * np.tanh(1.5 * mean))


def generate(config: SynthConfig, out_dir) -> Path:
    """Generate the dataset container; returns the manifest path.

    The same seed yields a bit-identical container.
    """
    rng = np.random.default_rng(config.seed)
    fs = config.sample_rate_hz
    n_pts = round(config.trial_seconds * fs)
    scale = RatingScale(1.0, 9.0, 5.0, "deap")
    subjects = [f"s{i + 1:02d}" for i in range(config.n_subjects)]
    stimuli = [f"v{i + 1:02d}" for i in range(config.n_stimuli)]
    modalities = [
        ModalityDescriptor("eeg", config.eeg_channels),
        ModalityDescriptor("pps", config.pps_channels),
    ]

    # Per-stimulus latent: a random offset (drives the trial-level label and
    # is visible in every clip) plus smooth band-limited fluctuation.
    forced_signs = None
    if config.balance_labels:
        forced_signs = {}
        for comp in (0, 1):
            half = config.n_stimuli // 2
            signs = np.array([1.0] * (config.n_stimuli - half) + [-1.0] * half)
            rng.shuffle(signs)
            forced_signs[comp] = signs

    latents = {}
    ratings = {}
    for idx, stim in enumerate(stimuli):
        offsets = config.latent_offset_scale * rng.standard_normal(config.latent_dim)
        if forced_signs is not None:
            for comp in (0, 1):
                offsets[comp] = forced_signs[comp][idx] * abs(offsets[comp])
        fluct = np.stack([
            config.latent_fluct_scale * _smooth_noise(rng, n_pts, config.latent_cutoff_hz, fs)
            for _ in range(config.latent_dim)
        ])
        lat = offsets[:, None] + fluct
        # Keep the label components decisively signed: push a weak trial mean
        # away from the threshold, toward the forced sign when balancing.
        for comp in (0, 1):
            m = lat[comp].mean()
            if forced_signs is not None:
                sign = forced_signs[comp][idx]
            else:
                sign = 1.0 if (m > 0 or (m == 0 and rng.random() < 0.5)) else -1.0
            if m * sign < config.min_label_margin:
                lat[comp] += sign * config.min_label_margin - m
        latents[stim] = lat
        ratings[stim] = {
            "arousal": _rating_from_mean(lat[0].mean(), scale),
            "valence": _rating_from_mean(lat[1].mean(), scale),
        }

    base_maps = {m.id: rng.standard_normal((m.channels, config.latent_dim)) / np.sqrt(config.latent_dim)
                 for m in modalities}
    subject_maps = {}
    drift_dirs = {}
    ramp_dirs = {}
    for subj in subjects:
        for m in modalities:
            delta = rng.standard_normal((m.channels, config.latent_dim)) / np.sqrt(config.latent_dim)
            subject_maps[(subj, m.id)] = base_maps[m.id] + config.subject_mixing_noise * delta
            direction = rng.standard_normal(m.channels)
            drift_dirs[(subj, m.id)] = direction / np.linalg.norm(direction)
            direction = rng.standard_normal(m.channels)
            ramp_dirs[(subj, m.id)] = direction / np.linalg.norm(direction)

    ramp = np.linspace(-1.0, 1.0, n_pts)
    noise_factor = 10.0 ** (-config.observation_snr_db / 10.0)
    signals = {}
    trials = []
    for subj in subjects:
        for stim in stimuli:
            for m in modalities:
                clean = subject_maps[(subj, m.id)] @ latents[stim]
                rms = float(np.sqrt(np.mean(clean ** 2)))
                signal = clean
                if config.subject_drift_scale > 0:
                    drift = _smooth_noise(rng, n_pts, config.drift_cutoff_hz, fs)
                    signal = signal + (config.subject_drift_scale * rms) * np.outer(
                        drift_dirs[(subj, m.id)], drift)
                if config.position_ramp_scale > 0:
                    signal = signal + (config.position_ramp_scale * rms) * np.outer(
                        ramp_dirs[(subj, m.id)], ramp)
                sigma = rms * np.sqrt(noise_factor)
                signals[(subj, stim, m.id)] = signal + sigma * rng.standard_normal(clean.shape)
            trials.append(TrialDescriptor(subj, stim, config.trial_seconds, ratings[stim], {}))

    return write_container(
        out_dir, name="synth", sample_rate_hz=fs, rating_scale=scale,
        modalities=modalities, trials=trials,
        signals=lambda t, mod: signals[(t.subject, t.stimulus, mod)],
    )
