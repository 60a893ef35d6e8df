"""Reproducible desk-scale experiment recipes.

These runners wire the synthetic generator, pre-training, fine-tuning, and
evaluation together with fixed splits and seeds.  They back the CLI's
pipeline subcommands, the scripts/ entry points, and the acceptance suite.
"""
from __future__ import annotations

import dataclasses
import itertools
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import load_arrays
from .dataset import ClipDataset, DatasetManifest, MiniBatch, SlotKey, build_clip_dataset, load_manifest
from .synth import SynthConfig, generate
from .trainer import (ContrastiveModel, FinetuneModel, ModelConfig, PretrainSettings,
                      FinetuneSettings, RunConfig, SplitSettings, _input_dims, evaluate,
                      finetune, pretrain, rng_for)


def full_pair_batch(ds: ClipDataset, subject_a: str, subject_b: str,
                    max_slots: int | None = None) -> MiniBatch:
    """A deterministic mini-batch over all (or the first `max_slots`) common slots."""
    slots = ds.common_slots(subject_a, subject_b)
    if max_slots is not None:
        slots = slots[:max_slots]
    clips = {}
    for i, (stim, pos) in enumerate(slots):
        for subj in (subject_a, subject_b):
            for mod in ds.modalities:
                clips[(i, subj, mod)] = ds.clip(mod, subj, stim, pos)
    return MiniBatch(subjects=(subject_a, subject_b), modalities=ds.modalities,
                     slots=[SlotKey(s, p) for s, p in slots], clips=clips,
                     t_seconds=ds.t_seconds)


def similarity_gap(model: ContrastiveModel, ds: ClipDataset,
                   max_slots: int | None = 24) -> dict:
    """Mean cosine similarity of positive pairs minus negatives, per modality.

    Positives are same-slot cross-subject projected embeddings; negatives are
    every other pair the contrastive loss sees (cross-subject off-diagonal
    plus both within-subject off-diagonals).
    """
    sums = {mod: [0.0, 0.0, 0, 0] for mod in ds.modalities}  # pos_sum, neg_sum, n_pos, n_neg
    for a, b in itertools.combinations(ds.subjects, 2):
        batch = full_pair_batch(ds, a, b, max_slots)
        z = model.embeddings(batch, train=False)
        for mod in ds.modalities:
            za = z[(mod, a)].data
            zb = z[(mod, b)].data
            na = za / np.linalg.norm(za, axis=1, keepdims=True)
            nb = zb / np.linalg.norm(zb, axis=1, keepdims=True)
            s_ab = na @ nb.T
            s_aa = na @ na.T
            s_bb = nb @ nb.T
            m = s_ab.shape[0]
            off = ~np.eye(m, dtype=bool)
            rec = sums[mod]
            rec[0] += float(np.trace(s_ab))
            rec[2] += m
            rec[1] += float(s_ab[off].sum() + s_aa[off].sum() + s_bb[off].sum())
            rec[3] += int(3 * m * (m - 1))
    return {mod: (rec[0] / rec[2]) - (rec[1] / rec[3]) for mod, rec in sums.items()}


# -- canonical desk-scale configurations ---------------------------------------


DESK_SEED = 13


def desk_synth_config(seed: int = DESK_SEED, **overrides) -> SynthConfig:
    """Desk-scale dataset: balanced decisive labels, strong subject variability."""
    base = dict(n_subjects=4, n_stimuli=8, trial_seconds=60.0, sample_rate_hz=128,
                eeg_channels=8, pps_channels=2, latent_dim=4,
                subject_mixing_noise=1.0, observation_snr_db=5.0,
                min_label_margin=0.4, balance_labels=True, seed=seed)
    base.update(overrides)
    return SynthConfig(**base)


def desk_run_config(seed: int = DESK_SEED, **section_overrides) -> RunConfig:
    """A small-but-faithful configuration that trains in minutes on a CPU.

    The canonical desk evaluation is cross-subject with scarce labels and a
    frozen-encoder probe: pre-training sees three subjects unlabeled, the
    classifier gets labels for two clip positions, and the test subject is
    never seen in any training phase.
    """
    cfg = RunConfig(
        seed=seed,
        task="arousal",
        train_dtype="float32",
        model=ModelConfig(n_views=4, embed_dim=32, n_heads=2, n_blocks=2, n_prompts=2,
                          dropout_p=0.1, projector_hidden=64, projector_out=32,
                          fusion_hidden=64),
        pretrain=PretrainSettings(epochs=24, lr=1e-3, clips_per_subject=8, cycles=3),
        finetune=FinetuneSettings(epochs=60, lr=1e-3, batch_size=64,
                                  freeze_encoders=True, max_label_positions=2),
        split=SplitSettings(mode="subject_fraction", test_fraction=0.25, val_fraction=0.15),
    )
    for name, value in section_overrides.items():
        cfg = dataclasses.replace(cfg, **{name: value})
    return cfg


# -- splits ---------------------------------------------------------------------


def position_split(n_positions: int, cfg: RunConfig) -> dict:
    """Temporal holdout: the last fraction of clip positions is the test set."""
    n_test = max(1, round(cfg.split.test_fraction * n_positions))
    n_val = max(1, round(cfg.split.val_fraction * (n_positions - n_test)))
    test = list(range(n_positions - n_test, n_positions))
    val = list(range(n_positions - n_test - n_val, n_positions - n_test))
    train = list(range(0, n_positions - n_test - n_val))
    if not train:
        raise ValueError("position split leaves no training positions")
    return {"train": train, "val": val, "test": test}


def stimulus_split(stimuli: list, cfg: RunConfig) -> dict:
    order = list(stimuli)
    rng_for(cfg.seed, "split", "stimulus").shuffle(order)
    n_test = max(1, round(cfg.split.test_fraction * len(order)))
    n_val = max(1, round(cfg.split.val_fraction * (len(order) - n_test)))
    test = sorted(order[:n_test])
    val = sorted(order[n_test:n_test + n_val])
    train = sorted(order[n_test + n_val:])
    if not train:
        raise ValueError("stimulus split leaves no training stimuli")
    return {"train": train, "val": val, "test": test}


def _short_positions(long_positions, n_short: int) -> list:
    return [p * n_short + j for p in long_positions for j in range(n_short)]


def subject_split(subjects: list, cfg: RunConfig) -> dict:
    """Cross-subject holdout: the last subjects are the test set; validation
    is a position holdout within the training subjects."""
    n_test = max(1, round(cfg.split.test_fraction * len(subjects)))
    if n_test >= len(subjects) - 1:
        raise ValueError("subject split leaves fewer than two training subjects")
    return {"train": subjects[:-n_test], "test": subjects[-n_test:]}


def build_split_datasets(cfg: RunConfig, manifest: DatasetManifest) -> dict:
    """Pre-training datasets per resolution plus fine-tune/eval datasets.

    Returns {"pretrain": {t: (train, val)}, "finetune": (train, val), "test": ds}.
    """
    data = cfg.data
    by_t = {t: build_clip_dataset(manifest, t, baseline_seconds=data.baseline_seconds,
                                  truncate_last_seconds=data.truncate_last_seconds)
            for t in cfg.resolutions()}
    long_ds = by_t[cfg.resolution.t_long]

    if cfg.split.mode == "subject_fraction":
        sel = subject_split(manifest.subjects, cfg)
        n_positions = min(len(long_ds.positions(s, v)) for (s, v) in long_ds.labels)
        n_val = max(1, round(cfg.split.val_fraction * n_positions))
        val_pos = list(range(n_positions - n_val, n_positions))
        train_pos = list(range(0, n_positions - n_val))
        pre = {}
        for t, ds in by_t.items():
            if t == cfg.resolution.t_long:
                tr, va = train_pos, val_pos
            else:
                n_short = round(cfg.resolution.t_long / t)
                tr = _short_positions(train_pos, n_short)
                va = _short_positions(val_pos, n_short)
            pre[t] = (ds.subset(subjects=sel["train"], positions=tr),
                      ds.subset(subjects=sel["train"], positions=va))
        fine = (long_ds.subset(subjects=sel["train"], positions=train_pos),
                long_ds.subset(subjects=sel["train"], positions=val_pos))
        test = long_ds.subset(subjects=sel["test"])
        labelable = train_pos
        n_labeled = cfg.finetune.max_label_positions
        if n_labeled is not None and n_labeled < len(labelable):
            fine = (fine[0].subset(positions=labelable[:n_labeled]), fine[1])
        return {"pretrain": pre, "finetune": fine, "test": test, "selection": sel}

    if cfg.split.mode == "stimulus_fraction":
        sel = stimulus_split(manifest.stimuli, cfg)
        pre = {t: (ds.subset(stimuli=sel["train"]), ds.subset(stimuli=sel["val"]))
               for t, ds in by_t.items()}
        fine_train = long_ds.subset(stimuli=sel["train"])
        fine = (fine_train, long_ds.subset(stimuli=sel["val"]))
        test = long_ds.subset(stimuli=sel["test"])
        labelable = sorted({p for s in fine_train.subjects for _, p in fine_train.slots_for(s)})
    else:
        n_positions = min(len(long_ds.positions(s, v)) for (s, v) in long_ds.labels)
        sel = position_split(n_positions, cfg)
        pre = {}
        for t, ds in by_t.items():
            if t == cfg.resolution.t_long:
                tr, va = sel["train"], sel["val"]
            else:
                n_short = round(cfg.resolution.t_long / t)
                tr = _short_positions(sel["train"], n_short)
                va = _short_positions(sel["val"], n_short)
            pre[t] = (ds.subset(positions=tr), ds.subset(positions=va))
        fine = (long_ds.subset(positions=sel["train"]), long_ds.subset(positions=sel["val"]))
        test = long_ds.subset(positions=sel["test"])
        labelable = sel["train"]
    n_labeled = cfg.finetune.max_label_positions
    if n_labeled is not None and n_labeled < len(labelable):
        fine = (fine[0].subset(positions=labelable[:n_labeled]), fine[1])
    return {"pretrain": pre, "finetune": fine, "test": test, "selection": sel}


# -- end-to-end desk experiment --------------------------------------------------


@dataclass
class DeskRunResult:
    gap_by_modality: dict
    gap_mean: float
    accuracy_pretrained: float
    accuracy_scratch: float
    seconds: float

    @property
    def advantage_points(self) -> float:
        return 100.0 * (self.accuracy_pretrained - self.accuracy_scratch)


def desk_e2e(out_dir, seed: int = DESK_SEED, run_cfg: RunConfig | None = None,
             synth_cfg: SynthConfig | None = None) -> DeskRunResult:
    """Synthesize data, pre-train, measure alignment, fine-tune twice (pre-trained
    vs from-scratch encoders), and evaluate both on held-out clip positions."""
    t0 = time.time()
    out_dir = Path(out_dir)
    cfg = run_cfg or desk_run_config(seed)
    cfg.apply_dtype()
    manifest = load_manifest(generate(synth_cfg or desk_synth_config(seed), out_dir / "dataset"))

    parts = build_split_datasets(cfg, manifest)
    checkpoints = pretrain(cfg, parts["pretrain"], out_dir / "pretrain")

    # Alignment is scored over every subject pair of the full dataset, so in
    # cross-subject mode it includes pairs with the never-pretrained subject.
    gap_ds = build_clip_dataset(manifest, cfg.resolution.t_long,
                                baseline_seconds=cfg.data.baseline_seconds,
                                truncate_last_seconds=cfg.data.truncate_last_seconds)
    gap_model = ContrastiveModel(cfg, _input_dims(gap_ds), cfg.resolution.t_long)
    gap_model.load_state(load_arrays(checkpoints[cfg.resolution.t_long], dtype=ad.default_dtype()))
    gaps = similarity_gap(gap_model, gap_ds)

    train_ds, val_ds = parts["finetune"]
    model = finetune(cfg, train_ds, val_ds, checkpoints, out_dir / "finetune")
    acc_pre = evaluate(model, parts["test"], cfg.task, cfg.finetune.batch_size).accuracy

    scratch_cfg = dataclasses.replace(cfg, seed=cfg.seed + 1)
    scratch = finetune(scratch_cfg, train_ds, val_ds, None, out_dir / "finetune_scratch")
    acc_scratch = evaluate(scratch, parts["test"], cfg.task, cfg.finetune.batch_size).accuracy

    return DeskRunResult(
        gap_by_modality=gaps,
        gap_mean=float(np.mean(list(gaps.values()))),
        accuracy_pretrained=acc_pre,
        accuracy_scratch=acc_scratch,
        seconds=time.time() - t0,
    )


# -- ablation sweep ---------------------------------------------------------------


ABLATION_ARMS = {
    "tcl": dict(use_tcl=True, use_da=False, use_cmcl=False),
    "tcl_da": dict(use_tcl=True, use_da=True, use_cmcl=False),
    "tcl_cmcl": dict(use_tcl=True, use_da=False, use_cmcl=True),
}


def ablation_config(seed: int) -> RunConfig:
    """Toggle-sweep configuration: a stable high-accuracy regime (within-subject
    temporal holdout, full labels) so accuracy differences reflect the toggles."""
    cfg = desk_run_config(seed)
    cfg.model = ModelConfig(n_views=3, embed_dim=24, n_heads=2, n_blocks=1, n_prompts=2,
                            dropout_p=0.1, projector_hidden=48, projector_out=24,
                            fusion_hidden=48)
    cfg.pretrain = PretrainSettings(epochs=20, lr=1e-3, clips_per_subject=6, cycles=3)
    cfg.finetune = FinetuneSettings(epochs=20, lr=1e-3, batch_size=64)
    cfg.split = SplitSettings(mode="position_fraction", test_fraction=0.34, val_fraction=0.15)
    cfg.resolution = dataclasses.replace(cfg.resolution, use_short=False)
    return cfg


ABLATION_SYNTH = dict(subject_mixing_noise=0.3, observation_snr_db=10.0, min_label_margin=0.5)


def ablation_sweep(out_dir, seeds=(0, 1, 2, 3, 4), arms: dict | None = None,
                   synth_overrides: dict | None = None) -> dict:
    """Accuracy of each toggle combination across seeds: {arm: [accuracy per seed]}.

    Runs on an easy dataset so every arm operates near its ceiling and the
    comparison reflects the toggles rather than seed luck.
    """
    out_dir = Path(out_dir)
    arms = arms or ABLATION_ARMS
    results = {arm: [] for arm in arms}
    for seed in seeds:
        scfg = desk_synth_config(seed=100 + seed, **(synth_overrides or ABLATION_SYNTH))
        manifest = load_manifest(generate(scfg, out_dir / f"dataset_{seed}"))
        for arm, toggles in arms.items():
            cfg = ablation_config(seed)
            for name, value in toggles.items():
                setattr(cfg.toggles, name, value)
            cfg.apply_dtype()
            parts = build_split_datasets(cfg, manifest)
            run_dir = out_dir / f"run_{arm}_{seed}"
            checkpoints = pretrain(cfg, parts["pretrain"], run_dir)
            model = finetune(cfg, *parts["finetune"], checkpoints, run_dir)
            acc = evaluate(model, parts["test"], cfg.task, cfg.finetune.batch_size).accuracy
            results[arm].append(acc)
    return results
